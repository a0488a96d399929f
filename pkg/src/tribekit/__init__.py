"""tribekit: desk-scale test-time adaptation toolkit.

Balanced class-wise batch normalization, tri-net self-training with an
anchored loss, imbalanced non-i.i.d. stream protocols, baselines, and a
reproducible experiment harness.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DivergenceError  # noqa: F401
