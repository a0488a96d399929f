"""Normalization layer family.

Three variants over per-channel statistics of B x C (or B x C x H x W)
feature batches:

- standard: classic batchnorm. Adapt mode normalizes with the current
  batch moments and folds them into the running stats with `momentum`
  (momentum=1.0 reproduces the prediction-time-BN baseline that replaces
  running stats outright).
- robust: class-agnostic moving-average update of the running stats on
  every test batch.
- balanced: one (mu, var) pair per semantic class, updated iteratively
  from pseudo-labeled batches and aggregated with equal class weights
  into the global normalization statistics.

All statistics are float64. Variances never drop below VAR_FLOOR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

VAR_FLOOR = 1e-10
DEFAULT_EPS = 1e-5
DEFAULT_ROBUST_MOMENTUM = 0.05


@dataclass
class ClassWiseStats:
    """Per-class, per-channel running mean/variance. Shapes (Kc, C)."""

    mu: np.ndarray
    var: np.ndarray

    @property
    def kc(self) -> int:
        return self.mu.shape[0]

    @property
    def channels(self) -> int:
        return self.mu.shape[1]

    def copy(self) -> "ClassWiseStats":
        return ClassWiseStats(self.mu.copy(), self.var.copy())


@dataclass
class NormState:
    """State of one normalization layer.

    `mean`/`var` hold the active global statistics: running stats for
    standard/robust, the balanced aggregate for balanced (refreshed after
    every class-stats update). `scale`/`shift` are the affine parameters.
    """

    variant: str  # "standard" | "robust" | "balanced"
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_ROBUST_MOMENTUM  # standard / robust
    gamma: float = 0.0  # balanced: class-agnostic mixing weight
    eta: float = 0.005  # balanced: instance-level momentum
    class_stats: ClassWiseStats | None = None
    # Balanced variance update: "per_class" uses sigma^2_{k'} inside the
    # shared k' sum (symmetric with mu_{k'}), "literal" keeps sigma^2_k.
    shared_var_term: str = "per_class"

    def __post_init__(self):
        if self.variant not in ("standard", "robust", "balanced"):
            raise ConfigError(f"unknown norm variant {self.variant!r}")
        if self.variant == "balanced":
            if not 0.0 <= self.gamma <= 1.0:
                raise ConfigError(f"gamma must be in [0,1], got {self.gamma}")
            if self.eta <= 0.0:
                raise ConfigError(f"eta must be positive, got {self.eta}")
            if self.class_stats is None:
                raise ConfigError("balanced state requires class_stats")
        if self.shared_var_term not in ("per_class", "literal"):
            raise ConfigError(f"unknown shared_var_term {self.shared_var_term!r}")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "NormState":
        return NormState(
            variant=self.variant,
            mean=self.mean.copy(),
            var=self.var.copy(),
            scale=self.scale.copy(),
            shift=self.shift.copy(),
            eps=self.eps,
            momentum=self.momentum,
            gamma=self.gamma,
            eta=self.eta,
            class_stats=None if self.class_stats is None else self.class_stats.copy(),
            shared_var_term=self.shared_var_term,
        )


@dataclass
class LabeledFeatureBatch:
    """Features (B,C) or (B,C,H,W) with pseudo-labels (B,) in [0, Kc)."""

    features: np.ndarray
    pseudo_labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] != len(self.pseudo_labels):
            raise ConfigError("features and pseudo_labels disagree on batch size")
        if self.features.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")


def fresh_state(channels: int, variant: str = "standard", **kwargs) -> NormState:
    """New state with zero mean, unit variance, identity affine."""
    return NormState(
        variant=variant,
        mean=np.zeros(channels),
        var=np.ones(channels),
        scale=np.ones(channels),
        shift=np.zeros(channels),
        **kwargs,
    )


def _spatial_moments(features: np.ndarray):
    """Per-sample, per-channel mean of F and of F^2 over spatial positions.

    Accepts (B, C) or (B, C, H, W); returns two (B, C) arrays.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        return f, f * f
    if f.ndim == 4:
        return f.mean(axis=(2, 3)), (f * f).mean(axis=(2, 3))
    raise ConfigError(f"expected (B,C) or (B,C,H,W) features, got shape {f.shape}")


def standard_batch_stats(features: np.ndarray):
    """Exact per-channel mean and biased variance over all B*H*W positions."""
    m1, m2 = _spatial_moments(features)
    mean = m1.mean(axis=0)
    var = m2.mean(axis=0) - mean * mean
    return mean, np.maximum(var, 0.0)


def robust_update(state: NormState, features: np.ndarray) -> None:
    """Class-agnostic moving-average update of the running statistics."""
    if state.variant != "robust":
        raise ConfigError("robust_update requires a robust-variant state")
    batch_mean, batch_var = standard_batch_stats(features)
    m = state.momentum
    state.mean += m * (batch_mean - state.mean)
    state.var += m * (batch_var - state.var)
    np.maximum(state.var, VAR_FLOOR, out=state.var)


def _class_increments(state: NormState, batch: LabeledFeatureBatch):
    """Per-class mean increment delta_k and raw variance increment nu_k.

    delta_k = eta * sum_{b in k} mean_hw(F_b - mu_k)
    nu_k    = eta * sum_{b in k} mean_hw((F_b - mu_k)^2 - var_k)
    Classes absent from the batch get zeros. Shapes (Kc, C).
    """
    cs = state.class_stats
    kc = cs.kc
    labels = np.asarray(batch.pseudo_labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= kc:
        raise ConfigError("pseudo labels out of range")
    m1, m2 = _spatial_moments(batch.features)
    counts = np.bincount(labels, minlength=kc).astype(np.float64)  # (Kc,)
    s1 = np.zeros_like(cs.mu)
    s2 = np.zeros_like(cs.mu)
    np.add.at(s1, labels, m1)
    np.add.at(s2, labels, m2)
    n = counts[:, None]
    delta = state.eta * (s1 - n * cs.mu)
    nu = state.eta * (s2 - 2.0 * cs.mu * s1 + n * (cs.mu * cs.mu) - n * cs.var)
    return delta, nu, counts


def balanced_update(state: NormState, batch: LabeledFeatureBatch) -> None:
    """Iterative class-wise statistics update mixed with a shared term.

    Each class row receives (1-gamma) of its own increment plus gamma of
    the class-averaged increment; gamma=1 degenerates to a class-agnostic
    shared update applied to every row. Afterwards the global mean/var
    are refreshed with the equal-weight aggregate.
    """
    if state.variant != "balanced":
        raise ConfigError("balanced_update requires a balanced-variant state")
    cs = state.class_stats
    delta, nu, counts = _class_increments(state, batch)
    g = state.gamma

    own_var_inc = -delta * delta + nu
    shared_mu = delta.mean(axis=0)
    if state.shared_var_term == "per_class":
        shared_var = own_var_inc.mean(axis=0)  # same for every class row
        var_inc = (1.0 - g) * own_var_inc + g * shared_var
    else:
        # literal reading: the shared sum subtracts this row's var_k for
        # every sample, regardless of the sample's own class
        partial = (-delta * delta + nu + state.eta * counts[:, None] * cs.var).mean(axis=0)
        var_inc = (1.0 - g) * own_var_inc + g * (
            partial - state.eta * (counts.sum() / cs.kc) * cs.var
        )

    cs.mu += (1.0 - g) * delta + g * shared_mu
    cs.var += var_inc
    np.maximum(cs.var, VAR_FLOOR, out=cs.var)

    state.mean, state.var = balanced_aggregate(state)


def balanced_aggregate(state: NormState):
    """Equal-weight mixture moments over the class rows.

    mu_ba = mean_k mu_k; var_ba = mean_k [var_k + (mu_ba - mu_k)^2].
    """
    if state.variant != "balanced":
        raise ConfigError("balanced_aggregate requires a balanced-variant state")
    cs = state.class_stats
    mu_ba = cs.mu.mean(axis=0)
    var_ba = (cs.var + (mu_ba - cs.mu) ** 2).mean(axis=0)
    return mu_ba, np.maximum(var_ba, VAR_FLOOR)


def pooled_stats_from_classes(counts, mus, variances):
    """Count-weighted mixture moments (the class-agnostic pool).

    mu_g = sum_k N_k mu_k / sum_k N_k
    var_g = sum_k N_k [var_k + (mu_k - mu_g)^2] / sum_k N_k
    """
    n = np.asarray(counts, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if np.any(n < 0):
        raise ConfigError("class counts must be nonnegative")
    total = n.sum()
    if total < 1:
        raise ConfigError("at least one sample required across classes")
    w = (n / total)[:, None] if mus.ndim == 2 else n / total
    mu_g = (w * mus).sum(axis=0)
    var_g = (w * (variances + (mus - mu_g) ** 2)).sum(axis=0)
    return mu_g, var_g


def normalize(state: NormState, features: np.ndarray, stats=None) -> np.ndarray:
    """Affine-transformed standardization of `features`.

    Uses the state's active global statistics unless an explicit
    (mean, var) pair is supplied (the batch-stat path of standard BN).
    """
    mean, var = stats if stats is not None else (state.mean, state.var)
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 4:
        shape = (1, -1, 1, 1)
    elif f.ndim == 2:
        shape = (1, -1)
    else:
        raise ConfigError(f"expected (B,C) or (B,C,H,W) features, got shape {f.shape}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (f - mean.reshape(shape)) * inv.reshape(shape)
    return state.scale.reshape(shape) * xhat + state.shift.reshape(shape)


def init_norm_states(source_states, variant: str, kc: int, *,
                     momentum: float | None = None,
                     gamma: float = 0.0,
                     eta: float | None = None,
                     shared_var_term: str = "per_class"):
    """Test-time states initialized from a source model's running stats.

    Balanced states replicate the class-agnostic source stats into every
    class row; robust/standard copy them directly. Affine parameters are
    copied (fresh arrays), so adapting never touches the source model.
    """
    out = []
    for src in source_states:
        c = src.channels
        kwargs = dict(
            mean=src.mean.copy(),
            var=src.var.copy(),
            scale=src.scale.copy(),
            shift=src.shift.copy(),
            eps=src.eps,
        )
        if variant == "balanced":
            if eta is None:
                raise ConfigError("balanced init requires eta")
            cs = ClassWiseStats(
                mu=np.tile(src.mean, (kc, 1)),
                var=np.tile(src.var, (kc, 1)),
            )
            out.append(NormState(variant="balanced", gamma=gamma, eta=eta,
                                 class_stats=cs, shared_var_term=shared_var_term,
                                 **kwargs))
        elif variant in ("robust", "standard"):
            m = momentum if momentum is not None else (
                DEFAULT_ROBUST_MOMENTUM if variant == "robust" else 1.0)
            out.append(NormState(variant=variant, momentum=m, **kwargs))
        else:
            raise ConfigError(f"unknown norm variant {variant!r}")
    return out


def class_stats_csv(state: NormState) -> str:
    """Dump per-class statistics as CSV with columns class,channel,mu,var."""
    if state.class_stats is None:
        raise ConfigError("state has no class-wise statistics")
    cs = state.class_stats
    lines = ["class,channel,mu,var"]
    for k in range(cs.kc):
        for c in range(cs.channels):
            lines.append(f"{k},{c},{float(cs.mu[k, c])!r},{float(cs.var[k, c])!r}")
    return "\n".join(lines) + "\n"
