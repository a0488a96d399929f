import numpy as np
import pytest

from tribekit import nn, streamgen


def finite_diff_grads(loss_fn, params, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every entry of params.

    `params` maps name -> array; entries are perturbed in place and
    restored, so loss_fn must read the live arrays.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for j in range(arr.size):
            orig = arr.flat[j]
            arr.flat[j] = orig + h
            lp = loss_fn()
            arr.flat[j] = orig - h
            lm = loss_fn()
            arr.flat[j] = orig
            g.flat[j] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def rel_err(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(na, nb, 1e-12)


def max_rel_err(analytic: dict, numeric: dict) -> float:
    assert set(analytic) == set(numeric)
    return max(rel_err(analytic[k], numeric[k]) for k in analytic)


@pytest.fixture(scope="session")
def small_dataset():
    specs = streamgen.default_domain_specs(4, 2.5)
    return streamgen.synth_dataset(4, 6, 300, specs, seed=5, separation=6.0)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    ds = small_dataset
    model = nn.build_mlp(ds.c, (16, 16), ds.kc, seed=0)
    acc = nn.pretrain(model, ds.clean_features, ds.clean_labels,
                      epochs=10, lr=1e-3, seed=0)
    assert acc > 0.9
    return model
