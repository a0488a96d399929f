"""Minimal dense network with explicit forward/backward passes.

Float64 throughout. The backbone is Dense/ReLU stacks with normalization
slots between them; normalization statistics are treated as constants in
backward (they are running estimates, not batch functions), so gradients
flow only through weights and affine parameters.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import norm as normmod
from .errors import ConfigError, DivergenceError

CHECKPOINT_MAGIC = b"TRIBEKIT"
CHECKPOINT_VERSION = 1

PROB_FLOOR = 1e-12


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class ReLU:
    pass


@dataclass
class NormSlot:
    """Placeholder dispatching to the norm state at `index` in the state list."""

    index: int
    dim: int


@dataclass
class Network:
    layers: list
    kc: int

    def norm_slots(self):
        return [l for l in self.layers if isinstance(l, NormSlot)]


@dataclass
class Model:
    """A network plus the normalization states it was trained with."""

    net: Network
    states: list


def init_dense(in_dim: int, out_dim: int, rng) -> Dense:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return Dense(weights=w, bias=np.zeros(out_dim))


def build_mlp(in_dim: int, hidden, kc: int, seed: int, *,
              bn_momentum: float = 0.1) -> Model:
    """Dense -> Norm -> ReLU blocks followed by a linear head.

    Fresh standard-BN states (zero mean, unit variance, identity affine)
    accompany the network; one per hidden block.
    """
    rng = np.random.default_rng(seed)
    layers, states = [], []
    prev = in_dim
    for i, h in enumerate(hidden):
        layers.append(init_dense(prev, h, rng))
        layers.append(NormSlot(index=i, dim=h))
        states.append(normmod.fresh_state(h, "standard", momentum=bn_momentum))
        layers.append(ReLU())
        prev = h
    layers.append(init_dense(prev, kc, rng))
    return Model(net=Network(layers=layers, kc=kc), states=states)


def forward(net: Network, x: np.ndarray, states, mode: str = "eval",
            pseudo_labels=None):
    """Run the network, returning (logits, trace).

    mode "eval" is a pure function of (weights, statistics, input).
    mode "adapt" additionally updates the statistics of every traversed
    norm slot per its variant; balanced slots require pseudo_labels.
    """
    if mode not in ("eval", "adapt"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError(f"expected (B, C) input, got shape {a.shape}")
    trace = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            if a.shape[1] != layer.in_dim:
                raise ConfigError(
                    f"input dim {a.shape[1]} does not match dense in_dim {layer.in_dim}")
            trace.append(("dense", a))
            a = a @ layer.weights.T + layer.bias
        elif isinstance(layer, ReLU):
            mask = a > 0.0
            trace.append(("relu", mask))
            a = a * mask
        elif isinstance(layer, NormSlot):
            state = states[layer.index]
            if a.shape[1] != state.channels:
                raise ConfigError(
                    f"norm slot {layer.index} expects {state.channels} channels, got {a.shape[1]}")
            if mode == "adapt":
                if state.variant == "standard":
                    bm, bv = normmod.standard_batch_stats(a)
                    m = state.momentum
                    state.mean += m * (bm - state.mean)
                    state.var += m * (bv - state.var)
                    np.maximum(state.var, normmod.VAR_FLOOR, out=state.var)
                    mean, var = bm, np.maximum(bv, normmod.VAR_FLOOR)
                elif state.variant == "robust":
                    normmod.robust_update(state, a)
                    mean, var = state.mean, state.var
                else:
                    if pseudo_labels is None:
                        raise ConfigError("balanced adapt forward needs pseudo labels")
                    normmod.balanced_update(
                        state, normmod.LabeledFeatureBatch(a, pseudo_labels))
                    mean, var = state.mean, state.var
            else:
                mean, var = state.mean, state.var
            inv_std = 1.0 / np.sqrt(var + state.eps)
            xhat = (a - mean) * inv_std
            trace.append(("norm", xhat, inv_std.copy(), state.scale.copy(), layer.index))
            a = state.scale * xhat + state.shift
        else:
            raise ConfigError(f"unknown layer type {type(layer)!r}")
    if not np.all(np.isfinite(a)):
        raise DivergenceError("non-finite logits")
    return a, trace


def backward(net: Network, trace, dlogits: np.ndarray, trainable: str = "all"):
    """Gradients for the selected parameter set.

    Returns a dict keyed "dense{i}.weights" / "dense{i}.bias" /
    "norm{slot}.scale" / "norm{slot}.shift". Normalization statistics are
    constants; with trainable="norm_affines" dense gradients are omitted.
    """
    if trainable not in ("all", "norm_affines"):
        raise ConfigError(f"unknown trainable set {trainable!r}")
    if len(trace) != len(net.layers):
        raise ConfigError("trace does not match network")
    grads = {}
    dout = np.asarray(dlogits, dtype=np.float64)
    dense_idx = sum(1 for l in net.layers if isinstance(l, Dense))
    for layer, rec in zip(reversed(net.layers), reversed(trace)):
        if isinstance(layer, Dense):
            dense_idx -= 1
            _, a_in = rec
            if trainable == "all":
                grads[f"dense{dense_idx}.weights"] = dout.T @ a_in
                grads[f"dense{dense_idx}.bias"] = dout.sum(axis=0)
            dout = dout @ layer.weights
        elif isinstance(layer, ReLU):
            _, mask = rec
            dout = dout * mask
        else:
            _, xhat, inv_std, scale, slot = rec
            grads[f"norm{slot}.scale"] = (dout * xhat).sum(axis=0)
            grads[f"norm{slot}.shift"] = dout.sum(axis=0)
            dout = dout * scale * inv_std
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def onehot(labels, kc: int) -> np.ndarray:
    y = np.zeros((len(labels), kc))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def cross_entropy(probs: np.ndarray, onehot_targets: np.ndarray) -> np.ndarray:
    """Per-sample -log p[target]; probabilities floored at 1e-12."""
    p = (probs * onehot_targets).sum(axis=1)
    return -np.log(np.maximum(p, PROB_FLOOR))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Per-sample Shannon entropy in nats; 0*log(0) taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    return -terms.sum(axis=1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One Adam update, in place. Rejects non-finite gradients untouched."""
    for name in params:
        if name not in grads:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise ConfigError(f"gradient shape mismatch for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def dense_params(net: Network) -> dict:
    out = {}
    i = 0
    for layer in net.layers:
        if isinstance(layer, Dense):
            out[f"dense{i}.weights"] = layer.weights
            out[f"dense{i}.bias"] = layer.bias
            i += 1
    return out


def affine_params(states) -> dict:
    out = {}
    for i, st in enumerate(states):
        out[f"norm{i}.scale"] = st.scale
        out[f"norm{i}.shift"] = st.shift
    return out


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(model.net, x, model.states, mode="eval")
    return logits.argmax(axis=1)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(model, x) == np.asarray(y)).mean())


def pretrain(model: Model, features: np.ndarray, labels: np.ndarray, *,
             epochs: int, lr: float, seed: int, batch_size: int = 64,
             val_fraction: float = 0.1) -> float:
    """Source training with cross-entropy and Adam; returns held-out accuracy.

    A seeded fraction of the data is held out for the accuracy report;
    running BN statistics accumulate over the training passes and become
    the source statistics for test-time initialization.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ConfigError("empty source dataset")
    if y.min() < 0 or y.max() >= model.net.kc:
        raise ConfigError("labels out of range for the network's class count")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = max(1, int(round(val_fraction * len(x)))) if val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    xt, yt = x[train_idx], y[train_idx]

    params = dense_params(model.net) | affine_params(model.states)
    opt = AdamState(lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(len(xt))
        for start in range(0, len(xt), batch_size):
            idx = perm[start:start + batch_size]
            xb, yb = xt[idx], yt[idx]
            logits, trace = forward(model.net, xb, model.states, mode="adapt")
            probs = softmax(logits)
            targets = onehot(yb, model.net.kc)
            loss = cross_entropy(probs, targets).mean()
            if not np.isfinite(loss):
                raise DivergenceError(f"pretraining loss diverged (loss={loss})")
            dlogits = (probs - targets) / len(xb)
            grads = backward(model.net, trace, dlogits, trainable="all")
            adam_step(opt, params, grads)
    if n_val == 0:
        return float("nan")
    return accuracy(model, x[val_idx], y[val_idx])


# --- checkpoint format -------------------------------------------------
# magic "TRIBEKIT" | version u32 | kc u32 | n_layers u32 | layer records.
# Layer kinds: 0 dense (out u32, in u32, weights, bias), 1 relu,
# 2 norm (slot u32, channels u32, mean, var, scale, shift).
# All integers and floats little-endian; floats are 64-bit.

_KIND_DENSE, _KIND_RELU, _KIND_NORM = 0, 1, 2


def _write_f64(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(buf, n):
    return np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, model.net.kc,
                          len(model.net.layers)))
    for layer in model.net.layers:
        if isinstance(layer, Dense):
            buf.write(struct.pack("<III", _KIND_DENSE, layer.out_dim, layer.in_dim))
            _write_f64(buf, layer.weights)
            _write_f64(buf, layer.bias)
        elif isinstance(layer, ReLU):
            buf.write(struct.pack("<I", _KIND_RELU))
        else:
            st = model.states[layer.index]
            buf.write(struct.pack("<III", _KIND_NORM, layer.index, layer.dim))
            for arr in (st.mean, st.var, st.scale, st.shift):
                _write_f64(buf, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = buf.read(8)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a model checkpoint (bad magic {magic!r})")
    version, kc, n_layers = struct.unpack("<III", buf.read(12))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    layers, states = [], {}
    for _ in range(n_layers):
        (kind,) = struct.unpack("<I", buf.read(4))
        if kind == _KIND_DENSE:
            out_dim, in_dim = struct.unpack("<II", buf.read(8))
            w = _read_f64(buf, out_dim * in_dim).reshape(out_dim, in_dim)
            b = _read_f64(buf, out_dim)
            layers.append(Dense(weights=w, bias=b))
        elif kind == _KIND_RELU:
            layers.append(ReLU())
        elif kind == _KIND_NORM:
            slot, dim = struct.unpack("<II", buf.read(8))
            mean, var, scale, shift = (_read_f64(buf, dim) for _ in range(4))
            layers.append(NormSlot(index=slot, dim=dim))
            states[slot] = normmod.NormState(
                variant="standard", mean=mean, var=var, scale=scale, shift=shift)
        else:
            raise ConfigError(f"unknown layer kind {kind} in checkpoint")
    state_list = [states[i] for i in sorted(states)]
    return Model(net=Network(layers=layers, kc=kc), states=state_list)
