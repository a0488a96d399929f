"""Test-time adaptation methods.

The tri-net engine keeps one set of shared weights with three independent
normalization-state sets: the teacher predicts and pseudo-labels the
stream, the student learns from augmented inputs via an entropy-gated
self-training loss, and a frozen-affine anchor regularizes the teacher
through a gated mean-square loss. Only normalization affine parameters
are ever optimized; teacher and student share them, the anchor keeps the
source values.

Baselines: direct testing, prediction-time batch stats, pseudo-label
cross-entropy, entropy minimization, and statistics-only adaptation with
either the balanced or the robust layer.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import harness, nn
from .errors import ConfigError
from .norm import init_norm_states
from .seeding import child_rng

log = logging.getLogger(__name__)

METHODS = ("test", "bn", "pl", "tent", "tribe", "balanced-bn", "robust-bn")


@dataclass
class AugmentSpec:
    """Feature-space stand-in for strong augmentation."""

    noise: float = 0.2
    scale: float = 0.2
    dropout: float = 0.1


@dataclass
class TribeHyperParams:
    h0: float | None = None  # entropy gate fraction; resolved per class count
    lambda_anc: float = 0.5
    gamma: float = 0.0
    eta: float | None = None  # resolved to 0.0005 * kc
    lr: float = 1e-3
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    robust_momentum: float = 0.05
    shared_var_term: str = "per_class"

    def __post_init__(self):
        if self.h0 is not None and not 0.0 < self.h0 <= 1.0:
            raise ConfigError(f"h0 must be in (0, 1], got {self.h0}")
        if self.lambda_anc < 0:
            raise ConfigError(f"lambda_anc must be >= 0, got {self.lambda_anc}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")

    def resolved_h0(self, kc: int) -> float:
        if self.h0 is not None:
            return self.h0
        return 0.2 if kc >= 50 else 0.05

    def resolved_eta(self, kc: int) -> float:
        return 0.0005 * kc if self.eta is None else self.eta


@dataclass
class StepOutput:
    predictions: np.ndarray
    teacher_probs: np.ndarray
    gate_mask: np.ndarray
    loss_st: float
    loss_anc: float


def augment(x: np.ndarray, spec: AugmentSpec, rng) -> np.ndarray:
    """Additive noise, random per-feature scaling, random feature dropout."""
    out = np.array(x, dtype=np.float64, copy=True)
    if spec.noise > 0:
        out += spec.noise * rng.standard_normal(out.shape)
    if spec.scale > 0:
        out *= 1.0 + spec.scale * rng.uniform(-1.0, 1.0, out.shape)
    if spec.dropout > 0:
        out *= rng.random(out.shape) >= spec.dropout
    return out


def entropy_gate(teacher_probs: np.ndarray, h0: float, kc: int) -> np.ndarray:
    # tiny guard keeps H = log(kc) outside the gate at h0 = 1 despite rounding
    return nn.entropy(teacher_probs) < h0 * math.log(kc) - 1e-12


def self_training_loss(p_t: np.ndarray, p_s: np.ndarray, h0: float, kc: int):
    """Gated cross-entropy from teacher pseudo-labels to student posteriors.

    Returns (loss, gate mask); the loss is the masked mean, 0 when the
    gate admits nothing.
    """
    mask = entropy_gate(p_t, h0, kc)
    m = int(mask.sum())
    if m == 0:
        return 0.0, mask
    targets = nn.onehot(p_t.argmax(axis=1), kc)
    ce = nn.cross_entropy(p_s, targets)
    return float((ce * mask).sum() / m), mask


def anchored_loss(p_t: np.ndarray, p_a: np.ndarray, mask: np.ndarray, kc: int) -> float:
    """Gated mean-square distance between teacher and anchor posteriors."""
    m = int(mask.sum())
    if m == 0:
        return 0.0
    sq = ((p_t - p_a) ** 2).sum(axis=1)
    return float((sq * mask).sum() / (kc * m))


def _softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """d loss / d logits given d loss / d probs through a softmax row."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def self_training_dlogits(p_s: np.ndarray, pseudo_labels, mask: np.ndarray,
                          kc: int) -> np.ndarray:
    """d L_st / d student logits; pseudo-labels and gate are constants."""
    m = int(mask.sum())
    if m == 0:
        return np.zeros_like(p_s)
    return (mask[:, None] / m) * (p_s - nn.onehot(pseudo_labels, kc))


def anchored_dlogits(p_t: np.ndarray, p_a: np.ndarray, mask: np.ndarray,
                     kc: int) -> np.ndarray:
    """d L_anc / d teacher logits; the anchor posterior is a constant."""
    m = int(mask.sum())
    if m == 0:
        return np.zeros_like(p_t)
    dp = (2.0 / (kc * m)) * mask[:, None] * (p_t - p_a)
    return _softmax_vjp(p_t, dp)


def pl_dlogits(probs: np.ndarray) -> np.ndarray:
    """d (mean CE against own argmax) / d logits."""
    targets = nn.onehot(probs.argmax(axis=1), probs.shape[1])
    return (probs - targets) / len(probs)


def tent_dlogits(probs: np.ndarray) -> np.ndarray:
    """d (mean prediction entropy) / d logits."""
    ent = nn.entropy(probs)
    logp = np.log(np.maximum(probs, nn.PROB_FLOOR))
    return np.where(probs > 0.0, -probs * (logp + ent[:, None]), 0.0) / len(probs)


@dataclass
class TriNetState:
    net: nn.Network
    teacher_states: list
    student_states: list
    anchor_states: list
    opt: nn.AdamState
    kc: int
    h0: float
    lambda_anc: float


def init_tribe_state(model: nn.Model, hp: TribeHyperParams) -> TriNetState:
    """Tri-net from a source model.

    Non-norm weights stay in the model's network (single storage).
    Teacher and student share affine arrays (one trainable set); the
    anchor gets its own copies, frozen at the source values.
    """
    kc = model.net.kc
    eta = hp.resolved_eta(kc)
    common = dict(gamma=hp.gamma, eta=eta, shared_var_term=hp.shared_var_term)
    teacher = init_norm_states(model.states, "balanced", kc, **common)
    student = init_norm_states(model.states, "balanced", kc, **common)
    anchor = init_norm_states(model.states, "balanced", kc, **common)
    for ts, ss in zip(teacher, student):
        ss.scale = ts.scale  # shared trainable affines
        ss.shift = ts.shift
    return TriNetState(
        net=model.net, teacher_states=teacher, student_states=student,
        anchor_states=anchor, opt=nn.AdamState(lr=hp.lr), kc=kc,
        h0=hp.resolved_h0(kc), lambda_anc=hp.lambda_anc)


def tribe_step(state: TriNetState, hp: TribeHyperParams, x: np.ndarray, rng) -> StepOutput:
    """One adaptation step: predict, update statistics, optimize affines.

    Predictions come from the teacher's inference pass before any state
    is touched by this batch. Statistics of all three branches are then
    updated with the teacher's pseudo-labels (student from the augmented
    view), and one Adam step is applied to the shared affine parameters
    unless the gate is empty or the loss is non-finite.
    """
    net = state.net
    logits_t, trace_t = nn.forward(net, x, state.teacher_states, mode="eval")
    p_t = nn.softmax(logits_t)
    yhat = p_t.argmax(axis=1)

    nn.forward(net, x, state.teacher_states, mode="adapt", pseudo_labels=yhat)
    logits_a, _ = nn.forward(net, x, state.anchor_states, mode="adapt",
                             pseudo_labels=yhat)
    p_a = nn.softmax(logits_a)
    x_aug = augment(x, hp.augment, rng)
    logits_s, trace_s = nn.forward(net, x_aug, state.student_states, mode="adapt",
                                   pseudo_labels=yhat)
    p_s = nn.softmax(logits_s)

    l_st, mask = self_training_loss(p_t, p_s, state.h0, state.kc)
    l_anc = anchored_loss(p_t, p_a, mask, state.kc)
    out = StepOutput(predictions=yhat, teacher_probs=p_t, gate_mask=mask,
                     loss_st=l_st, loss_anc=l_anc)

    m = int(mask.sum())
    total = l_st + state.lambda_anc * l_anc
    if m == 0:
        return out
    if not np.isfinite(total):
        log.warning("skipping update: non-finite loss (st=%s anc=%s)", l_st, l_anc)
        return out

    dz_s = self_training_dlogits(p_s, yhat, mask, state.kc)
    grads = nn.backward(net, trace_s, dz_s, trainable="norm_affines")
    if state.lambda_anc > 0:
        dz_t = state.lambda_anc * anchored_dlogits(p_t, p_a, mask, state.kc)
        for name, g in nn.backward(net, trace_t, dz_t,
                                   trainable="norm_affines").items():
            grads[name] += g
    try:
        nn.adam_step(state.opt, nn.affine_params(state.teacher_states), grads)
    except Exception as exc:  # keep streaming; predictions already emitted
        log.warning("skipping update: %s", exc)
    return out


# --- baselines -----------------------------------------------------------

def baseline_test_step(model: nn.Model, x: np.ndarray) -> np.ndarray:
    """Inference with frozen source statistics; mutates nothing."""
    return nn.predict(model, x)


def baseline_bn_step(net: nn.Network, states, x: np.ndarray) -> np.ndarray:
    """Normalize with current-batch moments; no parameter updates.

    A single-sample batch has no usable variance, so it falls back to
    the running statistics with a warning.
    """
    if len(x) < 2:
        log.warning("batch of size %d: falling back to running statistics", len(x))
        logits, _ = nn.forward(net, x, states, mode="eval")
    else:
        logits, _ = nn.forward(net, x, states, mode="adapt")
    return logits.argmax(axis=1)


def baseline_pl_step(net: nn.Network, states, opt: nn.AdamState,
                     x: np.ndarray) -> np.ndarray:
    """Batch-stat normalization, cross-entropy against own argmax."""
    logits, trace = nn.forward(net, x, states, mode="adapt")
    probs = nn.softmax(logits)
    preds = probs.argmax(axis=1)
    grads = nn.backward(net, trace, pl_dlogits(probs), trainable="norm_affines")
    try:
        nn.adam_step(opt, nn.affine_params(states), grads)
    except Exception as exc:
        log.warning("skipping update: %s", exc)
    return preds


def baseline_tent_step(net: nn.Network, states, opt: nn.AdamState,
                       x: np.ndarray) -> np.ndarray:
    """Batch-stat normalization, mean prediction entropy as the loss."""
    logits, trace = nn.forward(net, x, states, mode="adapt")
    probs = nn.softmax(logits)
    preds = probs.argmax(axis=1)
    grads = nn.backward(net, trace, tent_dlogits(probs), trainable="norm_affines")
    try:
        nn.adam_step(opt, nn.affine_params(states), grads)
    except Exception as exc:
        log.warning("skipping update: %s", exc)
    return preds


def tent_loss(probs: np.ndarray) -> float:
    return float(nn.entropy(probs).mean())


def pl_loss(probs: np.ndarray) -> float:
    targets = nn.onehot(probs.argmax(axis=1), probs.shape[1])
    return float(nn.cross_entropy(probs, targets).mean())


# --- episode orchestration ------------------------------------------------

class _TestAdapter:
    def __init__(self, model, hp, seed):
        self.model = model

    def step(self, x):
        return baseline_test_step(self.model, x)


class _BNAdapter:
    def __init__(self, model, hp, seed):
        self.net = model.net
        self.states = init_norm_states(model.states, "standard", model.net.kc,
                                       momentum=1.0)

    def step(self, x):
        return baseline_bn_step(self.net, self.states, x)


class _PLAdapter:
    def __init__(self, model, hp, seed):
        self.net = model.net
        self.states = init_norm_states(model.states, "standard", model.net.kc,
                                       momentum=1.0)
        self.opt = nn.AdamState(lr=hp.lr)

    def step(self, x):
        return baseline_pl_step(self.net, self.states, self.opt, x)


class _TentAdapter(_PLAdapter):
    def step(self, x):
        return baseline_tent_step(self.net, self.states, self.opt, x)


class _TribeAdapter:
    def __init__(self, model, hp, seed):
        self.hp = hp
        self.state = init_tribe_state(model, hp)
        self.rng = child_rng(seed, "tribe-augment")

    def step(self, x):
        return tribe_step(self.state, self.hp, x, self.rng).predictions


class _StatsOnlyAdapter:
    """Predict with current statistics, then update them; no optimization."""

    variant = "balanced"

    def __init__(self, model, hp, seed):
        kc = model.net.kc
        self.net = model.net
        if self.variant == "balanced":
            self.states = init_norm_states(
                model.states, "balanced", kc, gamma=hp.gamma,
                eta=hp.resolved_eta(kc), shared_var_term=hp.shared_var_term)
        else:
            self.states = init_norm_states(model.states, "robust", kc,
                                           momentum=hp.robust_momentum)

    def step(self, x):
        logits, _ = nn.forward(self.net, x, self.states, mode="eval")
        preds = logits.argmax(axis=1)
        nn.forward(self.net, x, self.states, mode="adapt", pseudo_labels=preds)
        return preds


class _BalancedBNAdapter(_StatsOnlyAdapter):
    variant = "balanced"


class _RobustBNAdapter(_StatsOnlyAdapter):
    variant = "robust"


_ADAPTERS = {
    "test": _TestAdapter,
    "bn": _BNAdapter,
    "pl": _PLAdapter,
    "tent": _TentAdapter,
    "tribe": _TribeAdapter,
    "balanced-bn": _BalancedBNAdapter,
    "robust-bn": _RobustBNAdapter,
}


def make_adapter(method: str, model: nn.Model, hp: TribeHyperParams, seed: int):
    if method not in _ADAPTERS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    return _ADAPTERS[method](model, hp, seed)


def weights_fingerprint(net: nn.Network) -> str:
    """SHA-256 over all non-norm parameters."""
    h = hashlib.sha256()
    for layer in net.layers:
        if isinstance(layer, nn.Dense):
            h.update(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return h.hexdigest()


def run_episode(method: str, batches, features_by_domain, model: nn.Model,
                hp: TribeHyperParams, seed: int,
                config_fingerprint: str = "", keep_predictions: bool = False
                ) -> harness.EpisodeResult:
    """Online prediction-then-adapt over the whole stream.

    Predictions for each batch are recorded from the step's inference
    pass before that batch updates anything; state persists across
    domain transitions (no reset).
    """
    adapter = make_adapter(method, model, hp, seed)
    domain_order = []
    preds_by_domain = {}
    labels_by_domain = {}
    prediction_log = [] if keep_predictions else None
    for b in batches:
        feats = features_by_domain[b.domain_id]
        if np.max(b.ids, initial=0) >= len(feats):
            raise ConfigError(
                f"batch {b.t}: sample id out of range for domain {b.domain_id}")
        if np.max(b.labels, initial=0) >= model.net.kc:
            raise ConfigError(
                f"batch {b.t}: label out of range for a {model.net.kc}-class model")
        x = feats[b.ids]
        preds = adapter.step(x)
        if b.domain_id not in preds_by_domain:
            domain_order.append(b.domain_id)
            preds_by_domain[b.domain_id] = []
            labels_by_domain[b.domain_id] = []
        preds_by_domain[b.domain_id].append(preds)
        labels_by_domain[b.domain_id].append(b.labels)
        if keep_predictions:
            prediction_log.append(
                {"t": b.t, "domain": b.domain_id,
                 "predictions": [int(p) for p in preds]})
    domains = []
    for d in domain_order:
        preds = np.concatenate(preds_by_domain[d])
        labels = np.concatenate(labels_by_domain[d])
        domains.append(harness.DomainResult(
            domain_id=d, n=len(labels),
            instance_error=harness.instance_avg_error(preds, labels),
            category_error=harness.category_avg_error(preds, labels, model.net.kc)))
    return harness.EpisodeResult(
        domains=domains,
        instance_error_avg=float(np.mean([d.instance_error for d in domains])),
        category_error_avg=float(np.mean([d.category_error for d in domains])),
        config_fingerprint=config_fingerprint,
        seed=seed,
        prediction_log=prediction_log)
