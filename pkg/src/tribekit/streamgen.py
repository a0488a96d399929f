"""Test stream generation under the GLI protocols.

A stream is built per domain from a long-tailed pool of sample ids: a
Dirichlet draw fixes the class proportions of each mini-batch, labels are
drawn categorically against the remaining pool, and sample ids are
consumed without replacement until the domain is exhausted. Variants:

- gli-f: fixed global class distribution across domains
- gli-v: class indices re-permuted at every domain transition
- ptta: the imbalance-factor-1 special case of gli-f
- iid: uniform shuffle of the pool, no Dirichlet stage

Also houses the synthetic Gaussian-cluster dataset with parametric
corruption domains, its on-disk format, and order-file persistence.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import child_rng

VARIANTS = ("gli-f", "gli-v", "ptta", "iid")
ALPHA_MODES = ("exact-if", "paper-literal")
CORRUPTION_KINDS = ("shift", "scale", "noise", "rotation")


@dataclass
class ProtocolConfig:
    kc: int
    kd: int
    sigma: float = 0.1
    imbalance_factor: float = 1.0
    batch_size: int = 64
    variant: str = "gli-f"
    alpha_mode: str = "exact-if"
    seed: int = 0

    def __post_init__(self):
        if self.kc < 2:
            raise ConfigError(f"kc must be >= 2, got {self.kc}")
        if self.kd < 1:
            raise ConfigError(f"kd must be >= 1, got {self.kd}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.imbalance_factor < 1:
            raise ConfigError(
                f"imbalance factor must be >= 1, got {self.imbalance_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(
                f"alpha mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}")

    @property
    def effective_if(self) -> float:
        # ptta is by definition the balanced-global case
        return 1.0 if self.variant == "ptta" else self.imbalance_factor


@dataclass
class StreamBatch:
    t: int
    domain_id: int
    ids: np.ndarray
    labels: np.ndarray


class PoolExhausted(Exception):
    """Raised when labels are requested from an empty pool."""


def make_alpha(kc: int, sigma: float, imbalance_factor: float,
               mode: str = "exact-if") -> np.ndarray:
    """Dirichlet proportion parameter with exponentially decaying entries.

    exact-if uses exponent k/(kc-1) over k=0..kc-1 so alpha_max/alpha_min
    equals the imbalance factor exactly; paper-literal uses k/kc over
    k=1..kc.
    """
    if mode == "exact-if":
        k = np.arange(kc, dtype=np.float64)
        alpha = sigma * (1.0 / imbalance_factor) ** (k / (kc - 1))
    elif mode == "paper-literal":
        k = np.arange(1, kc + 1, dtype=np.float64)
        alpha = sigma * (1.0 / imbalance_factor) ** (k / kc)
    else:
        raise ConfigError(f"unknown alpha mode {mode!r}")
    return alpha


def sample_dirichlet(alpha: np.ndarray, rng) -> np.ndarray:
    """Dirichlet draw via normalized Gamma variates.

    Entries whose Gamma draw underflows to zero (possible for very small
    alpha) are resampled until nonzero.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a <= 0):
        raise ConfigError("alpha entries must be strictly positive")
    g = rng.gamma(a)
    for _ in range(100_000):
        zero = g == 0.0
        if not zero.any():
            break
        g[zero] = rng.gamma(a[zero])
    else:
        raise ConfigError("Gamma sampling kept underflowing; alpha too small")
    return g / g.sum()


def sample_batch_labels(q: np.ndarray, batch_size: int, rng,
                        remaining: np.ndarray) -> np.ndarray:
    """Draw labels categorically against the remaining per-class counts.

    Classes with an empty remaining pool get probability zero (the rest
    renormalized); `remaining` is decremented in place. Returns at most
    `batch_size` labels, fewer when the pool runs dry.
    """
    total = int(remaining.sum())
    if total == 0:
        raise PoolExhausted
    n = min(batch_size, total)
    avail = remaining > 0
    if remaining[avail].min() >= n:
        # no class can run out mid-batch: one vectorized draw
        p = np.where(avail, q, 0.0)
        p /= p.sum()
        labels = rng.choice(len(q), size=n, p=p)
        np.subtract.at(remaining, labels, 1)
        return labels
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        p = np.where(remaining > 0, q, 0.0)
        p /= p.sum()
        k = rng.choice(len(q), p=p)
        labels[i] = k
        remaining[k] -= 1
    return labels


def imbalance_counts(n_max: int, kc: int, imbalance_factor: float) -> np.ndarray:
    """Long-tailed per-class counts N_k with N_0 = n_max, N_{kc-1} ~ n_max/IF."""
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    k = np.arange(kc, dtype=np.float64)
    raw = n_max * (1.0 / imbalance_factor) ** (k / (kc - 1))
    counts = np.maximum(1, np.rint(raw).astype(np.int64))
    counts[-1] = max(1, math.ceil(n_max / imbalance_factor))
    return counts


def build_domain_pool(labels: np.ndarray, counts: np.ndarray, rng):
    """Subsample ids per class to the requested counts, pre-shuffled.

    Returns a list of Kc id arrays; popping from the back of each array
    draws uniformly without replacement.
    """
    labels = np.asarray(labels)
    deficient = []
    pools = []
    for k, want in enumerate(counts):
        ids = np.flatnonzero(labels == k)
        if len(ids) < want:
            deficient.append((k, len(ids), int(want)))
            pools.append(None)
        else:
            pools.append(rng.choice(ids, size=int(want), replace=False))
    if deficient:
        detail = ", ".join(f"class {k}: have {h}, need {w}" for k, h, w in deficient)
        raise ConfigError(f"insufficient samples for the requested pool ({detail})")
    return pools


def build_global_pool(labels_by_domain, imbalance_factor: float, kc: int, rng):
    """Per-domain pools with shared long-tail counts anchored at class 0."""
    pools = []
    counts = None
    for labels in labels_by_domain:
        labels = np.asarray(labels)
        if counts is None:
            n_max = int((labels == 0).sum())
            counts = imbalance_counts(n_max, kc, imbalance_factor)
        pools.append(build_domain_pool(labels, counts, rng))
    return pools, counts


def domain_schedule(kd: int, rng) -> np.ndarray:
    """Random visiting order; each domain streamed to exhaustion once."""
    return rng.permutation(kd)


def permute_class_axis(values: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Relabel the class axis so new class k plays the role of old perm[k]."""
    return np.asarray(values)[np.asarray(perm)]


def generate_stream(config: ProtocolConfig, labels_by_domain):
    """Full stream of batches over all domains for this protocol config.

    Deterministic given (config, seed); every pooled sample id of every
    domain appears exactly once. Returns (batches, counts_by_domain).
    """
    if len(labels_by_domain) != config.kd:
        raise ConfigError(
            f"config says kd={config.kd} but got {len(labels_by_domain)} domains")
    kc = config.kc
    rng_pool = child_rng(config.seed, "pool")
    rng_sched = child_rng(config.seed, "schedule")
    rng_draw = child_rng(config.seed, "draw")
    rng_perm = child_rng(config.seed, "class-perm")

    n_max = int((np.asarray(labels_by_domain[0]) == 0).sum())
    base_counts = imbalance_counts(n_max, kc, config.effective_if)
    base_alpha = make_alpha(kc, config.sigma, config.effective_if, config.alpha_mode)
    schedule = domain_schedule(config.kd, rng_sched)

    batches = []
    counts_by_domain = {}
    t = 0
    for position, domain in enumerate(schedule):
        domain = int(domain)
        labels = np.asarray(labels_by_domain[domain])
        if config.variant == "gli-v" and position > 0:
            perm = rng_perm.permutation(kc)
        else:
            perm = np.arange(kc)
        counts = permute_class_axis(base_counts, perm)
        alpha = permute_class_axis(base_alpha, perm)
        pools = build_domain_pool(labels, counts, rng_pool)
        counts_by_domain[domain] = counts
        cursors = [len(p) for p in pools]

        if config.variant == "iid":
            all_ids = np.concatenate(pools)
            rng_draw.shuffle(all_ids)
            for start in range(0, len(all_ids), config.batch_size):
                ids = all_ids[start:start + config.batch_size]
                batches.append(StreamBatch(t=t, domain_id=domain, ids=ids,
                                           labels=labels[ids]))
                t += 1
            continue

        remaining = counts.astype(np.int64).copy()
        while remaining.sum() > 0:
            q = sample_dirichlet(alpha, rng_draw)
            drawn = sample_batch_labels(q, config.batch_size, rng_draw, remaining)
            ids = np.empty(len(drawn), dtype=np.int64)
            for i, k in enumerate(drawn):
                cursors[k] -= 1
                ids[i] = pools[k][cursors[k]]
            batches.append(StreamBatch(t=t, domain_id=domain, ids=ids,
                                       labels=labels[ids]))
            t += 1
    return batches, counts_by_domain


def write_order_file(batches, path) -> None:
    """JSON Lines, one batch per line: {"t", "domain", "ids", "labels"}."""
    with open(path, "w") as fh:
        for b in batches:
            rec = {"t": b.t, "domain": b.domain_id,
                   "ids": [int(i) for i in b.ids],
                   "labels": [int(l) for l in b.labels]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_order_file(path):
    batches = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            batches.append(StreamBatch(
                t=rec["t"], domain_id=rec["domain"],
                ids=np.asarray(rec["ids"], dtype=np.int64),
                labels=np.asarray(rec["labels"], dtype=np.int64)))
    return batches


# --- synthetic dataset ---------------------------------------------------

@dataclass
class DomainSpec:
    name: str
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if self.severity < 0:
            raise ConfigError("severity must be >= 0")


@dataclass
class DomainData:
    spec: DomainSpec
    features: np.ndarray
    labels: np.ndarray


@dataclass
class SyntheticDataset:
    kc: int
    c: int
    n_per_class: int
    clean_features: np.ndarray
    clean_labels: np.ndarray
    domains: list = field(default_factory=list)

    @property
    def labels_by_domain(self):
        return [d.labels for d in self.domains]

    @property
    def features_by_domain(self):
        return {i: d.features for i, d in enumerate(self.domains)}


def default_domain_specs(n_domains: int, severity: float):
    specs = []
    for i in range(n_domains):
        kind = CORRUPTION_KINDS[i % len(CORRUPTION_KINDS)]
        name = kind if i < len(CORRUPTION_KINDS) else f"{kind}{i // len(CORRUPTION_KINDS) + 1}"
        specs.append(DomainSpec(name=name, kind=kind, severity=severity))
    return specs


def _class_means(kc: int, c: int, separation: float, rng) -> np.ndarray:
    """Cluster centers with pairwise distance ~ separation."""
    if kc <= c:
        q, _ = np.linalg.qr(rng.standard_normal((c, kc)))
        return (separation / np.sqrt(2.0)) * q.T
    # more classes than dimensions: random directions, distances vary
    dirs = rng.standard_normal((kc, c))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def apply_corruption(features: np.ndarray, kind: str, severity: float, rng) -> np.ndarray:
    """Parametric domain shift; severity 0 returns the input bit-identical.

    The transform's random direction/plane/factors come from `rng`, drawn
    once per call, so a domain's corruption is fixed by its seed.
    """
    x = np.asarray(features, dtype=np.float64)
    if severity == 0.0:
        return x.copy()
    c = x.shape[1]
    if kind == "noise":
        # severity is the exact noise standard deviation
        return x + severity * rng.standard_normal(x.shape)
    if kind == "shift":
        u = rng.standard_normal(c)
        u /= np.linalg.norm(u)
        return x + 2.0 * severity * u
    if kind == "scale":
        factors = np.exp(0.5 * severity * rng.standard_normal(c))
        return x * factors
    if kind == "rotation":
        basis, _ = np.linalg.qr(rng.standard_normal((c, 2)))
        u, v = basis[:, 0], basis[:, 1]
        theta = min(0.5 * severity, np.pi)
        p = x @ u
        q = x @ v
        return (x + np.outer(p * (np.cos(theta) - 1) - q * np.sin(theta), u)
                + np.outer(p * np.sin(theta) + q * (np.cos(theta) - 1), v))
    raise ConfigError(f"unknown corruption kind {kind!r}")


def synth_dataset(kc: int, c: int, n_per_class: int, domain_specs, seed: int,
                  separation: float = 6.0) -> SyntheticDataset:
    """Gaussian class clusters plus corrupted copies per domain spec."""
    if kc < 2 or c < 2:
        raise ConfigError("need kc >= 2 and c >= 2")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = child_rng(seed, "clean")
    means = _class_means(kc, c, separation, rng)
    labels = np.repeat(np.arange(kc), n_per_class)
    features = means[labels] + rng.standard_normal((len(labels), c))
    ds = SyntheticDataset(kc=kc, c=c, n_per_class=n_per_class,
                          clean_features=features, clean_labels=labels)
    for i, spec in enumerate(domain_specs):
        drng = child_rng(seed, "corrupt", i)
        corrupted = apply_corruption(features, spec.kind, spec.severity, drng)
        ds.domains.append(DomainData(spec=spec, features=corrupted,
                                     labels=labels.copy()))
    return ds


# --- on-disk format ------------------------------------------------------
# manifest.json + raw little-endian blobs: float32 features, int32 labels.

def _write_blob(dirpath, name, features, labels):
    fpath, lpath = f"{name}.features.bin", f"{name}.labels.bin"
    with open(os.path.join(dirpath, fpath), "wb") as fh:
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
    with open(os.path.join(dirpath, lpath), "wb") as fh:
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    return {"features": fpath, "labels": lpath, "n": int(len(labels))}


def _read_blob(dirpath, entry, c):
    with open(os.path.join(dirpath, entry["features"]), "rb") as fh:
        feats = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    with open(os.path.join(dirpath, entry["labels"]), "rb") as fh:
        labels = np.frombuffer(fh.read(), dtype="<i4").astype(np.int64)
    feats = feats.reshape(entry["n"], c)
    if len(labels) != entry["n"]:
        raise ConfigError(f"label blob length {len(labels)} != declared n {entry['n']}")
    return feats, labels


def save_dataset(ds: SyntheticDataset, dirpath, seed=None, severity=None) -> None:
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "Kc": ds.kc,
        "C": ds.c,
        "n_per_class": ds.n_per_class,
        "severity": severity,
        "seed": seed,
        "clean": _write_blob(dirpath, "clean", ds.clean_features, ds.clean_labels),
        "domains": [],
    }
    for i, dom in enumerate(ds.domains):
        entry = _write_blob(dirpath, f"domain{i}", dom.features, dom.labels)
        entry.update(name=dom.spec.name, kind=dom.spec.kind,
                     severity=dom.spec.severity)
        manifest["domains"].append(entry)
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(dirpath) -> SyntheticDataset:
    mpath = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(mpath):
        raise ConfigError(f"no manifest.json under {dirpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    kc, c = manifest["Kc"], manifest["C"]
    feats, labels = _read_blob(dirpath, manifest["clean"], c)
    ds = SyntheticDataset(kc=kc, c=c, n_per_class=manifest.get("n_per_class", 0),
                          clean_features=feats, clean_labels=labels)
    for entry in manifest["domains"]:
        dfeats, dlabels = _read_blob(dirpath, entry, c)
        spec = DomainSpec(name=entry["name"], kind=entry["kind"],
                          severity=entry["severity"])
        ds.domains.append(DomainData(spec=spec, features=dfeats, labels=dlabels))
    return ds


def load_csv(path):
    """External data as CSV with header f0..f{C-1},label."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[-1] != "label" or not all(
                h == f"f{i}" for i, h in enumerate(header[:-1])):
            raise ConfigError(
                "CSV header must be f0..f{C-1},label, got " + ",".join(header))
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.asarray(rows, dtype=np.float64)
    if data.shape[1] != len(header):
        raise ConfigError("CSV row width does not match header")
    return data[:, :-1], data[:, -1].astype(np.int64)
