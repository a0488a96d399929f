"""Metrics, statistical checks, experiment orchestration, persistence."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as scipy_stats

from .errors import ConfigError


def instance_avg_error(predictions, labels) -> float:
    """Micro-averaged classification error, in percent."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) != len(y):
        raise ConfigError("predictions and labels differ in length")
    if len(p) == 0:
        raise ConfigError("cannot score an empty prediction set")
    return 100.0 * float((p != y).mean())


def category_avg_error(predictions, labels, kc: int) -> float:
    """Macro-averaged error over classes present in `labels`, in percent."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) != len(y):
        raise ConfigError("predictions and labels differ in length")
    if len(p) == 0:
        raise ConfigError("cannot score an empty prediction set")
    rates = []
    for k in range(kc):
        sel = y == k
        if sel.any():
            rates.append((p[sel] != k).mean())
    return 100.0 * float(np.mean(rates))


@dataclass
class ChiSquareResult:
    statistic: float
    df: int
    critical_value: float
    passed: bool
    note: str = ""


def chi_square_uniformity(observed, expected_proportions,
                          alpha: float = 0.01) -> ChiSquareResult:
    """Pearson goodness-of-fit against expected proportions.

    Passes when the statistic stays below the (1 - alpha) critical value,
    i.e. p > alpha. A nonzero count in a zero-probability cell fails
    outright.
    """
    obs = np.asarray(observed, dtype=np.float64)
    props = np.asarray(expected_proportions, dtype=np.float64)
    if obs.shape != props.shape:
        raise ConfigError("observed and expected shapes differ")
    if abs(props.sum() - 1.0) > 1e-9:
        raise ConfigError(f"expected proportions sum to {props.sum()}, not 1")
    total = obs.sum()
    if total < 50:
        raise ConfigError(f"need at least 50 observations, got {total}")
    df = len(obs) - 1
    critical = float(scipy_stats.chi2.ppf(1.0 - alpha, df))
    zero_cells = (props == 0) & (obs > 0)
    if zero_cells.any():
        bad = np.flatnonzero(zero_cells).tolist()
        return ChiSquareResult(
            statistic=float("inf"), df=df, critical_value=critical, passed=False,
            note=f"nonzero observations in zero-probability cells {bad}")
    expected = total * props
    live = props > 0
    statistic = float((((obs - expected) ** 2)[live] / expected[live]).sum())
    return ChiSquareResult(statistic=statistic, df=df, critical_value=critical,
                           passed=statistic <= critical)


@dataclass
class DomainResult:
    domain_id: int
    n: int
    instance_error: float
    category_error: float


@dataclass
class EpisodeResult:
    domains: list
    instance_error_avg: float
    category_error_avg: float
    config_fingerprint: str = ""
    seed: int = 0
    prediction_log: list | None = None

    def to_dict(self) -> dict:
        d = {
            "domains": [
                {"domain": dr.domain_id, "n": dr.n,
                 "instance_error": dr.instance_error,
                 "category_error": dr.category_error}
                for dr in self.domains
            ],
            "instance_error_avg": self.instance_error_avg,
            "category_error_avg": self.category_error_avg,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
        }
        if self.prediction_log is not None:
            d["prediction_log"] = self.prediction_log
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeResult":
        return cls(
            domains=[DomainResult(domain_id=e["domain"], n=e["n"],
                                  instance_error=e["instance_error"],
                                  category_error=e["category_error"])
                     for e in d["domains"]],
            instance_error_avg=d["instance_error_avg"],
            category_error_avg=d["category_error_avg"],
            config_fingerprint=d.get("config_fingerprint", ""),
            seed=d.get("seed", 0),
            prediction_log=d.get("prediction_log"))


@dataclass
class RunRecord:
    method: str
    variant: str
    imbalance_factor: float
    sigma: float
    seed: int
    result: EpisodeResult
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "variant": self.variant,
            "imbalance_factor": self.imbalance_factor,
            "sigma": self.sigma,
            "seed": self.seed,
            "result": self.result.to_dict(),
            "wall_time_s": self.wall_time_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(method=d["method"], variant=d["variant"],
                   imbalance_factor=d["imbalance_factor"], sigma=d["sigma"],
                   seed=d["seed"], result=EpisodeResult.from_dict(d["result"]),
                   wall_time_s=d.get("wall_time_s", 0.0))


def config_fingerprint(config: dict) -> str:
    """Stable digest of a configuration mapping."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def append_records(path, records) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True,
                                separators=(",", ":")) + "\n")


def read_records(path):
    """Parse a records file; malformed lines are skipped and counted."""
    records, skipped = [], 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError):
                skipped += 1
    return records, skipped


def run_matrix(run_cell, configs, methods, seeds, jobs: int = 1):
    """Execute every (config, method, seed) cell.

    `run_cell(config, method, seed) -> RunRecord`. Failures are recorded
    and do not stop the remaining cells. Returns (records, failures);
    records keep the cell enumeration order regardless of `jobs`.
    """
    cells = [(ci, config, method, seed)
             for ci, config in enumerate(configs)
             for method in methods
             for seed in seeds]
    results: dict[int, RunRecord] = {}
    failures = []
    lock = threading.Lock()

    def _run(idx, config, method, seed):
        t0 = time.perf_counter()
        try:
            rec = run_cell(config, method, seed)
            rec.wall_time_s = time.perf_counter() - t0
            with lock:
                results[idx] = rec
        except Exception as exc:
            with lock:
                failures.append({"config_index": cells[idx][0], "method": method,
                                 "seed": seed, "error": f"{type(exc).__name__}: {exc}"})

    if jobs <= 1:
        for i, (ci, config, method, seed) in enumerate(cells):
            _run(i, config, method, seed)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run, i, config, method, seed)
                    for i, (ci, config, method, seed) in enumerate(cells)]
            for f in futs:
                f.result()
    records = [results[i] for i in sorted(results)]
    return records, failures


@dataclass
class SummaryRow:
    method: str
    variant: str
    imbalance_factor: float
    n_seeds: int
    instance_error_mean: float
    category_error_mean: float


def summarize(records) -> list:
    """Mean inst/cat errors over seeds, grouped by (method, IF, variant)."""
    groups: dict[tuple, list] = {}
    order = []
    for r in records:
        key = (r.method, r.imbalance_factor, r.variant)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    rows = []
    for key in order:
        rs = groups[key]
        rows.append(SummaryRow(
            method=key[0], variant=key[2], imbalance_factor=key[1],
            n_seeds=len(rs),
            instance_error_mean=float(np.mean(
                [r.result.instance_error_avg for r in rs])),
            category_error_mean=float(np.mean(
                [r.result.category_error_avg for r in rs]))))
    return rows


def format_summary_table(rows) -> str:
    header = ["method", "variant", "I.F.", "seeds", "inst / cat (%)"]
    body = [[r.method, r.variant, f"{r.imbalance_factor:g}", str(r.n_seeds),
             f"{r.instance_error_mean:.2f} / {r.category_error_mean:.2f}"]
            for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)))
    return "\n".join(lines)


def summary_csv(rows) -> str:
    lines = ["method,variant,imbalance_factor,n_seeds,instance_error,category_error"]
    for r in rows:
        lines.append(f"{r.method},{r.variant},{r.imbalance_factor:g},{r.n_seeds},"
                     f"{r.instance_error_mean:.2f},{r.category_error_mean:.2f}")
    return "\n".join(lines) + "\n"
