"""Command-line pipelines: gen-data, pretrain, gen-stream, run, report.

Every command funnels its randomness through one seeded root generator
(--seed, falling back to the TRIBEKIT_SEED environment variable, then 0).
Flags override an optional key=value config file passed with --config.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, nn, streamgen, tta
from .errors import ConfigError, DivergenceError

GEN_DATA_DEFAULTS = dict(kc=5, dim=8, n=500, domains=4, severity=2.5,
                         separation=6.0)
PRETRAIN_DEFAULTS = dict(epochs=30, lr=1e-3, hidden="64,64", batch_size=64,
                         val_fraction=0.1, bn_momentum=0.1)
GEN_STREAM_DEFAULTS = dict(variant="gli-f", imbalance_factor=1.0, sigma=0.1,
                           batch=64, alpha_mode="exact-if")
RUN_DEFAULTS = dict(method="tribe", seeds=None, h0=None, lambda_anc=0.5,
                    gamma=0.0, eta=None, lr=1e-3, aug_noise=0.2, aug_scale=0.2,
                    aug_dropout=0.1, robust_momentum=0.05, jobs=1,
                    variant="gli-f", imbalance_factor=1.0, sigma=0.1)


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line is not key=value: {raw.strip()!r}")
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args, defaults: dict) -> None:
    """Fill unset flags from the config file, then builtin defaults."""
    cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for name, builtin in defaults.items():
        if getattr(args, name, None) is not None:
            continue
        if name in cfg:
            caster = type(builtin) if builtin is not None else str
            try:
                setattr(args, name, caster(cfg[name]))
            except ValueError as exc:
                raise ConfigError(f"bad config value for {name}: {exc}") from exc
        else:
            setattr(args, name, builtin)
    if getattr(args, "seed", None) is None:
        if "seed" in cfg:
            args.seed = int(cfg["seed"])
        else:
            args.seed = int(os.environ.get("TRIBEKIT_SEED", "0"))


def _require_path(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    _resolve(args, GEN_DATA_DEFAULTS)
    if args.domains < 1:
        raise ConfigError(f"--domains must be >= 1, got {args.domains}")
    specs = streamgen.default_domain_specs(args.domains, args.severity)
    ds = streamgen.synth_dataset(args.kc, args.dim, args.n, specs, args.seed,
                                 separation=args.separation)
    streamgen.save_dataset(ds, args.out, seed=args.seed, severity=args.severity)
    print(f"wrote dataset to {args.out}: Kc={ds.kc} C={ds.c} "
          f"clean={len(ds.clean_labels)} domains={len(ds.domains)}")
    return 0


def cmd_pretrain(args) -> int:
    _resolve(args, PRETRAIN_DEFAULTS)
    ds = streamgen.load_dataset(_require_path(args.data, "dataset directory"))
    hidden = tuple(int(h) for h in str(args.hidden).split(",") if h)
    model = nn.build_mlp(ds.c, hidden, ds.kc, args.seed,
                         bn_momentum=args.bn_momentum)
    acc = nn.pretrain(model, ds.clean_features, ds.clean_labels,
                      epochs=args.epochs, lr=args.lr, seed=args.seed,
                      batch_size=args.batch_size,
                      val_fraction=args.val_fraction)
    nn.save_checkpoint(model, args.out)
    print(f"wrote checkpoint to {args.out}; held-out accuracy {100 * acc:.2f}%")
    return 0


def cmd_gen_stream(args) -> int:
    _resolve(args, GEN_STREAM_DEFAULTS)
    ds = streamgen.load_dataset(_require_path(args.data, "dataset directory"))
    config = streamgen.ProtocolConfig(
        kc=ds.kc, kd=len(ds.domains), sigma=args.sigma,
        imbalance_factor=args.imbalance_factor, batch_size=args.batch,
        variant=args.variant, alpha_mode=args.alpha_mode, seed=args.seed)
    batches, _ = streamgen.generate_stream(config, ds.labels_by_domain)
    streamgen.write_order_file(batches, args.out)
    n = sum(len(b.ids) for b in batches)
    print(f"wrote {len(batches)} batches ({n} samples) to {args.out}")
    return 0


def cmd_run(args) -> int:
    _resolve(args, RUN_DEFAULTS)
    model = nn.load_checkpoint(_require_path(args.model, "model checkpoint"))
    ds = streamgen.load_dataset(_require_path(args.data, "dataset directory"))
    if ds.kc != model.net.kc:
        raise ConfigError(f"dataset has Kc={ds.kc} but checkpoint has "
                          f"Kc={model.net.kc}")
    batches = streamgen.read_order_file(_require_path(args.stream, "stream file"))
    for b in batches:
        if len(b.labels) and int(np.max(b.labels)) >= model.net.kc:
            raise ConfigError(f"stream labels exceed checkpoint Kc={model.net.kc}")
    hp = tta.TribeHyperParams(
        h0=args.h0, lambda_anc=args.lambda_anc, gamma=args.gamma, eta=args.eta,
        lr=args.lr, robust_momentum=args.robust_momentum,
        augment=tta.AugmentSpec(noise=args.aug_noise, scale=args.aug_scale,
                                dropout=args.aug_dropout))
    methods = [m.strip() for m in str(args.method).split(",") if m.strip()]
    for m in methods:
        if m not in tta.METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {tta.METHODS}")
    seeds = ([int(s) for s in str(args.seeds).split(",") if s.strip()]
             if args.seeds else [args.seed])
    fingerprint = harness.config_fingerprint({
        "variant": args.variant, "imbalance_factor": args.imbalance_factor,
        "sigma": args.sigma, "h0": args.h0, "lambda_anc": args.lambda_anc,
        "gamma": args.gamma, "eta": args.eta, "lr": args.lr,
        "stream": os.path.basename(args.stream)})

    def run_cell(_config, method, seed):
        result = tta.run_episode(method, batches, ds.features_by_domain, model,
                                 hp, seed, config_fingerprint=fingerprint)
        return harness.RunRecord(
            method=method, variant=args.variant,
            imbalance_factor=args.imbalance_factor, sigma=args.sigma,
            seed=seed, result=result)

    records, failures = harness.run_matrix(run_cell, [None], methods, seeds,
                                           jobs=args.jobs)
    harness.append_records(args.out, records)
    for r in records:
        print(f"{r.method} seed={r.seed}: "
              f"{r.result.instance_error_avg:.2f} / "
              f"{r.result.category_error_avg:.2f}")
    for f in failures:
        print(f"FAILED {f['method']} seed={f['seed']}: {f['error']}",
              file=sys.stderr)
    print(f"appended {len(records)} records to {args.out}")
    return 1 if failures else 0


def cmd_report(args) -> int:
    records, skipped = harness.read_records(
        _require_path(args.records, "records file"))
    if skipped:
        print(f"skipped {skipped} malformed line(s)")
    if not records:
        print("no records to report")
        return 0
    rows = harness.summarize(records)
    print(harness.format_summary_table(rows))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(harness.summary_csv(rows))
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tribekit",
        description="test-time adaptation toolkit: data, streams, episodes, reports")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (default: $TRIBEKIT_SEED or 0)")
        p.add_argument("--config", default=None,
                       help="key=value config file; flags win on conflict")

    p = sub.add_parser("gen-data", help="generate a synthetic corruption dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--kc", type=int, default=None, help="number of classes")
    p.add_argument("--dim", type=int, default=None, help="feature dimension")
    p.add_argument("--n", type=int, default=None, help="samples per class")
    p.add_argument("--domains", type=int, default=None,
                   help="number of corruption domains")
    p.add_argument("--severity", type=float, default=None)
    p.add_argument("--separation", type=float, default=None,
                   help="pairwise class-mean distance")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the source model on the clean split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", default=None, help="comma-separated hidden widths")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--bn-momentum", dest="bn_momentum", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-stream", help="generate a test stream order file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output order file (JSON lines)")
    p.add_argument("--variant", choices=streamgen.VARIANTS, default=None)
    p.add_argument("--if", dest="imbalance_factor", type=float, default=None,
                   help="global imbalance factor")
    p.add_argument("--sigma", type=float, default=None,
                   help="local imbalance scale")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--alpha-mode", dest="alpha_mode",
                   choices=streamgen.ALPHA_MODES, default=None)
    common(p)
    p.set_defaults(func=cmd_gen_stream)

    p = sub.add_parser("run", help="run adaptation episodes over a stream")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--stream", required=True, help="order file")
    p.add_argument("--out", required=True, help="records file (appended)")
    p.add_argument("--method", default=None,
                   help="comma-separated subset of: " + ",".join(tta.METHODS))
    p.add_argument("--seeds", default=None,
                   help="comma-separated episode seeds (default: --seed)")
    p.add_argument("--h0", type=float, default=None, help="entropy gate fraction")
    p.add_argument("--lambda-anc", dest="lambda_anc", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--aug-noise", dest="aug_noise", type=float, default=None)
    p.add_argument("--aug-scale", dest="aug_scale", type=float, default=None)
    p.add_argument("--aug-dropout", dest="aug_dropout", type=float, default=None)
    p.add_argument("--robust-momentum", dest="robust_momentum", type=float,
                   default=None)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel (method x seed) cells")
    p.add_argument("--variant", default=None,
                   help="protocol label recorded with results")
    p.add_argument("--if", dest="imbalance_factor", type=float, default=None,
                   help="imbalance factor label recorded with results")
    p.add_argument("--sigma", type=float, default=None,
                   help="sigma label recorded with results")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--csv", default=None, help="also write the summary as CSV")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
