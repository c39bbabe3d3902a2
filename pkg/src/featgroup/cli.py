"""Command line entry point: ``featgroup <command> [options]``.

Exit status is 0 on success, 2 for bad configuration or input, and 3 when
training diverges.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from featgroup import harness
from featgroup.analysis import delta_second_moment, estimate_omega, penalty, write_matrix_csv
from featgroup.bank import ProjectionBank, build_bank, load_bank, save_bank
from featgroup.data import NoiseSpec, add_noise, load_dataset, save_dataset
from featgroup.glm import DivergenceError, GlmModel, TrainConfig, evaluate, load_model, save_model, train
from featgroup.grouping import grid_adjacency, load_partition, rena_cluster, save_partition
from featgroup.harness import ConfigError
from featgroup.numkit import make_rng

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
MATRIX_DUMP_LIMIT = 64


def _overrides(args):
    pairs = []
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _config(args, extra=()):
    pairs = _overrides(args) + list(extra)
    if args.config:
        return harness.load_config(args.config, pairs)
    return harness.parse_config("", pairs)


def _load(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from None


def cmd_synth(args):
    ds = harness.synth_dataset(args.classes, args.per_class, harness.parse_dims(args.dims), args.seed)
    if args.sigma > 0:
        ds = add_noise(ds, NoiseSpec(args.sigma, args.seed))
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} samples, p={ds.p}, l={ds.l} to {args.out}")


def cmd_cluster(args):
    ds = _load(args.data)
    k = harness.resolve_k(args.k, ds.p)
    X = ds.X
    if args.r:
        rows = np.sort(make_rng(args.seed).choice(ds.n, size=args.r, replace=False))
        X = X[rows]
    part = rena_cluster(X, grid_adjacency(ds.geometry), k)
    save_partition(part, args.out)
    print(f"wrote partition of p={part.p} into k={part.k} clusters to {args.out}")


def cmd_bank(args):
    ds = _load(args.data)
    k = harness.resolve_k(args.k, ds.p)
    bank = build_bank(ds.X, grid_adjacency(ds.geometry), k, args.r, args.b, args.seed, n_jobs=args.n_jobs)
    save_bank(bank, args.out)
    print(f"wrote bank of b={bank.b} matrices (k={k}, r={args.r}) to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    if cfg.data == "synth" and args.data is None:
        base = harness.base_dataset(cfg)
    else:
        base = _load(args.data or cfg.data)
    tr, te = harness.prepare_data(base, cfg.sigmas[0], args.seed, cfg.test_fraction)
    reg = args.regularizer or cfg.regularizers[0]
    bank = None
    if reg.startswith("grouping"):
        if cfg.bank:
            bank = load_bank(cfg.bank)
        else:
            k = harness.resolve_k(cfg.ks[0], tr.p)
            bank = build_bank(tr.X, grid_adjacency(tr.geometry), k, cfg.rs[0], cfg.bs[0], args.seed, cfg.n_jobs)
    tcfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        optimizer=cfg.optimizer,
        regularizer=reg,
        lam=args.lam if args.lam is not None else cfg.lambdas[0],
        delta=args.delta if args.delta is not None else cfg.deltas[0],
        bank=bank,
        policy=cfg.policy,
        seed=args.seed,
    )
    model, metrics = train(GlmModel.zeros(tr.l, tr.p), tr.X, tr.y, tcfg, te.X, te.y)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.fgw")
    metrics.to_csv(out / "metrics.csv")
    print(f"final test accuracy {metrics.test_acc[-1]:.4f} after {len(metrics.test_acc)} epochs")


def cmd_eval(args):
    model = load_model(args.model)
    ds = _load(args.data)
    if args.test_fraction:
        _, ds = harness.prepare_data(ds, args.sigma, args.seed, args.test_fraction)
    print(f"accuracy {evaluate(model, ds.X, ds.y):.6f} on {ds.n} samples")


def _read_vector(text_or_path):
    path = Path(text_or_path)
    if path.is_file():
        return np.loadtxt(path, delimiter=",", ndmin=1)
    return np.array([float(v) for v in text_or_path.split(",")])


def cmd_analyze(args):
    if args.bank:
        bank = load_bank(args.bank)
    elif args.partitions:
        bank = ProjectionBank.from_partitions([load_partition(p) for p in args.partitions])
    else:
        raise ConfigError("analyze needs --bank or --partitions")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if bank.p <= MATRIX_DUMP_LIMIT:
        omega = estimate_omega(bank)
        write_matrix_csv(omega.omega, out / "omega.csv")
        write_matrix_csv(delta_second_moment(bank, omega), out / "delta.csv")
    if args.data:
        ds = _load(args.data)
        beta = _read_vector(args.beta) if args.beta else np.zeros(ds.p)
        report = penalty(beta, ds.X, ds.y, bank, args.family)
        report.to_json(out / "report.json")
        print(f"smoothed loss {report.smoothed_loss:.6g}, penalty {report.penalty:.6g}, objective {report.objective:.6g}")
    print(f"wrote analysis for p={bank.p}, b={bank.b} to {out}")


def cmd_sweep(args):
    cfg = _config(args, [("seeds", args.seed)])
    if args.out:
        cfg = cfg.with_overrides([("out", args.out)])
    rows = harness.run_sweep(cfg, progress=lambda s, seed: print(f"done sigma={s} seed={seed}", flush=True))
    out = Path(cfg.out)
    harness.write_results(rows, out / "results.csv")
    harness.write_curves(rows, out / "curves.csv")
    summary = harness.summarize(rows)
    harness.write_summary(summary, out / "summary.csv")
    for (reg, sigma), best in sorted(harness.best_per_regularizer(summary).items()):
        print(f"sigma={sigma} {reg:12s} best {best['mean_test_acc']:.4f} +/- {best['sem_test_acc']:.4f} ({best['params']})")


def cmd_bench(args):
    rows = harness.bench(
        ps=[int(p) for p in args.p.split(",")],
        ratio=args.ratio,
        r=args.r,
        b=args.b,
        batch_size=args.batch_size,
        n_classes=args.classes,
        repeats=args.repeats,
        seed=args.seed,
    )
    harness.write_bench(rows, args.out)
    for row in rows:
        print(",".join(str(v) for v in row))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featgroup", description="Stochastic regularization by random feature grouping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic image dataset")
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--dims", default="64x64")
    p.add_argument("--sigma", type=float, default=0.0, help="additive Gaussian noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".csv for text, anything else for binary")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="cluster features of a dataset into k groups")
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="20%", help="count or percentage of p")
    p.add_argument("--r", type=int, default=0, help="subsample this many rows (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("bank", help="build a bank of grouping matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="20%")
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--b", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data", help="dataset file (default: the config's data key)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--regularizer", choices=["none", "l2", "dropout", "grouping", "grouping+l2"])
    p.add_argument("--lam", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.0, help="evaluate only the test split")
    p.add_argument("--seed", type=int, default=0, help="seed the model was trained with")
    p.add_argument("--sigma", type=float, default=0.0, help="noise level the model was trained with")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="smoothing operator, variance moments and penalty report")
    p.add_argument("--bank")
    p.add_argument("--partitions", nargs="+")
    p.add_argument("--data")
    p.add_argument("--beta", help="comma-separated weights or a file of them")
    p.add_argument("--family", default="logistic", choices=["logistic", "gaussian"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="run a regularizer grid over seeds and noise levels")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", required=True, help="comma-separated seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time clustering and one training epoch as p grows")
    p.add_argument("--p", default="1024,2048,4096")
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
