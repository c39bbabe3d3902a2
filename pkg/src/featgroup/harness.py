"""Experiment orchestration: config files, regularizer sweeps, aggregation, benchmarks.

Config files are flat ``key = value`` text; ``#`` starts a comment and list
values are comma separated. See ``CONFIG_KEYS`` for the accepted keys.
"""

from __future__ import annotations

import csv
import itertools
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from featgroup.bank import BankPolicy, build_bank
from featgroup.data import Dataset, NoiseSpec, add_noise, load_dataset, split, standardize, synth_faces
from featgroup.glm import GlmModel, Metrics, TrainConfig, train
from featgroup.grouping import default_k, grid_adjacency, rena_cluster
from featgroup.numkit import derive_rng

__all__ = [
    "ConfigError",
    "CONFIG_KEYS",
    "ExperimentConfig",
    "Cell",
    "ResultRow",
    "parse_config",
    "load_config",
    "resolve_k",
    "parse_dims",
    "synth_dataset",
    "base_dataset",
    "prepare_data",
    "expand_cells",
    "run_sweep",
    "summarize",
    "best_per_regularizer",
    "write_results",
    "write_curves",
    "write_summary",
    "bench",
    "write_bench",
    "RESULT_HEADER",
]

RESULT_HEADER = ["regularizer", "params", "sigma", "seed", "epoch", "train_loss", "test_acc", "seconds"]
SUMMARY_HEADER = ["regularizer", "params", "sigma", "n_seeds", "mean_test_acc", "sem_test_acc", "mean_seconds"]
BENCH_HEADER = ["p", "k", "phase", "seconds"]

_SPLIT_STREAM = 3


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def _floats(text):
    return tuple(float(v) for v in _items(text))


def _ints(text):
    return tuple(int(v) for v in _items(text))


def _items(text):
    out = tuple(v.strip() for v in text.split(",") if v.strip())
    if not out:
        raise ValueError("empty list")
    return out


def parse_dims(text):
    return tuple(int(v) for v in text.lower().split("x"))


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _k_specs(text):
    specs = _items(text)
    for s in specs:
        resolve_k(s, 100)
    return specs


# key -> (field name, parser)
CONFIG_KEYS = {
    "data": ("data", str),
    "synth.classes": ("synth_classes", int),
    "synth.per_class": ("synth_per_class", int),
    "synth.dims": ("synth_dims", parse_dims),
    "synth.seed": ("synth_seed", int),
    "standardize": ("standardize", _bool),
    "sigma": ("sigmas", _floats),
    "test_fraction": ("test_fraction", float),
    "regularizers": ("regularizers", _items),
    "lambda": ("lambdas", _floats),
    "delta": ("deltas", _floats),
    "k": ("ks", _k_specs),
    "r": ("rs", _ints),
    "b": ("bs", _ints),
    "policy": ("policy", str),
    "bank": ("bank", str),
    "optimizer": ("optimizer", str),
    "lr": ("lr", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "seeds": ("seeds", _ints),
    "out": ("out", str),
    "n_jobs": ("n_jobs", int),
}

_REGULARIZERS = ("none", "l2", "dropout", "grouping", "grouping+l2")


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = "synth"
    synth_classes: int = 40
    synth_per_class: int = 10
    synth_dims: tuple = (64, 64)
    synth_seed: int = 0
    standardize: bool = False
    sigmas: tuple = (0.0,)
    test_fraction: float = 0.33
    regularizers: tuple = ("none", "l2", "dropout", "grouping")
    lambdas: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
    deltas: tuple = (0.05, 0.1, 0.2, 0.3)
    ks: tuple = ("20%",)
    rs: tuple = (20,)
    bs: tuple = (1000,)
    policy: str = "per-minibatch"
    bank: str = ""
    optimizer: str = "adam"
    lr: float = 1e-4
    epochs: int = 300
    batch_size: int = 32
    seeds: tuple = ()
    out: str = "results"
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("sigmas", "regularizers", "lambdas", "deltas", "ks", "rs", "bs"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be unique, got {list(self.seeds)}")
        bad = [r for r in self.regularizers if r not in _REGULARIZERS]
        if bad:
            raise ConfigError(f"unknown regularizers {bad}; expected a subset of {list(_REGULARIZERS)}")
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("noise sigma must be >= 0")
        try:
            BankPolicy(self.policy)
        except ValueError:
            raise ConfigError(f"policy must be one of {[p.value for p in BankPolicy]}") from None
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def with_overrides(self, pairs) -> "ExperimentConfig":
        return replace(self, **_parse_pairs(pairs))


def _parse_pairs(pairs) -> dict:
    values = {}
    for key, raw in pairs:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, parser = CONFIG_KEYS[key]
        try:
            values[name] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
    return values


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    """Parse config text; ``overrides`` is a list of ``(key, value)`` applied last."""
    pairs = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((key, value))
    values = _parse_pairs(pairs)
    values.update(_parse_pairs(overrides))
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def resolve_k(spec, p: int) -> int:
    """``"819"`` is an absolute count; ``"20%"`` is a fraction of ``p``."""
    s = str(spec).strip()
    if s.endswith("%"):
        frac = float(s[:-1]) / 100.0
        if not 0 < frac <= 1:
            raise ValueError(f"k percentage out of range: {spec!r}")
        return min(p, max(1, round(frac * p)))
    if s in ("", "auto"):
        return default_k(p)
    k = int(s)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return k


@dataclass(frozen=True)
class Cell:
    regularizer: str
    lam: float = 0.0
    delta: float = 0.0
    k: str = ""
    r: int = 0
    b: int = 0

    def params(self, p: int | None = None) -> str:
        parts = []
        if self.regularizer in ("l2", "grouping+l2"):
            parts.append(f"lam={self.lam:g}")
        if self.regularizer == "dropout":
            parts.append(f"delta={self.delta:g}")
        if self.regularizer.startswith("grouping"):
            k = self.k if p is None else resolve_k(self.k, p)
            parts += [f"k={k}", f"r={self.r}", f"b={self.b}"]
        return ";".join(parts)


@dataclass
class ResultRow:
    regularizer: str
    params: str
    sigma: float
    seed: int
    epoch: int
    train_loss: float
    test_acc: float
    seconds: float
    curve: Metrics = field(default_factory=Metrics, repr=False)

    def as_list(self):
        return [getattr(self, f.name) for f in fields(self) if f.name != "curve"]


def expand_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = []
    groupings = list(itertools.product(cfg.ks, cfg.rs, cfg.bs))
    for reg in cfg.regularizers:
        if reg == "none":
            cells.append(Cell("none"))
        elif reg == "l2":
            cells += [Cell("l2", lam=lam) for lam in cfg.lambdas]
        elif reg == "dropout":
            cells += [Cell("dropout", delta=d) for d in cfg.deltas]
        elif reg == "grouping":
            cells += [Cell("grouping", k=k, r=r, b=b) for k, r, b in groupings]
        else:
            cells += [Cell(reg, lam=lam, k=k, r=r, b=b) for lam in cfg.lambdas for k, r, b in groupings]
    return cells


def synth_dataset(n_classes: int, per_class: int, dims, seed: int) -> Dataset:
    return synth_faces(n_classes, per_class, dims, derive_rng(seed, 0))


def base_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data == "synth":
        ds = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_dims, cfg.synth_seed)
    else:
        ds = load_dataset(cfg.data)
    return standardize(ds) if cfg.standardize else ds


def prepare_data(base: Dataset, sigma: float, seed: int, test_fraction: float):
    """Noise the whole dataset with ``seed`` then split it with a stream derived from ``seed``."""
    noisy = add_noise(base, NoiseSpec(sigma, seed))
    return split(noisy, test_fraction, derive_rng(seed, _SPLIT_STREAM))


def _graph_for(ds: Dataset):
    return grid_adjacency(ds.geometry)


def _run_group(cfg: ExperimentConfig, cells, sigma, seed):
    base = base_dataset(cfg)
    tr, te = prepare_data(base, sigma, seed, cfg.test_fraction)
    graph = _graph_for(tr)
    banks = {}
    rows = []
    for cell in cells:
        bank = None
        if cell.regularizer.startswith("grouping"):
            k = resolve_k(cell.k, tr.p)
            key = (k, cell.r, cell.b)
            if key not in banks:
                banks[key] = build_bank(tr.X, graph, k, cell.r, cell.b, seed)
            bank = banks[key]
        tcfg = TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            optimizer=cfg.optimizer,
            regularizer=cell.regularizer,
            lam=cell.lam,
            delta=cell.delta,
            bank=bank,
            policy=cfg.policy,
            seed=seed,
        )
        _, m = train(GlmModel.zeros(tr.l, tr.p), tr.X, tr.y, tcfg, te.X, te.y)
        rows.append(
            ResultRow(cell.regularizer, cell.params(tr.p), sigma, seed, len(m.train_loss),
                      m.train_loss[-1], m.test_acc[-1], m.seconds[-1], m)
        )
    return rows


def run_sweep(cfg: ExperimentConfig, progress=None) -> list[ResultRow]:
    """Train every cell for every (sigma, seed); one ``ResultRow`` per cell and seed.

    Rows are ordered by sigma, then cell, then seed. Each (sigma, seed) pair
    is an independent task; with ``n_jobs > 1`` they run in worker processes.
    """
    if not cfg.seeds:
        raise ConfigError("a sweep needs at least one seed")
    cells = expand_cells(cfg)
    tasks = [(s, seed) for s in cfg.sigmas for seed in cfg.seeds]
    if cfg.n_jobs == 1:
        results = []
        for s, seed in tasks:
            results.append(_run_group(cfg, cells, s, seed))
            if progress:
                progress(s, seed)
    else:
        workers = None if cfg.n_jobs < 1 else cfg.n_jobs
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_group, cfg, cells, s, seed) for s, seed in tasks]
            results = [f.result() for f in futures]
    by_task = dict(zip(tasks, results))
    rows = []
    for s in cfg.sigmas:
        for ci in range(len(cells)):
            rows += [by_task[(s, seed)][ci] for seed in cfg.seeds]
    return rows


def _sem(values):
    if len(values) < 2:
        return float("nan")
    return statistics.stdev(values) / math.sqrt(len(values))


def summarize(rows) -> list[dict]:
    """Mean and standard error (n-1 normalised) of final test accuracy across seeds."""
    groups = {}
    for row in rows:
        groups.setdefault((row.regularizer, row.params, row.sigma), []).append(row)
    out = []
    for (reg, params, sigma), members in groups.items():
        acc = [r.test_acc for r in members]
        out.append(
            dict(
                regularizer=reg,
                params=params,
                sigma=sigma,
                n_seeds=len(acc),
                mean_test_acc=float(np.mean(acc)),
                sem_test_acc=_sem(acc),
                mean_seconds=float(np.mean([r.seconds for r in members])),
            )
        )
    return out


def best_per_regularizer(summary) -> dict:
    """Best mean accuracy per (regularizer, sigma) over its hyperparameter grid."""
    best = {}
    for entry in summary:
        key = (entry["regularizer"], entry["sigma"])
        if key not in best or entry["mean_test_acc"] > best[key]["mean_test_acc"]:
            best[key] = entry
    return best


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_results(rows, path):
    return _write_csv(path, RESULT_HEADER, (r.as_list() for r in rows))


def write_curves(rows, path):
    """Per-epoch learning curves, same columns as the results file."""
    lines = []
    for r in rows:
        for epoch, loss, acc, sec in r.curve.rows():
            lines.append([r.regularizer, r.params, r.sigma, r.seed, epoch, loss, acc, sec])
    return _write_csv(path, RESULT_HEADER, lines)


def write_summary(summary, path):
    return _write_csv(path, SUMMARY_HEADER, ([e[h] for h in SUMMARY_HEADER] for e in summary))


def _square_dims(p: int):
    h = 1 << (int(math.log2(p)) // 2)
    while p % h:
        h -= 1
    return (h, p // h)


def bench(ps=(1024, 2048, 4096), ratio=0.2, r=20, b=5, batch_size=32, n_classes=40, per_class=10,
          repeats=5, seed=0) -> list[tuple]:
    """Median wall time of one clustering and of one grouping epoch for each ``p``."""
    rows = []
    for p in ps:
        dims = _square_dims(p)
        ds = synth_faces(n_classes, per_class, dims, derive_rng(seed, p))
        graph = grid_adjacency(dims)
        k = min(p, max(1, round(ratio * p)))
        sub = ds.X[:r]
        t_cluster = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            rena_cluster(sub, graph, k)
            t_cluster.append(time.perf_counter() - t0)
        bank = build_bank(ds.X, graph, k, r, b, seed)
        t_epoch = []
        for rep in range(repeats):
            cfg = TrainConfig(epochs=1, batch_size=batch_size, lr=1e-3, optimizer="sgd",
                              regularizer="grouping", bank=bank, seed=rep)
            _, m = train(GlmModel.zeros(ds.l, p), ds.X, ds.y, cfg)
            t_epoch.append(m.seconds[-1])
        rows.append((p, k, "cluster", statistics.median(t_cluster)))
        rows.append((p, k, "epoch", statistics.median(t_epoch)))
    return rows


def write_bench(rows, path):
    return _write_csv(path, BENCH_HEADER, rows)
