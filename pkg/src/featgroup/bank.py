"""Banks of grouping matrices, built once before training and sampled during it."""

from __future__ import annotations

import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from featgroup.grouping import (
    FeatureGraph,
    Partition,
    load_partition,
    partition_to_phi,
    rena_cluster,
    save_partition,
)
from featgroup.numkit import SparseGrouping, as_dense, derive_rng

__all__ = ["BankPolicy", "ProjectionBank", "build_bank", "draw", "save_bank", "load_bank"]

MANIFEST = "manifest.txt"


class BankPolicy(str, enum.Enum):
    """When a new matrix is drawn from the bank during training."""

    PER_MINIBATCH = "per-minibatch"
    PER_EPOCH = "per-epoch"


@dataclass(frozen=True, eq=False)
class ProjectionBank:
    """A fixed collection of ``b`` grouping matrices sharing the same shape.

    ``weights`` is only set for banks that stand for a non-uniform
    distribution (e.g. the exhaustive set of dropout masks); every average
    over the bank then uses these probabilities instead of ``1/b``.
    """

    matrices: tuple[SparseGrouping, ...]
    r: int = 0
    k: int = 0
    source_seed: int = 0
    partitions: tuple[Partition, ...] | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        mats = tuple(self.matrices)
        if not mats:
            raise ValueError("a bank needs at least one matrix")
        shape = mats[0].shape
        if any(m.shape != shape for m in mats):
            raise ValueError("all bank matrices must share the same (k, p)")
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "k", shape[0])
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64)
            if w.shape != (len(mats),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("bank weights must be a probability vector over the matrices")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def b(self) -> int:
        return len(self.matrices)

    @property
    def p(self) -> int:
        return self.matrices[0].p

    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.b, 1.0 / self.b)
        return self.weights

    def __len__(self):
        return self.b

    def __getitem__(self, i) -> SparseGrouping:
        return self.matrices[i]

    @classmethod
    def from_partitions(cls, partitions, **kw) -> "ProjectionBank":
        parts = tuple(partitions)
        return cls(tuple(partition_to_phi(pt) for pt in parts), partitions=parts, **kw)


_BANK_STREAM = 2  # training itself uses streams 0 and 1 of the same seed


def _one_matrix(X, graph, k, r, seed, index):
    rng = derive_rng(seed, _BANK_STREAM, index)
    rows = np.sort(rng.choice(X.shape[0], size=r, replace=False))
    return rena_cluster(X[rows], graph, k)


def build_bank(X, graph: FeatureGraph, k: int, r: int, b: int, seed: int, n_jobs: int = 1) -> ProjectionBank:
    """Cluster ``b`` independent subsamples of ``r`` training rows each.

    Matrix ``i`` uses its own random stream derived from ``seed`` and ``i``, so
    the bank is identical whatever ``n_jobs`` is.
    """
    X = as_dense(X, 2, "training data")
    n = X.shape[0]
    if b < 1:
        raise ValueError("b must be >= 1")
    if not 1 <= r <= n:
        raise ValueError(f"r={r} must be between 1 and the number of training samples ({n})")
    if n_jobs == 1:
        parts = [_one_matrix(X, graph, k, r, seed, i) for i in range(b)]
    else:
        workers = None if n_jobs < 1 else n_jobs
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(partial(_one_matrix, X, graph, k, r, seed), range(b), chunksize=max(1, b // 32)))
    return ProjectionBank.from_partitions(parts, r=r, source_seed=seed)


def draw(bank: ProjectionBank, rng: np.random.Generator) -> SparseGrouping:
    """Uniform draw with replacement (or by ``bank.weights`` when set)."""
    if bank.weights is None:
        return bank.matrices[int(rng.integers(bank.b))]
    return bank.matrices[int(rng.choice(bank.b, p=bank.weights))]


def save_bank(bank: ProjectionBank, directory) -> Path:
    if bank.partitions is None:
        raise ValueError("only banks built from partitions can be saved")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(bank.b)))
    for i, part in enumerate(bank.partitions):
        save_partition(part, d / f"partition_{i:0{width}d}.txt")
    manifest = f"b={bank.b}\nr={bank.r}\nk={bank.k}\np={bank.p}\nseed={bank.source_seed}\n"
    (d / MANIFEST).write_text(manifest, encoding="utf-8")
    return d


def load_bank(directory) -> ProjectionBank:
    d = Path(directory)
    meta = {}
    for line in (d / MANIFEST).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value)
    files = sorted(d.glob("partition_*.txt"))
    if len(files) != meta["b"]:
        raise ValueError(f"{d}: manifest lists b={meta['b']} but {len(files)} partition files exist")
    parts = [load_partition(f) for f in files]
    bank = ProjectionBank.from_partitions(parts, r=meta["r"], source_seed=meta["seed"])
    if bank.k != meta["k"] or bank.p != meta.get("p", bank.p):
        raise ValueError(f"{d}: partition shapes disagree with the manifest")
    return bank
