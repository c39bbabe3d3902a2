"""Datasets: CSV/binary storage, additive noise, stratified splits, synthetic faces."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from featgroup.numkit import as_dense, make_rng

__all__ = [
    "Dataset",
    "NoiseSpec",
    "load_csv",
    "save_csv",
    "load_bin",
    "save_bin",
    "load_dataset",
    "save_dataset",
    "add_noise",
    "split",
    "standardize",
    "synth_faces",
]


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` samples of ``p`` features with labels in ``[0, l)``.

    ``geometry`` is the grid shape of one sample (``(p,)`` when unknown).
    """

    X: np.ndarray
    y: np.ndarray
    l: int
    geometry: tuple[int, ...] = ()

    def __post_init__(self):
        X = as_dense(self.X, 2, "features")
        y = np.asarray(self.y)
        if X.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if y.shape != (X.shape[0],):
            raise ValueError(f"expected {X.shape[0]} labels, got shape {y.shape}")
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        l = int(self.l)
        if y.min() < 0 or y.max() >= l:
            raise ValueError(f"labels must lie in [0, {l}); found range [{y.min()}, {y.max()}]")
        geometry = tuple(int(d) for d in self.geometry) or (X.shape[1],)
        if math.prod(geometry) != X.shape[1]:
            raise ValueError(f"geometry {geometry} does not match p={X.shape[1]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "geometry", geometry)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.l, self.geometry)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.l == other.l
            and self.geometry == other.geometry
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def load_csv(path, n_classes: int | None = None, geometry=None, standardize_features: bool = False) -> Dataset:
    """One sample per row, label in the last column. No header."""
    rows, labels = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise ValueError(f"{path}:{lineno}: ragged row with {len(row)} fields, expected {width}")
            try:
                values = [float(c) for c in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"{path}:{lineno}: NaN or Inf feature")
            if label != int(label):
                raise ValueError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
            rows.append(values)
            labels.append(int(label))
    if not rows:
        raise ValueError(f"{path}: no samples")
    y = np.array(labels, dtype=np.int64)
    l = int(y.max()) + 1 if n_classes is None else int(n_classes)
    ds = Dataset(np.array(rows), y, l, tuple(geometry or ()))
    return standardize(ds) if standardize_features else ds


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for x, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(label)])


_BIN_MAGIC = b"FGRD"
_BIN_VERSION = 1


def save_bin(ds: Dataset, path) -> None:
    """Little-endian layout: magic, u32 version, u64 n, u64 p, u32 l, u32 rank,
    rank*u64 dims, n*p f64 features (row-major), n u32 labels."""
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<IQQII", _BIN_VERSION, ds.n, ds.p, ds.l, len(ds.geometry)))
        fh.write(struct.pack(f"<{len(ds.geometry)}Q", *ds.geometry))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(ds.y.astype("<u4").tobytes())


def load_bin(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _BIN_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {_BIN_MAGIC!r}")
    head = struct.calcsize("<IQQII")
    if len(raw) < 4 + head:
        raise ValueError(f"{path}: truncated header")
    version, n, p, l, rank = struct.unpack_from("<IQQII", raw, 4)
    if version != _BIN_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + head
    expected = off + 8 * rank + 8 * n * p + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for n={n}, p={p}, found {len(raw)} (truncated?)")
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    X = np.frombuffer(raw, dtype="<f8", count=n * p, offset=off).reshape(n, p)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * p)
    return Dataset(X.astype(np.float64), y.astype(np.int64), l, dims)


def load_dataset(path, **kw) -> Dataset:
    """Dispatch on content: binary files start with the ``FGRD`` magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return load_bin(path) if magic == _BIN_MAGIC else load_csv(path, **kw)


def save_dataset(ds: Dataset, path) -> None:
    if str(path).endswith(".csv"):
        save_csv(ds, path)
    else:
        save_bin(ds, path)


def standardize(ds: Dataset) -> Dataset:
    """Zero mean, unit variance per feature (constant features are only centred)."""
    mu = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0)
    sd[sd == 0] = 1.0
    return replace(ds, X=(ds.X - mu) / sd)


def add_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Add i.i.d. ``N(0, sigma^2)`` to every feature. Values are not clipped."""
    if spec.sigma == 0:
        return ds
    noise = make_rng(spec.seed).normal(0.0, spec.sigma, size=ds.X.shape)
    return replace(ds, X=ds.X + noise)


def split(ds: Dataset, test_fraction: float, rng: np.random.Generator):
    """Stratified train/test split.

    The total test size is ``ceil(test_fraction * n)``; each class gets its
    proportional share rounded down, and the leftover slots go to the
    classes with the largest remainders (ties broken at random). Every class
    keeps at least one sample on each side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    classes, counts = np.unique(ds.y, return_counts=True)
    if np.any(counts < 2):
        bad = classes[counts < 2].tolist()
        raise ValueError(f"classes {bad} have fewer than 2 samples; cannot stratify")
    n_test = min(max(math.ceil(test_fraction * ds.n - 1e-9), len(classes)), ds.n - len(classes))
    exact = counts * (n_test / ds.n)
    per_class = np.clip(np.floor(exact).astype(np.int64), 1, counts - 1)
    remainder = exact - per_class
    short = n_test - per_class.sum()
    order = np.lexsort((rng.random(len(classes)), -remainder))
    for c in order:
        if short <= 0:
            break
        if per_class[c] < counts[c] - 1:
            per_class[c] += 1
            short -= 1
    test_idx = []
    for c, n_c in zip(classes, per_class):
        members = np.flatnonzero(ds.y == c)
        test_idx.append(rng.permutation(members)[:n_c])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(ds.n, dtype=bool)
    train_mask[test_idx] = False
    return ds.subset(np.flatnonzero(train_mask)), ds.subset(test_idx)


def _blob_image(rng, h, w, n_blobs):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy = rng.uniform(0.08, 0.25) * h
        sx = rng.uniform(0.08, 0.25) * w
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return img


def _rescale(img):
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def synth_faces(
    n_classes: int,
    per_class: int,
    dims=(64, 64),
    rng: np.random.Generator | None = None,
    sigma_intra: float = 0.05,
    shared: float = 0.7,
) -> Dataset:
    """Smooth blob images standing in for a small face dataset.

    All classes share a common template (the "face"); each class adds its
    own random blob pattern, and the two are mixed with weight ``shared`` on
    the template before rescaling to [0, 1]. Samples add i.i.d. Gaussian
    jitter of standard deviation ``sigma_intra`` to their class prototype.
    Every blob image uses 5 to 15 Gaussian bumps.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2:
        raise ValueError("synthetic faces are 2D images")
    if min(dims) < 8:
        raise ValueError(f"images must be at least 8x8, got {dims}")
    if per_class < 2:
        raise ValueError("need at least 2 samples per class")
    if n_classes < 1:
        raise ValueError("need at least one class")
    if not 0.0 <= shared < 1.0:
        raise ValueError("shared must be in [0, 1)")
    rng = make_rng(0) if rng is None else rng
    h, w = dims
    template = _rescale(_blob_image(rng, h, w, int(rng.integers(5, 16))))
    protos = []
    for _ in range(n_classes):
        own = _rescale(_blob_image(rng, h, w, int(rng.integers(5, 16))))
        protos.append(_rescale(shared * template + (1.0 - shared) * own).ravel())
    protos = np.array(protos)
    y = np.repeat(np.arange(n_classes), per_class)
    X = protos[y] + rng.normal(0.0, sigma_intra, size=(y.size, h * w))
    return Dataset(X, y, n_classes, dims)
