"""Small linear-algebra kernels and the seeded random source.

Dense data lives in plain float64 numpy arrays. The only sparse structure the
package needs is a grouping matrix with exactly one nonzero per column, stored
as two length-``p`` arrays so that every product with it is O(p).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

__all__ = [
    "SparseGrouping",
    "identity_grouping",
    "spgemv",
    "spgemv_t",
    "reconstruct",
    "project_rows",
    "backproject_rows",
    "orthonormality_error",
    "idempotence_error",
    "as_dense",
    "make_rng",
    "derive_rng",
]


def as_dense(a, ndim: int = 2, name: str = "array") -> np.ndarray:
    """Return ``a`` as a float64 array with ``ndim`` dims and only finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class SparseGrouping:
    """A ``k x p`` matrix with one nonzero per column.

    Column ``j`` holds ``col_value[j]`` in row ``col_to_row[j]``. For a
    feature-grouping matrix the values are ``1/sqrt(cluster size)``, which
    makes the rows orthonormal.

    Masking matrices (feature dropout) set ``mask=True``. They are square and
    dropped columns carry a zero value, so the strict positivity check is
    skipped for them.
    """

    k: int
    p: int
    col_to_row: np.ndarray
    col_value: np.ndarray
    mask: bool = False

    def __post_init__(self):
        rows = np.array(self.col_to_row, dtype=np.int64)
        vals = np.array(self.col_value, dtype=np.float64)
        k, p = int(self.k), int(self.p)
        if rows.shape != (p,) or vals.shape != (p,):
            raise ValueError(f"expected per-column arrays of length {p}")
        if not 1 <= k <= p:
            raise ValueError(f"need 1 <= k <= p, got k={k}, p={p}")
        if p and (rows.min() < 0 or rows.max() >= k):
            raise ValueError("row index out of range")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite value in grouping matrix")
        if self.mask:
            if k != p or np.any(rows != np.arange(p)) or np.any(vals < 0):
                raise ValueError("a mask must be a nonnegative diagonal p x p matrix")
        else:
            if np.any(vals <= 0):
                raise ValueError("grouping values must be strictly positive")
            if np.any(np.bincount(rows, minlength=k) == 0):
                raise ValueError("every row needs at least one nonzero")
        rows.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "col_to_row", rows)
        object.__setattr__(self, "col_value", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.k, self.p)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.k, self.p))
        out[self.col_to_row, np.arange(self.p)] = self.col_value
        return out

    @cached_property
    def csr(self) -> sparse.csr_matrix:
        """The matrix itself in CSR form (k x p), built on first use."""
        return sparse.csr_matrix(
            (self.col_value, (self.col_to_row, np.arange(self.p))), shape=self.shape
        )

    @cached_property
    def csr_t(self) -> sparse.csr_matrix:
        """Transpose in CSR form (p x k): one nonzero per row."""
        return sparse.csr_matrix(
            (self.col_value, self.col_to_row, np.arange(self.p + 1)), shape=(self.p, self.k)
        )

    def gram(self) -> sparse.csr_matrix:
        """``Phi^T Phi`` (p x p)."""
        return (self.csr_t @ self.csr).tocsr()

    def __eq__(self, other):
        if not isinstance(other, SparseGrouping):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.mask == other.mask
            and np.array_equal(self.col_to_row, other.col_to_row)
            and np.array_equal(self.col_value, other.col_value)
        )

    __hash__ = None


def identity_grouping(p: int) -> SparseGrouping:
    return SparseGrouping(p, p, np.arange(p), np.ones(p))


def _check_len(n: int, x: np.ndarray, what: str):
    if x.shape[-1] != n:
        raise ValueError(f"dimension mismatch: {what} has length {x.shape[-1]}, expected {n}")


def spgemv(phi: SparseGrouping, x) -> np.ndarray:
    """``Phi @ x``: scaled sums of ``x`` over each cluster. O(p)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("spgemv expects a vector")
    _check_len(phi.p, x, "x")
    return np.bincount(phi.col_to_row, weights=phi.col_value * x, minlength=phi.k)


def spgemv_t(phi: SparseGrouping, z) -> np.ndarray:
    """``Phi.T @ z``: scatter each row value back to its columns. O(p)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("spgemv_t expects a vector")
    _check_len(phi.k, z, "z")
    return phi.col_value * z[phi.col_to_row]


def reconstruct(phi: SparseGrouping, x) -> np.ndarray:
    """``Phi.T @ Phi @ x``, i.e. the piecewise-constant cluster-mean approximation."""
    return spgemv_t(phi, spgemv(phi, x))


def project_rows(phi: SparseGrouping, X) -> np.ndarray:
    """Apply ``Phi`` to every row: ``X @ Phi.T``, shape (m, k). O(mp)."""
    X = np.asarray(X, dtype=np.float64)
    _check_len(phi.p, X, "rows of X")
    if phi.mask:
        return X * phi.col_value
    return (phi.csr @ X.T).T


def backproject_rows(phi: SparseGrouping, Z) -> np.ndarray:
    """``Z @ Phi`` for ``Z`` of shape (m, k); returns (m, p). O(mp)."""
    Z = np.asarray(Z, dtype=np.float64)
    _check_len(phi.k, Z, "rows of Z")
    if phi.mask:
        return Z * phi.col_value
    return (phi.csr_t @ Z.T).T


def orthonormality_error(phi: SparseGrouping) -> float:
    """Dense ``max |Phi Phi^T - I_k|``."""
    d = phi.to_dense()
    return float(np.max(np.abs(d @ d.T - np.eye(phi.k))))


def idempotence_error(phi: SparseGrouping) -> float:
    """Dense ``max |(Phi^T Phi)^2 - Phi^T Phi|``."""
    d = phi.to_dense()
    g = d.T @ d
    return float(np.max(np.abs(g @ g - g)))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for sub-task ``keys`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
