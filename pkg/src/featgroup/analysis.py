"""Moments of a projection bank and the penalty it induces on a GLM.

Writing ``Phi^T Phi = Omega + Delta`` with ``Omega`` the bank average, the
expected loss under random grouping splits into the loss on smoothed inputs
``Omega x`` plus ``1/2 R(beta)`` where

    R(beta) = sum_i A''(x_i^T Omega beta) * Var_Phi[x_i^T Phi^T Phi beta].

All expectations here are exact (weighted) averages over the finite bank, so
the identities they satisfy hold to rounding error.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from featgroup.bank import ProjectionBank
from featgroup.glm import get_family
from featgroup.numkit import SparseGrouping, as_dense, project_rows, spgemv

__all__ = [
    "DENSE_LIMIT",
    "SmoothingOperator",
    "PenaltyReport",
    "estimate_omega",
    "delta_second_moment",
    "bank_scores",
    "var_target",
    "delta_x_moment",
    "first_order_term",
    "dropout_bank",
    "penalty",
    "taylor_check",
    "write_matrix_csv",
]

DENSE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class SmoothingOperator:
    omega: np.ndarray

    @property
    def p(self) -> int:
        return self.omega.shape[0]

    def apply(self, x) -> np.ndarray:
        return self.omega @ np.asarray(x, dtype=np.float64)


@dataclass
class PenaltyReport:
    smoothed_loss: float
    penalty: float
    per_sample_app: np.ndarray
    per_sample_var: np.ndarray

    @property
    def objective(self) -> float:
        """Second-order approximation of the expected loss."""
        return self.smoothed_loss + 0.5 * self.penalty

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sample_app"] = self.per_sample_app.tolist()
        d["per_sample_var"] = self.per_sample_var.tolist()
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def _guard_dense(p: int):
    if p > DENSE_LIMIT:
        raise ValueError(
            f"p={p} exceeds the dense limit of {DENSE_LIMIT}; "
            "use the matrix-free var_target/penalty functions instead"
        )


def estimate_omega(bank: ProjectionBank) -> SmoothingOperator:
    """Exact bank average of ``Phi^T Phi`` as a dense p x p matrix."""
    _guard_dense(bank.p)
    omega = np.zeros((bank.p, bank.p))
    for w, phi in zip(bank.probabilities(), bank.matrices):
        g = phi.gram().tocoo()
        np.add.at(omega, (g.row, g.col), w * g.data)
    return SmoothingOperator(omega)


def delta_second_moment(bank: ProjectionBank, omega: SmoothingOperator | None = None) -> np.ndarray:
    """Bank average of ``(Phi^T Phi - Omega)^T (Phi^T Phi - Omega)``.

    Evaluated term by term from the definition; it is *not* shortcut through
    idempotence, so comparing it with ``Omega - Omega^2`` is a real check.
    """
    _guard_dense(bank.p)
    om = (omega or estimate_omega(bank)).omega
    acc = np.zeros_like(om)
    for w, phi in zip(bank.probabilities(), bank.matrices):
        g = phi.gram()
        gg = (g.T @ g).toarray()
        g_om = np.asarray(g.T @ om)
        acc += w * (gg - g_om - g_om.T)
    return acc + om.T @ om


def bank_scores(bank: ProjectionBank, X, beta) -> np.ndarray:
    """``s[b, i] = x_i^T Phi_b^T Phi_b beta`` for every bank member and row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    beta = np.asarray(beta, dtype=np.float64)
    if X.shape[1] != bank.p or beta.shape != (bank.p,):
        raise ValueError(f"dimension mismatch: bank has p={bank.p}, X {X.shape}, beta {beta.shape}")
    out = np.empty((bank.b, X.shape[0]))
    for i, phi in enumerate(bank.matrices):
        out[i] = project_rows(phi, X) @ spgemv(phi, beta)
    return out


def _weighted_mean_var(s: np.ndarray, w: np.ndarray):
    mean = w @ s
    var = w @ np.square(s - mean)
    return mean, var


def var_target(bank: ProjectionBank, x, beta):
    """Variance over the bank of ``x^T Phi^T Phi beta``; matrix-free, O(b p).

    ``x`` may be a single vector or an (n, p) matrix (one variance per row).
    """
    x_arr = np.asarray(x, dtype=np.float64)
    _, var = _weighted_mean_var(bank_scores(bank, x_arr, beta), bank.probabilities())
    return float(var[0]) if x_arr.ndim == 1 else var


def delta_x_moment(bank: ProjectionBank, x, omega: SmoothingOperator | None = None) -> np.ndarray:
    """Bank average of ``Delta x x^T Delta`` (dense p x p)."""
    _guard_dense(bank.p)
    x = np.asarray(x, dtype=np.float64)
    om = omega or estimate_omega(bank)
    ox = om.apply(x)
    acc = np.zeros((bank.p, bank.p))
    for w, phi in zip(bank.probabilities(), bank.matrices):
        dx = phi.gram() @ x - ox
        acc += w * np.outer(dx, dx)
    return acc


def first_order_term(bank: ProjectionBank, x, beta, omega: SmoothingOperator | None = None) -> float:
    """Bank average of ``x^T Delta beta``; zero up to rounding."""
    om = omega or estimate_omega(bank)
    s = bank_scores(bank, x, beta)[:, 0]
    return float(bank.probabilities() @ s - np.asarray(x) @ om.apply(beta))


def dropout_bank(p: int, delta: float) -> ProjectionBank:
    """Every one of the ``2^p`` dropout masks, weighted by its probability."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if p > 16:
        raise ValueError("exhaustive enumeration is limited to p <= 16")
    keep_val = 1.0 / np.sqrt(1.0 - delta)
    mats, weights = [], []
    for pattern in itertools.product((False, True), repeat=p):
        keep = np.array(pattern)
        n_keep = int(keep.sum())
        weights.append((1.0 - delta) ** n_keep * delta ** (p - n_keep))
        mats.append(SparseGrouping(p, p, np.arange(p), np.where(keep, keep_val, 0.0), mask=True))
    w = np.array(weights)
    return ProjectionBank(tuple(mats), weights=w / w.sum())


def _binary_inputs(beta, X, y):
    beta = as_dense(beta, 1, "beta")
    X = as_dense(X, 2, "X")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ValueError("need one target per row of X")
    return beta, X, y


def penalty(beta, X, y, bank: ProjectionBank, family="logistic") -> PenaltyReport:
    """Smoothed loss ``sum_i L(Omega x_i, y_i)`` and the variance penalty ``R(beta)``.

    Binary setting: ``beta`` is a single weight vector and ``y`` holds 0/1
    labels (logistic) or real responses (gaussian).
    """
    fam = get_family(family)
    beta, X, y = _binary_inputs(beta, X, y)
    z, var = _weighted_mean_var(bank_scores(bank, X, beta), bank.probabilities())
    app = fam.A2(z)
    return PenaltyReport(
        smoothed_loss=float(np.sum(fam.nll(z, y))),
        penalty=float(np.sum(app * var)),
        per_sample_app=app,
        per_sample_var=var,
    )


def taylor_check(beta, X, y, bank: ProjectionBank, family="logistic"):
    """Compare the exact expected loss with its second-order expansion.

    Returns ``(lhs, rhs, gap)`` where ``lhs = sum_i E_Phi[L(Phi^T Phi x_i, y_i)]``
    and ``rhs = smoothed_loss + R/2``.
    """
    fam = get_family(family)
    beta, X, y = _binary_inputs(beta, X, y)
    s = bank_scores(bank, X, beta)
    w = bank.probabilities()
    lhs = float(np.sum(w @ fam.nll(s, y[None, :])))
    z, var = _weighted_mean_var(s, w)
    rhs = float(np.sum(fam.nll(z, y)) + 0.5 * np.sum(fam.A2(z) * var))
    return lhs, rhs, lhs - rhs


def write_matrix_csv(matrix, path) -> None:
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt="%.17g")
