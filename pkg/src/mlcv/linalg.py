"""Interpolative decomposition on top of column-pivoted QR.

The ID of a snapshot matrix U (m x N) selects r columns and a coefficient
matrix C with U ~= U[:, selected] @ C, where C restricted to the selected
columns is exactly the identity.  Pivoting is classic greedy largest-column
selection (LAPACK geqp3); the stronger rank-revealing variants are not
needed at the ranks used here, and the residual is reported exactly so
callers can check the quality themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError, DimensionError

# Above this condition number of R11 the triangular solve for the
# coefficient matrix is replaced by a truncated-SVD minimum-norm solve.
_COND_LIMIT = 1e10

# Relative singular value cutoff for the truncated solves.
_RCOND = 1e-12


def _check_matrix(u, name: str = "matrix") -> np.ndarray:
    a = np.asarray(u, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite entries")
    return a


def _resolve_termination(rank, tol, m: int, n: int) -> tuple[int | None, float | None]:
    if (rank is None) == (tol is None):
        raise DimensionError("exactly one of rank= or tol= must be given")
    if rank is not None:
        rank = int(rank)
        if rank < 1 or rank > min(m, n):
            raise DimensionError(f"rank must lie in [1, {min(m, n)}], got {rank}")
        return rank, None
    tol = float(tol)
    if not np.isfinite(tol) or tol < 0.0:
        raise DataError(f"tol must be finite and non-negative, got {tol}")
    return None, tol


@dataclass(frozen=True)
class PivotedQR:
    """Truncated column-pivoted QR: U[:, permutation] ~= q @ [r11 | r12]."""

    q: np.ndarray
    r11: np.ndarray
    r12: np.ndarray
    permutation: np.ndarray
    rank: int


def pivoted_qr(u, *, rank: int | None = None, tol: float | None = None) -> PivotedQR:
    """Column-pivoted QR truncated at a fixed rank or at a column-norm tolerance.

    Under tolerance termination the factorization stops at the first step
    where the largest remaining (deflated) column norm drops to ``tol`` or
    below; that norm is the standard cheap proxy for the trailing residual.
    A tolerance larger than every column norm yields rank 0 with empty
    factors.
    """
    a = _check_matrix(u)
    m, n = a.shape
    rank, tol = _resolve_termination(rank, tol, m, n)

    q_full, r_full, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_full))

    if rank is not None:
        r = rank
    else:
        below = np.nonzero(diag <= tol)[0]
        r = int(below[0]) if below.size else diag.size

    return PivotedQR(
        q=np.ascontiguousarray(q_full[:, :r]),
        r11=np.triu(r_full[:r, :r]),
        r12=np.ascontiguousarray(r_full[:r, r:]),
        permutation=np.asarray(piv, dtype=np.int64),
        rank=r,
    )


def solve_T(r11: np.ndarray, r12: np.ndarray) -> np.ndarray:
    """Solve R11 T = R12 for the interpolation coefficients.

    Uses back-substitution while R11 is comfortably conditioned and falls
    back to the minimum-Frobenius-norm solution via a truncated SVD when it
    is not, so near-duplicate selected columns degrade gracefully instead of
    blowing up the coefficients.
    """
    r11 = np.asarray(r11, dtype=np.float64)
    r12 = np.asarray(r12, dtype=np.float64)
    if r11.ndim != 2 or r11.shape[0] != r11.shape[1]:
        raise DimensionError(f"R11 must be square, got shape {r11.shape}")
    if r12.ndim != 2 or r12.shape[0] != r11.shape[0]:
        raise DimensionError(f"R12 rows must match R11, got {r12.shape} vs {r11.shape}")
    r = r11.shape[0]
    if r == 0:
        return np.zeros((0, r12.shape[1]))
    if r12.shape[1] == 0:
        return np.zeros((r, 0))
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(r11)
    if np.isfinite(cond) and cond < _COND_LIMIT:
        return scipy.linalg.solve_triangular(r11, r12, lower=False)
    return np.linalg.pinv(r11, rcond=_RCOND) @ r12


@dataclass(frozen=True)
class IDFactorization:
    """Column interpolative decomposition U ~= U[:, selected_indices] @ coefficients."""

    selected_indices: np.ndarray
    coefficients: np.ndarray
    rank: int
    residual_norm: float


def interpolative_decomposition(
    u, *, rank: int | None = None, tol: float | None = None
) -> IDFactorization:
    """Column ID with the coefficient block on the selected columns pinned to I.

    ``residual_norm`` is the spectral norm of U - U[:, selected] @ C,
    computed directly rather than estimated.
    """
    a = _check_matrix(u)
    n = a.shape[1]
    pqr = pivoted_qr(a, rank=rank, tol=tol)
    r = pqr.rank
    if r == 0:
        return IDFactorization(
            selected_indices=np.zeros(0, dtype=np.int64),
            coefficients=np.zeros((0, n)),
            rank=0,
            residual_norm=float(np.linalg.norm(a, 2)),
        )
    t = solve_T(pqr.r11, pqr.r12)
    coeff = np.empty((r, n))
    coeff[:, pqr.permutation[:r]] = np.eye(r)
    coeff[:, pqr.permutation[r:]] = t
    selected = pqr.permutation[:r].copy()
    residual = a - a[:, selected] @ coeff
    return IDFactorization(
        selected_indices=selected,
        coefficients=coeff,
        rank=r,
        residual_norm=float(np.linalg.norm(residual, 2)),
    )


class LeastSquaresOperator:
    """Reusable minimum-norm least-squares solver against a fixed matrix.

    The pseudoinverse is formed once at construction; every ``solve`` call is
    then a single matrix product, which is what the per-sample coefficient
    fits in the control-variate loop need.
    """

    def __init__(self, a):
        self._a = _check_matrix(a, "basis matrix")
        self._pinv = np.linalg.pinv(self._a, rcond=_RCOND)

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    def solve(self, b) -> np.ndarray:
        """Coefficients c minimizing ||a c - b||; accepts a vector or a
        matrix whose columns are independent right-hand sides."""
        bv = np.asarray(b, dtype=np.float64)
        single = bv.ndim == 1
        if single:
            bv = bv[:, None]
        if bv.ndim != 2 or bv.shape[0] != self._a.shape[0]:
            raise DimensionError(
                f"right-hand side rows {bv.shape} do not match matrix {self._a.shape}"
            )
        if not np.all(np.isfinite(bv)):
            raise DataError("right-hand side contains non-finite entries")
        c = self._pinv @ bv
        return c[:, 0] if single else c


def least_squares(a, b) -> np.ndarray:
    """One-shot least squares; build a LeastSquaresOperator to amortize."""
    return LeastSquaresOperator(a).solve(b)


def singular_values(u) -> np.ndarray:
    """Singular values of a matrix, descending."""
    a = _check_matrix(u)
    return np.linalg.svd(a, compute_uv=False)
