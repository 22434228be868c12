"""Dense linear-algebra kernels with pinned conventions.

Everything here runs in float64 no matter how checkpoints store tensors:
the compression pipeline subtracts nearly equal matrices and float32
residuals would drown in cancellation error.  Outputs are deterministic
for identical inputs on a fixed platform:

* SVD left singular vectors are sign-fixed so the entry of largest
  magnitude in each column is nonnegative (ties resolved toward the
  lowest row index).  The fix is mirrored onto the right vectors so the
  product is unchanged.
* Cholesky never pivots; rank-deficient inputs are handled by a fixed
  ridge-escalation ladder scaled by the mean diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError

# Ridge multipliers tried in order, applied as multiplier * mean(diag(A)).
RIDGE_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a finite float64 2-D array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValidationError(f"{name} must be 2-D with positive dims, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD with k = min(m, n) and the sign convention above."""

    left_vectors: np.ndarray        # (m, k), orthonormal columns
    singular_values: np.ndarray     # (k,), nonnegative, descending
    right_vectors_t: np.ndarray     # (k, n)

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors_t


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor with L @ L.T = symmetrized input + ridge_used * I."""

    lower: np.ndarray
    ridge_used: float

    @classmethod
    def identity(cls, n: int) -> "CholeskyFactor":
        return cls(np.eye(n), 0.0)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def svd(m) -> SvdResult:
    mm = as_matrix(m, "svd input")
    u, s, vt = np.linalg.svd(mm, full_matrices=False)
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))  # argmax breaks ties toward the lowest index
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return SvdResult(u, s, vt)


def truncated_approx(m, r: int) -> np.ndarray:
    """Best Frobenius rank-r approximation of m (Eckart-Young)."""
    mm = as_matrix(m, "truncation input")
    kmax = min(mm.shape)
    if not 1 <= r <= kmax:
        raise ValidationError(f"rank {r} out of range [1, {kmax}] for shape {mm.shape}")
    res = svd(mm)
    return (res.left_vectors[:, :r] * res.singular_values[:r]) @ res.right_vectors_t[:r]


def cholesky(a, ridge_ladder=RIDGE_LADDER) -> CholeskyFactor:
    """Factor a symmetric matrix, escalating a diagonal ridge until it succeeds.

    The input is symmetrized as (A + A.T) / 2 first; calibration
    autocorrelations arrive numerically asymmetric and occasionally
    rank-deficient, which is exactly what the ridge ladder absorbs.
    """
    m = as_matrix(a, "cholesky input")
    n = m.shape[0]
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"cholesky input must be square, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    scale = float(np.mean(np.diag(sym)))
    ridge = 0.0
    for mult in ridge_ladder:
        ridge = mult * scale
        try:
            lower = np.linalg.cholesky(sym + ridge * np.eye(n) if ridge != 0.0 else sym)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(lower, ridge)
    raise NumericalError(
        f"cholesky failed for {n}x{n} matrix even at maximum ridge {ridge:.3e}"
    )


def solve_lower_triangular(factor: CholeskyFactor, b) -> np.ndarray:
    """Solve factor.lower @ x = b by forward substitution."""
    bb = as_matrix(b, "triangular rhs")
    if bb.shape[0] != factor.dim:
        raise ValidationError(
            f"rhs has {bb.shape[0]} rows, factor is {factor.dim}x{factor.dim}"
        )
    return scipy.linalg.solve_triangular(factor.lower, bb, lower=True)
