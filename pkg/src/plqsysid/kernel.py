"""First-order stable spline (TC) kernel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FactorizationError, InvalidParameterError

PIVOT_RTOL = 1e-14


def gram(alpha: float, n: int) -> np.ndarray:
    """Gram matrix with entries ``alpha ** max(i, j)`` for 1-based ``i, j``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if int(n) != n or n < 1:
        raise InvalidParameterError(f"n must be a positive integer, got {n}")
    idx = np.arange(1, int(n) + 1)
    return float(alpha) ** np.maximum.outer(idx, idx).astype(float)


def factor(Q: np.ndarray, rtol: float = PIVOT_RTOL) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = Q`` and positive diagonal.

    Each squared pivot is compared with the matching diagonal entry of ``Q``
    (the fraction of variance not explained by earlier coordinates); a ratio
    below ``rtol`` raises ``FactorizationError``.
    """
    Q = np.asarray(Q, dtype=float)
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("kernel matrix is not positive definite") from exc
    d = np.diag(Q)
    piv = np.diag(L) ** 2
    if np.any(~(piv > rtol * d)) or np.any(~(d > 0)):
        raise FactorizationError(
            "kernel factorization pivot below tolerance (alpha too close to 0 or 1 for this n)"
        )
    return L


@dataclass(frozen=True, eq=False)
class StableSplineKernel:
    """TC kernel of length ``n`` and its Cholesky factor ``Lfac``."""

    alpha: float
    n: int
    Q: np.ndarray = field(init=False, repr=False)
    Lfac: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Q = gram(self.alpha, self.n)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Lfac", factor(Q))

    def regularizer_value(self, x) -> float:
        """``x^T Q^{-1} x`` computed through the factor."""
        y = solve_triangular(self.Lfac, np.asarray(x, dtype=float), lower=True)
        return float(y @ y)
