"""Impulse-response estimation with stable spline regularization.

Two estimators are provided:

* ``ss_l2_ml`` -- quadratic loss, kernel hyperparameters from the marginal
  likelihood, closed-form estimate;
* ``ss_plq_cv`` -- any PLQ loss/regularizer pair solved by the interior-point
  method, hyperparameters chosen by hold-out validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DataError,
    FactorizationError,
    InvalidParameterError,
    RankDeficiencyError,
    ValidationError,
)
from .kernel import StableSplineKernel, gram
from .plq import PlqPenalty, direct_sum, make_penalty, precompose_affine, scale_penalty
from .solver import IpProblem, SolveReport, SolverOptions, check, interior_point, solve

ALPHA_GRID = (0.01,) + tuple(round(0.05 * k, 2) for k in range(1, 20)) + (0.99,)


@dataclass(frozen=True, eq=False)
class RegressionData:
    """Lagged-input regressor ``H`` (m, n), outputs ``z`` and noise variance estimate."""

    H: np.ndarray
    z: np.ndarray
    delay: int = 1
    sigma2_hat: Optional[float] = None

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def rows(self, sl: slice) -> "RegressionData":
        return replace(self, H=self.H[sl], z=self.z[sl])


@dataclass
class SsEstimate:
    x_hat: np.ndarray
    alpha: float
    gamma: float
    method: str
    lam: Optional[float] = None
    sigma2: Optional[float] = None
    objective: Optional[float] = None
    iterations: int = 0


# -- data ----------------------------------------------------------------------


def _lagged(u, y_out, n: int, delay: int):
    u = np.asarray(u, dtype=float).ravel()
    y_out = np.asarray(y_out, dtype=float).ravel()
    if u.size != y_out.size:
        raise DataError(f"input and output lengths differ ({u.size} vs {y_out.size})")
    if n < 1 or delay < 0:
        raise InvalidParameterError("need n >= 1 and delay >= 0")
    first = n + delay - 1  # 0-based index of the first fully determined output
    if u.size <= first:
        raise DataError(f"series of length {u.size} too short for n={n}, delay={delay}")
    t = np.arange(first, u.size)
    H = u[t[:, None] - delay - np.arange(n)[None, :]]
    return H, y_out[first:]


def _ls_noise_variance(H, z) -> float:
    m, n = H.shape
    if m <= n:
        raise DataError(f"need more rows than coefficients for least squares (m={m}, n={n})")
    x, _, rank, _ = np.linalg.lstsq(H, z, rcond=None)
    if rank < n:
        raise RankDeficiencyError("regressor matrix is rank deficient; input is not exciting")
    resid = z - H @ x
    return float(resid @ resid / (m - n))


def build_regressor(u, y_out, n: int, delay: int = 1, sigma2_hat: Optional[float] = None
                    ) -> RegressionData:
    """Regressor built from fully determined output times only.

    Row ``t`` holds ``u(t - delay - j + 1)`` for ``j = 1..n``.  When
    ``sigma2_hat`` is not given and there are more rows than coefficients, it
    is estimated by a least-squares FIR fit; it stays ``None`` if ``H`` is
    rank deficient.
    """
    H, z = _lagged(u, y_out, n, delay)
    if sigma2_hat is None and H.shape[0] > n:
        try:
            sigma2_hat = _ls_noise_variance(H, z)
        except RankDeficiencyError:
            pass
    return RegressionData(H=H, z=z, delay=delay, sigma2_hat=sigma2_hat)


def estimate_noise_variance(u, y_out, n: int, delay: int = 1) -> float:
    """Residual variance of a length-``n`` least-squares FIR fit, ``m - n`` dof."""
    H, z = _lagged(u, y_out, n, delay)
    return _ls_noise_variance(H, z)


# -- marginal likelihood -----------------------------------------------------------


def _require_sigma2(data: RegressionData) -> float:
    if data.sigma2_hat is None:
        raise InvalidParameterError("regression data carries no noise variance estimate")
    return float(data.sigma2_hat)


def marginal_likelihood_objective(lam: float, alpha: float, data: RegressionData) -> float:
    """``z^T S^{-1} z + log det S`` with ``S = lam H Q H^T + sigma2 I``."""
    if not lam > 0:
        raise InvalidParameterError(f"lambda must be positive, got {lam}")
    s2 = _require_sigma2(data)
    H, z = data.H, data.z
    S = lam * H @ gram(alpha, data.n) @ H.T + s2 * np.eye(data.m)
    try:
        cho = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("output covariance is not positive definite") from exc
    return float(z @ scipy.linalg.cho_solve(cho, z) + 2.0 * np.log(np.diag(cho[0])).sum())


class _SpectralObjective:
    """Marginal likelihood in ``lam`` for fixed ``alpha`` via one eigendecomposition."""

    def __init__(self, alpha: float, data: RegressionData):
        s2 = _require_sigma2(data)
        HQHt = data.H @ gram(alpha, data.n) @ data.H.T
        d, V = np.linalg.eigh(HQHt)
        self.d = np.clip(d, 0.0, None)
        self.zt2 = (V.T @ data.z) ** 2
        self.s2 = s2

    def __call__(self, lam: float) -> float:
        ev = lam * self.d + self.s2
        if np.any(~(ev > 0)):
            raise FactorizationError("output covariance is not positive definite")
        return float(np.sum(self.zt2 / ev) + np.sum(np.log(ev)))


def _golden(f, lo: float, hi: float, rtol: float):
    """Golden-section search of ``f(exp(t))`` over ``t in [log lo, log hi]``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(lo), math.log(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(math.exp(c)), f(math.exp(d))
    while b - a > math.log1p(rtol):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(math.exp(d))
    return (math.exp(c), fc) if fc <= fd else (math.exp(d), fd)


def default_lambda_grid(sigma2: float, per_decade: int = 4) -> np.ndarray:
    return sigma2 * np.logspace(-6, 6, 12 * per_decade + 1)


def fit_hyperparameters_ml(data: RegressionData, alpha_grid: Sequence[float] = ALPHA_GRID,
                           lambda_grid: Optional[Sequence[float]] = None, rtol: float = 1e-3):
    """Minimize the marginal-likelihood objective over ``(lam, alpha)``.

    ``alpha`` ranges over ``alpha_grid``; for each, ``lam`` is searched on
    ``lambda_grid`` (default: log-spaced over ``[1e-6, 1e6] * sigma2``) and the
    best grid point is refined by golden-section search between its
    neighbours.  Ties go to the smaller ``alpha``, then the smaller ``lam``.

    Returns ``(lam_hat, alpha_hat)``.
    """
    alphas = sorted(set(float(a) for a in alpha_grid))
    s2 = _require_sigma2(data)
    lams = np.unique(np.asarray(
        default_lambda_grid(s2) if lambda_grid is None else lambda_grid, dtype=float))
    if not alphas or lams.size == 0:
        raise InvalidParameterError("hyperparameter grids must be nonempty")
    best = (np.inf, None, None)
    for alpha in alphas:
        f = _SpectralObjective(alpha, data)
        vals = np.array([f(lam) for lam in lams])
        i = int(np.argmin(vals))
        lam, val = float(lams[i]), float(vals[i])
        if lams.size > 1:
            lo, hi = lams[max(i - 1, 0)], lams[min(i + 1, lams.size - 1)]
            lam_r, val_r = _golden(f, lo, hi, rtol)
            if val_r < val:
                lam, val = lam_r, val_r
        if val < best[0]:
            best = (val, lam, alpha)
    return best[1], best[2]


def estimate_ss_l2(data: RegressionData, lam: float, alpha: float) -> SsEstimate:
    """Closed-form estimate ``lam Q H^T S^{-1} z``."""
    s2 = _require_sigma2(data)
    H, z = data.H, data.z
    Q = gram(alpha, data.n)
    QHt = Q @ H.T
    S = lam * H @ QHt + s2 * np.eye(data.m)
    try:
        cho = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("output covariance is not positive definite") from exc
    x = lam * QHt @ scipy.linalg.cho_solve(cho, z)
    return SsEstimate(x_hat=x, alpha=alpha, gamma=s2 / lam, lam=lam, sigma2=s2,
                      method="ss_l2_ml")


def estimate_ss_l2_ml(data: RegressionData, alpha_grid=ALPHA_GRID) -> SsEstimate:
    lam, alpha = fit_hyperparameters_ml(data, alpha_grid)
    est = estimate_ss_l2(data, lam, alpha)
    est.objective = marginal_likelihood_objective(lam, alpha, data)
    return est


# -- PLQ estimator -------------------------------------------------------------------


def assemble_plq_problem(data: RegressionData, loss: PlqPenalty, reg: PlqPenalty, gamma: float,
                         kernel: StableSplineKernel, constraints=None) -> IpProblem:
    """Problem ``min_y loss(H L y - z) + gamma reg(y)`` subject to ``A_x^T L y <= a_x``.

    ``constraints`` is ``(A_x, a_x)`` with ``A_x`` of shape ``(n, P)`` acting on
    the impulse response ``x = L y``, or ``None``.
    """
    if loss.primal_dim != data.m:
        raise InvalidParameterError(f"loss acts on R^{loss.primal_dim}, data has m={data.m}")
    if reg.primal_dim != data.n or kernel.n != data.n:
        raise InvalidParameterError("regularizer and kernel must match the impulse-response length")
    Lk = kernel.Lfac
    F = np.vstack((np.eye(data.n), data.H @ Lk))
    shift = np.concatenate((np.zeros(data.n), -data.z))
    penalty = precompose_affine(direct_sum(scale_penalty(reg, gamma), loss), F, shift)
    if constraints is None:
        problem = IpProblem(penalty)
        check(problem)
        return problem
    A_x, a_x = constraints
    A_x = np.asarray(A_x, dtype=float)
    if A_x.ndim == 1:
        A_x = A_x[:, None]
    problem = IpProblem(penalty, Lk.T @ A_x, a_x)
    # x = L y is a bijection, so the interior is tested on the x side where
    # the LP is well scaled even when L is badly conditioned
    if interior_point(A_x, problem.a) is None:
        raise ValidationError("constraint set on x has empty interior")
    check(problem, interior_known=True)
    return problem


def estimate_ss_plq(problem: IpProblem, kernel: StableSplineKernel,
                    opts: SolverOptions = SolverOptions(), gamma: float = float("nan"),
                    method: str = "ss_plq") -> tuple[SsEstimate, SolveReport]:
    """Solve an assembled problem and map the solution back to ``x = L y``."""
    rep = solve(problem, opts, validated=True)
    est = SsEstimate(x_hat=kernel.Lfac @ rep.y_star, alpha=kernel.alpha, gamma=gamma,
                     method=method, objective=rep.objective, iterations=rep.iterations)
    return est, rep


def gamma_grid_around(gamma_hat: float, points: int = 20, span: float = 100.0) -> np.ndarray:
    return np.logspace(math.log10(gamma_hat / span), math.log10(gamma_hat * span), points)


@dataclass
class CvResult:
    alpha: float
    gamma: float
    score: float
    scores: dict
    estimate: SsEstimate


def fit_ss_plq(data, alpha, gamma, loss_name, loss_params, reg_name, reg_params, constraints, opts,
               kernel=None):
    kernel = kernel or StableSplineKernel(alpha, data.n)
    loss = make_penalty(loss_name, data.m, **loss_params)
    reg = make_penalty(reg_name, data.n, **reg_params)
    problem = assemble_plq_problem(data, loss, reg, gamma, kernel, constraints)
    return estimate_ss_plq(problem, kernel, opts, gamma=gamma)


def cv_tune_plq(u, y_out, n: int, delay: int = 1, alpha_grid: Sequence[float] = ALPHA_GRID,
                gamma_grid: Optional[Sequence[float]] = None, loss: str = "l1",
                loss_params: Optional[dict] = None, reg: str = "l2",
                reg_params: Optional[dict] = None, constraints=None,
                opts: SolverOptions = SolverOptions(), data: Optional[RegressionData] = None
                ) -> CvResult:
    """Hold-out selection of ``(alpha, gamma)`` followed by a refit on all rows.

    The usable rows are split chronologically: the first half trains, the
    second half validates by squared prediction error.  The default ``gamma``
    grid is 20 log-spaced points over ``[g/100, 100 g]`` with ``g = sigma2/lam``
    from the marginal-likelihood fit.  Ties go to the smaller ``gamma``, then
    the smaller ``alpha``.
    """
    loss_params = dict(loss_params or {})
    reg_params = dict(reg_params or {})
    if data is None:
        data = build_regressor(u, y_out, n, delay)
    m = data.m
    n_train = m // 2
    if n_train < 1 or m - n_train < 1:
        raise DataError(f"need at least two usable rows for a train/validation split (m={m})")
    if gamma_grid is None:
        lam, _ = fit_hyperparameters_ml(data)
        gamma_grid = gamma_grid_around(_require_sigma2(data) / lam)
    alphas = sorted(set(float(a) for a in alpha_grid))
    gammas = sorted(set(float(g) for g in gamma_grid))
    if not alphas or not gammas:
        raise InvalidParameterError("hyperparameter grids must be nonempty")
    train, valid = data.rows(slice(0, n_train)), data.rows(slice(n_train, m))

    scores = {}
    for alpha in alphas:
        kernel = StableSplineKernel(alpha, n)
        for gamma in gammas:
            try:
                est, rep = fit_ss_plq(train, alpha, gamma, loss, loss_params, reg, reg_params,
                                      constraints, opts, kernel)
            except (FactorizationError, RankDeficiencyError):
                scores[(gamma, alpha)] = np.inf
                continue
            if not rep.converged:
                scores[(gamma, alpha)] = np.inf
                continue
            resid = valid.z - valid.H @ est.x_hat
            scores[(gamma, alpha)] = float(resid @ resid)
    # sorted keys give the (gamma, alpha) tie-break; min keeps the first minimum
    key = min(sorted(scores), key=lambda k: scores[k])
    if not np.isfinite(scores[key]):
        raise FactorizationError("no grid point produced a converged estimate")
    gamma_hat, alpha_hat = key
    final, _ = fit_ss_plq(data, alpha_hat, gamma_hat, loss, loss_params, reg, reg_params,
                          constraints, opts)
    final.method = "ss_plq_cv"
    final.sigma2 = data.sigma2_hat
    return CvResult(alpha=alpha_hat, gamma=gamma_hat, score=scores[key], scores=scores,
                    estimate=final)
