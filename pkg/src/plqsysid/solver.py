"""Primal-dual interior-point method for ``min_{A^T y <= a} rho(y)``.

The iterate carries the primal ``y``, the dual ``u`` of the PLQ supremum,
multipliers ``q`` and slacks ``s`` for ``C^T u <= c``, and multipliers ``w``
and slacks ``r`` for ``A^T y <= a``.  Each Newton step on the relaxed KKT
system is reduced by block elimination to one dense ``N x N`` solve with

    T     = M + C diag(q/s) C^T            (block diagonal)
    Omega = B^T T^{-1} B + A diag(w/r) A^T
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DimensionError, FactorizationError, ValidationError
from .linalg import PIVOT_RTOL, to_dense
from .plq import PlqPenalty, evaluate


@dataclass(frozen=True, eq=False)
class IpProblem:
    """Constrained PLQ program; ``A`` is ``(N, P)`` with ``P = 0`` allowed."""

    penalty: PlqPenalty
    A: np.ndarray = None
    a: np.ndarray = None

    def __post_init__(self):
        N = self.penalty.primal_dim
        A = np.zeros((N, 0)) if self.A is None else np.asarray(self.A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        a = np.zeros(A.shape[1]) if self.a is None else np.asarray(self.a, dtype=float).ravel()
        if A.shape[0] != N:
            raise DimensionError(f"A must have {N} rows, got {A.shape[0]}")
        if a.size != A.shape[1]:
            raise DimensionError(f"a must have {A.shape[1]} entries, got {a.size}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "a", a)

    @property
    def n_ineq(self) -> int:
        return self.A.shape[1]

    @cached_property
    def _Bt(self):
        B = self.penalty.B
        return B.T.tocsr() if sp.issparse(B) else np.ascontiguousarray(B.T)

    @cached_property
    def _Ct(self):
        return self.penalty.C.T.tocsr()

    @cached_property
    def _assembler(self):
        p = self.penalty
        return p.block_structure.assembler(p.M, p.C)


@dataclass
class IpState:
    y: np.ndarray
    u: np.ndarray
    q: np.ndarray
    s: np.ndarray
    w: np.ndarray
    r: np.ndarray
    mu: float

    @classmethod
    def initial(cls, problem: IpProblem) -> "IpState":
        p = problem.penalty
        L, P = p.n_constraints, problem.n_ineq
        return cls(
            y=np.zeros(p.primal_dim),
            u=np.zeros(p.dual_dim),
            q=np.ones(L),
            s=np.ones(L),
            w=np.ones(P),
            r=np.ones(P),
            mu=1.0 if L + P else 0.0,
        )

    def complementarity(self) -> float:
        return float(self.q @ self.s + self.w @ self.r)

    def moved(self, step: "Step", alpha: float) -> "IpState":
        return IpState(
            y=self.y + alpha * step.dy,
            u=self.u + alpha * step.du,
            q=self.q + alpha * step.dq,
            s=self.s + alpha * step.ds,
            w=self.w + alpha * step.dw,
            r=self.r + alpha * step.dr,
            mu=self.mu,
        )


@dataclass
class Step:
    ds: np.ndarray
    dq: np.ndarray
    du: np.ndarray
    dr: np.ndarray
    dw: np.ndarray
    dy: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate((self.ds, self.dq, self.du, self.dr, self.dw, self.dy))


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max-iterations"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class SolveReport:
    y_star: np.ndarray
    objective: float
    kkt_residual_inf: float
    iterations: int
    status: Status
    state: IpState = field(repr=False)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 200
    sigma: float = 0.1
    tau: float = 0.995
    max_halvings: int = 30
    verbose: bool = False


# -- validation -----------------------------------------------------------------


def validate(problem: IpProblem, interior_known: bool = False) -> Optional[str]:
    """Return ``None`` if the IP hypotheses hold, else a diagnostic string.

    ``interior_known`` skips the strict-feasibility LP when the caller has
    already established it (e.g. in better-conditioned coordinates).
    """
    p = problem.penalty
    if p.dual_dim:
        T0 = p.M + p.C @ p.C.T
        scale = max(abs(T0).max(), np.finfo(float).tiny) if T0.nnz else 1.0
        lam = p.block_structure.min_eigenvalues(T0)
        if lam.size and lam.min() <= 1e-12 * scale:
            return "nullspace condition violated: Null(M) and Null(C^T) intersect"
    if p.primal_dim > p.dual_dim or np.linalg.matrix_rank(to_dense(p.B)) < p.primal_dim:
        return "B is not injective: Null(B) is nontrivial"
    if problem.n_ineq and not interior_known and strictly_feasible_point(problem) is None:
        return "constraint set {y : A^T y <= a} has empty interior"
    return None


def check(problem: IpProblem, interior_known: bool = False) -> None:
    """Raise ``ValidationError`` when ``validate`` reports a violation."""
    diag = validate(problem, interior_known)
    if diag is not None:
        raise ValidationError(diag)


def strictly_feasible_point(problem: IpProblem) -> Optional[np.ndarray]:
    """A point with ``A^T y < a`` componentwise, or ``None`` if none exists."""
    return interior_point(problem.A, problem.a)


def interior_point(A, a) -> Optional[np.ndarray]:
    """A point with ``A^T y < a`` componentwise, or ``None`` if none exists."""
    A = np.asarray(A, dtype=float)
    a = np.asarray(a, dtype=float).ravel()
    N, P = A.shape
    # maximize t subject to A^T y + t <= a, t <= 1
    cost = np.zeros(N + 1)
    cost[-1] = -1.0
    A_ub = np.hstack((A.T, np.ones((P, 1))))
    bounds = [(None, None)] * N + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=a, bounds=bounds, method="highs")
    if res.status != 0 or res.x[-1] <= 1e-10 * max(1.0, np.abs(a).max(initial=0.0)):
        return None
    return res.x[:N]


# -- residual and Newton step ----------------------------------------------------


def _check_state(problem: IpProblem, st: IpState):
    p = problem.penalty
    want = (p.primal_dim, p.dual_dim, p.n_constraints, p.n_constraints,
            problem.n_ineq, problem.n_ineq)
    got = tuple(v.size for v in (st.y, st.u, st.q, st.s, st.w, st.r))
    if want != got:
        raise DimensionError(f"state sizes {got} do not match problem sizes {want}")


def kkt_residual(problem: IpProblem, state: IpState, mu: Optional[float] = None) -> np.ndarray:
    """Stacked relaxed KKT residual; ``mu`` defaults to ``state.mu``."""
    _check_state(problem, state)
    p = problem.penalty
    mu = state.mu if mu is None else mu
    y, u, q, s, w, r = state.y, state.u, state.q, state.s, state.w, state.r
    return np.concatenate((
        s + problem._Ct @ u - p.c,
        q * s - mu,
        p.B @ y - p.M @ u - p.C @ q + p.b,
        r + problem.A.T @ y - problem.a,
        w * r - mu,
        problem._Bt @ u + problem.A @ w,
    ))


def newton_step(problem: IpProblem, state: IpState) -> Step:
    """Newton direction for the relaxed KKT system at ``state``.

    Raises ``FactorizationError`` if ``T`` or ``Omega`` is numerically singular.
    """
    _check_state(problem, state)
    p = problem.penalty
    A, a = problem.A, problem.a
    B, Bt, M, C, c = p.B, problem._Bt, p.M, p.C, p.c
    y, u, q, s, w, r, mu = state.y, state.u, state.q, state.s, state.w, state.r, state.mu

    Ct = problem._Ct
    Ctu = Ct @ u
    Aty = A.T @ y
    r1 = -s - Ctu + c
    r2 = mu + q * (Ctu - c)
    r3 = -(B @ y - M @ u - C @ q + p.b) + C @ (r2 / s)
    r4 = -(r + Aty - a)
    r5 = mu + w * (Aty - a)

    Tfac = problem._assembler.factor(q / s)
    TinvB = Tfac.solve(to_dense(B)) if not sp.issparse(B) else Tfac.as_sparse() @ B
    Omega = Bt @ TinvB
    if sp.issparse(Omega):
        Omega = Omega.toarray()
    if A.shape[1]:
        Omega = Omega + (A * (w / r)) @ A.T
    r6 = -(Bt @ u + A @ w) + Bt @ Tfac.solve(r3) - A @ (r5 / r)

    try:
        cho = scipy.linalg.cho_factor(Omega, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("Omega is not positive definite") from exc
    piv = np.diag(cho[0]) ** 2
    if not np.all(piv > PIVOT_RTOL * np.diag(Omega)):
        raise FactorizationError("Omega pivot below tolerance")
    dy = scipy.linalg.cho_solve(cho, r6, check_finite=False)

    Atdy = A.T @ dy
    dw = (r5 + w * Atdy) / r
    dr = r4 - Atdy
    du = Tfac.solve(-r3 + B @ dy)
    Ctdu = Ct @ du
    dq = (r2 + q * Ctdu) / s
    ds = r1 - Ctdu
    return Step(ds=ds, dq=dq, du=np.asarray(du).ravel(), dr=dr, dw=dw, dy=dy)


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def step_length(state: IpState, step: Step, tau: float) -> float:
    """Fraction-to-boundary step, capped at 1."""
    amax = min(
        _max_step(state.s, step.ds),
        _max_step(state.q, step.dq),
        _max_step(state.w, step.dw),
        _max_step(state.r, step.dr),
    )
    return min(1.0, tau * amax)


# -- driver --------------------------------------------------------------------


def solve(problem: IpProblem, opts: SolverOptions = SolverOptions(), *, validated: bool = False,
          trace=None, callback=None) -> SolveReport:
    """Run damped Newton iterations on the relaxed KKT system.

    Converged when the barrier parameter is below ``tol * 1e-2`` and the
    unrelaxed residual is below ``tol`` in the infinity norm.

    Parameters
    ----------
    problem : IpProblem
    opts : SolverOptions
    validated : bool
        Skip ``check`` when the caller has already validated the problem.
    trace : file-like, optional
        Receives one line per iteration; defaults to stderr when
        ``opts.verbose`` is set.
    callback : callable, optional
        Called as ``callback(iteration, state)`` after every accepted step.
    """
    if not validated:
        check(problem)
    if trace is None and opts.verbose:
        trace = sys.stderr
    p = problem.penalty
    n_comp = p.n_constraints + problem.n_ineq
    st = IpState.initial(problem)
    status, message = Status.MAX_ITERATIONS, ""
    it = 0
    while True:
        res0 = float(np.abs(kkt_residual(problem, st, 0.0)).max(initial=0.0))
        if st.mu <= opts.tol * 1e-2 and res0 <= opts.tol:
            status = Status.CONVERGED
            break
        if it >= opts.max_iter:
            break
        try:
            step = newton_step(problem, st)
        except FactorizationError as exc:
            status, message = Status.NUMERICAL_FAILURE, str(exc)
            break
        alpha = step_length(st, step, opts.tau) if n_comp else 1.0
        fmu = np.abs(kkt_residual(problem, st)).max(initial=0.0)
        best, best_norm, taken = None, np.inf, alpha
        for _ in range(opts.max_halvings + 1):
            trial = st.moved(step, alpha)
            norm = np.abs(kkt_residual(problem, trial)).max(initial=0.0)
            if norm < best_norm:
                best, best_norm, taken = trial, norm, alpha
            if norm < fmu:
                break
            alpha *= 0.5
        st = best
        if not np.all(np.isfinite(st.y)):
            status, message = Status.NUMERICAL_FAILURE, "non-finite iterate"
            break
        it += 1
        if n_comp:
            st.mu = opts.sigma * st.complementarity() / n_comp
        if callback is not None:
            callback(it, st)
        if trace is not None:
            print(f"iter={it} mu={st.mu:.6e} res0={res0:.6e} step={taken:.6e}", file=trace)

    res0 = float(np.abs(kkt_residual(problem, st, 0.0)).max(initial=0.0))
    try:
        obj = evaluate(p, st.y)
    except ArithmeticError:
        obj = np.inf
    return SolveReport(y_star=st.y.copy(), objective=obj, kkt_residual_inf=res0,
                       iterations=it, status=status, state=st, message=message)
