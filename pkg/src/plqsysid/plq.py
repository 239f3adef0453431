"""Piecewise linear-quadratic penalties in dual form.

A PLQ function is stored as the data of

    rho(y) = sup_{u : C^T u <= c}  <u, b + B y> - 1/2 u^T M u

with ``M`` and ``C`` sparse and ``B`` sparse or dense.  Built-in penalties
carry a vectorized closed-form evaluator; combinators propagate it, so the
dual QP is only needed for hand-built penalties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import (
    DimensionError,
    InvalidParameterError,
    RankDeficiencyError,
    UnboundedPenaltyError,
)
from .linalg import BlockStructure, as_csr, to_dense


# -- closed-form evaluators ---------------------------------------------------
# Each takes y with shape (N,) or (G, N) and returns a scalar or (G,) array.
# They are small classes rather than closures so penalties stay picklable.


class _Builtin:
    def __init__(self, kind: str, **params):
        self.kind = kind
        self.params = params

    def __call__(self, y):
        p = self.params
        if self.kind == "l2":
            v = 0.5 * y**2
        elif self.kind == "l1":
            v = np.abs(y)
        elif self.kind == "huber":
            k = p["kappa"]
            a = np.abs(y)
            v = np.where(a <= k, 0.5 * y**2, k * a - 0.5 * k**2)
        elif self.kind == "vapnik":
            e = p["epsilon"]
            v = np.maximum(y - e, 0.0) + np.maximum(-y - e, 0.0)
        elif self.kind == "elastic_net":
            v = 0.5 * y**2 + p["lam"] * np.abs(y)
        elif self.kind == "soft_insensitive":
            e, k = p["epsilon"], p["kappa"]
            v = _soft_hinge(y - e, k) + _soft_hinge(-y - e, k)
        elif self.kind == "hinge":
            v = np.maximum(y, 0.0)
        else:  # pragma: no cover
            raise ValueError(self.kind)
        return v.sum(axis=-1)


def _soft_hinge(v, kappa):
    # sup_{u in [0, kappa]} u v - u^2 / 2
    return np.where(v <= 0, 0.0, np.where(v <= kappa, 0.5 * v**2, kappa * v - 0.5 * kappa**2))


class _Sum:
    def __init__(self, f1, f2, n1: int):
        self.f1, self.f2, self.n1 = f1, f2, n1

    def __call__(self, y):
        return self.f1(y[..., : self.n1]) + self.f2(y[..., self.n1 :])


class _Affine:
    def __init__(self, f, F, shift):
        self.f, self.F, self.shift = f, F, shift

    def __call__(self, y):
        if sp.issparse(self.F):
            arg = (self.F @ y.T).T if y.ndim == 2 else self.F @ y
        else:
            arg = y @ self.F.T
        return self.f(arg + self.shift)


class _Scaled:
    def __init__(self, f, gamma: float):
        self.f, self.gamma = f, gamma

    def __call__(self, y):
        return self.gamma * self.f(y)


# -- the penalty type ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlqPenalty:
    """Dual data ``(M, b, B, C, c)`` of a PLQ penalty.

    Attributes
    ----------
    M : sparse (K, K)
        Symmetric positive semidefinite curvature of the dual objective.
    b : ndarray (K,)
        Affine offset.
    B : sparse or ndarray (K, N)
        Injective linear map from the primal variable.
    C : sparse (K, L)
    c : ndarray (L,)
        Polyhedral dual set ``U = {u : C^T u <= c}``; ``L = 0`` means ``U = R^K``.
    closed_form : callable, optional
        Vectorized evaluator used instead of the dual QP when present.
    """

    M: sp.csr_matrix
    b: np.ndarray
    B: object
    C: sp.csr_matrix
    c: np.ndarray
    closed_form: Optional[Callable] = field(default=None, repr=False)
    name: str = "plq"

    def __post_init__(self):
        M = as_csr(self.M)
        C = as_csr(self.C)
        B = self.B if sp.issparse(self.B) else np.atleast_2d(np.asarray(self.B, dtype=float))
        if sp.issparse(B):
            B = B.tocsr()
        b = np.asarray(self.b, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        K = M.shape[0]
        if M.shape != (K, K):
            raise DimensionError(f"M must be square, got {M.shape}")
        if B.shape[0] != K or b.size != K or C.shape[0] != K:
            raise DimensionError(
                f"inconsistent dual dimension: M {M.shape}, B {B.shape}, b {b.shape}, C {C.shape}"
            )
        if C.shape[1] != c.size:
            raise DimensionError(f"C has {C.shape[1]} columns but c has {c.size} entries")
        if np.any(c < 0):
            raise InvalidParameterError("c must be nonnegative so that 0 lies in U")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def dual_dim(self) -> int:
        return self.M.shape[0]

    @property
    def primal_dim(self) -> int:
        return self.B.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.C.shape[1]

    @cached_property
    def block_structure(self) -> BlockStructure:
        return BlockStructure.for_penalty(self.M, self.C)

    def __call__(self, y) -> float:
        return evaluate(self, y)

    def describe(self) -> str:
        """Text rendering of the block structure, for test diagnostics."""
        bs = self.block_structure
        blocks = ", ".join(f"{idx.shape[0]}x[{k}]" for k, idx in sorted(bs.groups.items()))
        lines = [
            f"PlqPenalty<{self.name}> K={self.dual_dim} N={self.primal_dim} L={self.n_constraints}",
            f"  M: nnz={self.M.nnz}  blocks: {blocks or 'none'}",
            f"  B: {'sparse' if sp.issparse(self.B) else 'dense'} {self.B.shape}"
            + (f" nnz={self.B.nnz}" if sp.issparse(self.B) else ""),
            f"  b: min={self.b.min(initial=0):.4g} max={self.b.max(initial=0):.4g}",
            f"  C: nnz={self.C.nnz}  c: min={self.c.min(initial=0):.4g} max={self.c.max(initial=0):.4g}",
        ]
        return "\n".join(lines)


# -- constructors -------------------------------------------------------------


def _check_dim(dim):
    if int(dim) != dim or dim < 1:
        raise InvalidParameterError(f"dimension must be a positive integer, got {dim}")
    return int(dim)


def _interval_rows(lo, hi):
    """Encode ``lo <= u_i <= hi`` as ``C^T u <= c`` (two rows per coordinate).

    ``lo``/``hi`` are per-coordinate arrays with ``nan`` meaning unbounded.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    K = lo.size
    up = np.flatnonzero(~np.isnan(hi))
    dn = np.flatnonzero(~np.isnan(lo))
    L = up.size + dn.size
    rows = np.concatenate((up, dn))
    cols = np.arange(L)
    vals = np.concatenate((np.ones(up.size), -np.ones(dn.size)))
    C = sp.csr_matrix((vals, (rows, cols)), shape=(K, L))
    c = np.concatenate((hi[up], -lo[dn])) + 0.0  # no negative zeros
    return C, c


def make_l2(dim: int) -> PlqPenalty:
    """``1/2 ||y||^2``."""
    d = _check_dim(dim)
    eye = sp.identity(d, format="csr")
    return PlqPenalty(eye, np.zeros(d), eye, sp.csr_matrix((d, 0)), np.zeros(0),
                      _Builtin("l2"), "l2")


def make_l1(dim: int) -> PlqPenalty:
    """``||y||_1`` with ``U = [-1, 1]^dim``."""
    d = _check_dim(dim)
    C, c = _interval_rows(-np.ones(d), np.ones(d))
    eye = sp.identity(d, format="csr")
    return PlqPenalty(sp.csr_matrix((d, d)), np.zeros(d), eye, C, c, _Builtin("l1"), "l1")


def make_huber(dim: int, kappa: float) -> PlqPenalty:
    d = _check_dim(dim)
    if not kappa > 0:
        raise InvalidParameterError(f"Huber threshold must be positive, got {kappa}")
    C, c = _interval_rows(-kappa * np.ones(d), kappa * np.ones(d))
    eye = sp.identity(d, format="csr")
    return PlqPenalty(eye, np.zeros(d), eye, C, c, _Builtin("huber", kappa=float(kappa)), "huber")


def _two_sided(d):
    # rows (2i, 2i+1) of B hold (+1, -1) in column i
    rows = np.arange(2 * d)
    cols = np.repeat(np.arange(d), 2)
    vals = np.tile([1.0, -1.0], d)
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * d, d))


def make_vapnik(dim: int, epsilon: float) -> PlqPenalty:
    """Epsilon-insensitive loss ``(y - eps)_+ + (-y - eps)_+``."""
    d = _check_dim(dim)
    if not epsilon >= 0:
        raise InvalidParameterError(f"insensitivity width must be nonnegative, got {epsilon}")
    K = 2 * d
    C, c = _interval_rows(np.zeros(K), np.ones(K))
    return PlqPenalty(sp.csr_matrix((K, K)), -epsilon * np.ones(K), _two_sided(d), C, c,
                      _Builtin("vapnik", epsilon=float(epsilon)), "vapnik")


def make_elastic_net(dim: int, lam: float) -> PlqPenalty:
    """``1/2 y^2 + lam |y|`` per coordinate; dual pairs ``(u1, u2)`` with ``u2 in [-lam, lam]``."""
    d = _check_dim(dim)
    if not lam > 0:
        raise InvalidParameterError(f"elastic-net weight must be positive, got {lam}")
    K = 2 * d
    M = sp.diags(np.tile([1.0, 0.0], d), format="csr")
    rows = np.arange(K)
    B = sp.csr_matrix((np.ones(K), (rows, np.repeat(np.arange(d), 2))), shape=(K, d))
    lo = np.tile([np.nan, -lam], d)
    hi = np.tile([np.nan, lam], d)
    C, c = _interval_rows(lo, hi)
    return PlqPenalty(M, np.zeros(K), B, C, c, _Builtin("elastic_net", lam=float(lam)),
                      "elastic_net")


def make_soft_insensitive(dim: int, epsilon: float, kappa: float) -> PlqPenalty:
    """Sum of two soft hinges: zero on ``[-eps, eps]``, quadratic then linear outside."""
    d = _check_dim(dim)
    if not epsilon >= 0:
        raise InvalidParameterError(f"insensitivity width must be nonnegative, got {epsilon}")
    if not kappa > 0:
        raise InvalidParameterError(f"soft-hinge cap must be positive, got {kappa}")
    K = 2 * d
    C, c = _interval_rows(np.zeros(K), kappa * np.ones(K))
    return PlqPenalty(sp.identity(K, format="csr"), -epsilon * np.ones(K), _two_sided(d), C, c,
                      _Builtin("soft_insensitive", epsilon=float(epsilon), kappa=float(kappa)),
                      "soft_insensitive")


def make_hinge(dim: int) -> PlqPenalty:
    """``max(0, y)`` with ``U = [0, 1]``."""
    d = _check_dim(dim)
    C, c = _interval_rows(np.zeros(d), np.ones(d))
    eye = sp.identity(d, format="csr")
    return PlqPenalty(sp.csr_matrix((d, d)), np.zeros(d), eye, C, c, _Builtin("hinge"), "hinge")


_REGISTRY = {
    "l2": (make_l2, ()),
    "l1": (make_l1, ()),
    "huber": (make_huber, ("kappa",)),
    "vapnik": (make_vapnik, ("epsilon",)),
    "enet": (make_elastic_net, ("lam",)),
    "elastic_net": (make_elastic_net, ("lam",)),
    "sil": (make_soft_insensitive, ("epsilon", "kappa")),
    "soft_insensitive": (make_soft_insensitive, ("epsilon", "kappa")),
    "hinge": (make_hinge, ()),
}

DEFAULT_PARAMS = {"kappa": 1.0, "epsilon": 0.5, "lam": 1.0}
PENALTY_NAMES = ("l2", "l1", "huber", "vapnik", "enet", "sil", "hinge")


def make_penalty(name: str, dim: int, **params) -> PlqPenalty:
    """Build a built-in penalty by name (``l2, l1, huber, vapnik, enet, sil, hinge``).

    Missing parameters take the values in ``DEFAULT_PARAMS``; ``lambda`` is
    accepted as an alias of ``lam``.
    """
    try:
        factory, names = _REGISTRY[name]
    except KeyError:
        raise InvalidParameterError(f"unknown penalty {name!r}; choose from {PENALTY_NAMES}") from None
    if "lambda" in params:
        params["lam"] = params.pop("lambda")
    unknown = set(params) - set(names)
    if unknown:
        raise InvalidParameterError(f"penalty {name!r} takes no parameter(s) {sorted(unknown)}")
    kwargs = {k: float(params.get(k, DEFAULT_PARAMS[k])) for k in names}
    return factory(dim, **kwargs)


# -- combinators --------------------------------------------------------------


def _block_diag_B(B1, B2):
    if sp.issparse(B1) and sp.issparse(B2):
        return sp.block_diag((B1, B2), format="csr")
    return scipy.linalg.block_diag(to_dense(B1), to_dense(B2))


def direct_sum(p1: PlqPenalty, p2: PlqPenalty) -> PlqPenalty:
    """Penalty of ``(y1, y2) -> p1(y1) + p2(y2)``."""
    f = None
    if p1.closed_form is not None and p2.closed_form is not None:
        f = _Sum(p1.closed_form, p2.closed_form, p1.primal_dim)
    return PlqPenalty(
        sp.block_diag((p1.M, p2.M), format="csr"),
        np.concatenate((p1.b, p2.b)),
        _block_diag_B(p1.B, p2.B),
        sp.block_diag((p1.C, p2.C), format="csr"),
        np.concatenate((p1.c, p2.c)),
        f,
        f"{p1.name}+{p2.name}",
    )


def _rank(X) -> int:
    X = to_dense(X)
    if X.size == 0:
        return 0
    return int(np.linalg.matrix_rank(X))


def precompose_affine(p: PlqPenalty, F, f=None) -> PlqPenalty:
    """Penalty of ``y -> p(F y + f)``; raises if ``B F`` is not injective."""
    F = F if sp.issparse(F) else np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[0] != p.primal_dim:
        raise DimensionError(f"F has {F.shape[0]} rows, penalty expects {p.primal_dim}")
    shift = np.zeros(F.shape[0]) if f is None else np.asarray(f, dtype=float).ravel()
    if shift.size != F.shape[0]:
        raise DimensionError("shift vector does not match F")
    BF = p.B @ F
    if sp.issparse(BF):
        BF = BF.tocsr()
    if _rank(BF) < F.shape[1]:
        raise RankDeficiencyError("B F has a nontrivial nullspace")
    closed = None if p.closed_form is None else _Affine(p.closed_form, F, shift)
    return PlqPenalty(p.M, p.b + p.B @ shift, BF, p.C, p.c, closed, f"{p.name}(Fy+f)")


def scale_penalty(p: PlqPenalty, gamma: float) -> PlqPenalty:
    """Penalty of ``gamma * p`` (``c -> gamma c``, ``M -> M / gamma``)."""
    if not gamma > 0:
        raise InvalidParameterError(f"scale must be positive, got {gamma}")
    closed = None if p.closed_form is None else _Scaled(p.closed_form, float(gamma))
    return PlqPenalty(p.M / gamma, p.b, p.B, p.C, gamma * p.c, closed, f"{gamma:g}*{p.name}")


# -- evaluation ---------------------------------------------------------------


def evaluate(p: PlqPenalty, y, method: str = "auto") -> float:
    """Value of the penalty at ``y``.

    ``method`` is ``"auto"`` (closed form when available), ``"closed"`` or
    ``"qp"`` (solve the dual concave QP).
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != p.primal_dim:
        raise DimensionError(f"expected a vector of length {p.primal_dim}, got {y.size}")
    if method == "closed" or (method == "auto" and p.closed_form is not None):
        if p.closed_form is None:
            raise ValueError("penalty has no closed form")
        return float(p.closed_form(y))
    if method not in ("auto", "qp"):
        raise ValueError(f"unknown method {method!r}")
    v = p.b + p.B @ y
    return dual_sup(p, np.asarray(v).ravel())[0]


def _check_bounded(p: PlqPenalty, v: np.ndarray):
    # sup = +inf iff some d in Null(M) with C^T d <= 0 has <d, v> > 0
    M = to_dense(p.M)
    w, V = np.linalg.eigh(M) if M.size else (np.zeros(0), np.zeros((0, 0)))
    tol = 1e-12 * max(1.0, np.abs(w).max(initial=0.0))
    Z = V[:, w <= tol]
    if Z.shape[1] == 0:
        return
    CtZ = to_dense(p.C.T @ Z) if p.n_constraints else np.zeros((0, Z.shape[1]))
    res = linprog(-(Z.T @ v), A_ub=CtZ if CtZ.size else None,
                  b_ub=np.zeros(CtZ.shape[0]) if CtZ.size else None,
                  bounds=[(-1, 1)] * Z.shape[1], method="highs")
    if res.status == 0 and -res.fun > 1e-9 * max(1.0, np.linalg.norm(v)):
        raise UnboundedPenaltyError("penalty is +inf at this point (outside its domain)")


def dual_sup(p: PlqPenalty, v: np.ndarray, tol: float = 1e-10, max_iter: int = 100):
    """Maximize ``<u, v> - 1/2 u^T M u`` over ``C^T u <= c`` by a primal-dual IP.

    Returns ``(value, u)``.  Raises ``UnboundedPenaltyError`` when the
    supremum is infinite.
    """
    _check_bounded(p, v)
    K, L = p.dual_dim, p.n_constraints
    bs = p.block_structure
    M, C, c = p.M, p.C, p.c
    if L == 0:
        try:
            u = bs.factor(M).solve(v)
        except np.linalg.LinAlgError:
            u = np.linalg.lstsq(to_dense(M), v, rcond=None)[0]
        return float(v @ u - 0.5 * u @ (M @ u)), u

    u = np.zeros(K)
    s = np.ones(L)
    q = np.ones(L)
    mu = 1.0
    for _ in range(max_iter):
        Ctu = C.T @ u
        r_prim = c - Ctu - s
        r_dual = v - M @ u - C @ q
        gap = q @ s
        if max(np.abs(r_prim).max(), np.abs(r_dual).max(initial=0.0)) <= tol and gap <= tol:
            break
        r2 = mu + q * (Ctu - c)
        r3 = -r_dual + C @ (r2 / s)
        T = M + C @ sp.diags(q / s) @ C.T
        du = bs.factor(T).solve(-r3)
        dq = (r2 + q * (C.T @ du)) / s
        ds = r_prim - C.T @ du
        step = 1.0
        for x, dx in ((s, ds), (q, dq)):
            neg = dx < 0
            if np.any(neg):
                step = min(step, 0.995 * np.min(-x[neg] / dx[neg]))
        u, s, q = u + step * du, s + step * ds, q + step * dq
        mu = 0.1 * (q @ s) / L
    value = float(v @ u - 0.5 * u @ (M @ u))
    return value, u
