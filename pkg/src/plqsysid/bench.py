"""Monte Carlo comparison of stable spline estimators under outlier noise.

Each run draws a random stable system, simulates 400 input/output pairs
contaminated by a two-component Gaussian mixture, runs every estimator and
scores it with the impulse-response fit measure.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .errors import InvalidParameterError, PlqSysIdError
from .estimator import (
    ALPHA_GRID,
    build_regressor,
    cv_tune_plq,
    estimate_ss_l2_ml,
    gamma_grid_around,
)
from .solver import SolverOptions


@dataclass(frozen=True)
class RandomSystemSpec:
    ct_order: int = 30
    pole_radius_bound: float = 0.95
    bandwidth_multiplier: float = 3.0
    length: int = 200
    max_draws: int = 1000


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian mixture ``(1-f) N(0, s2) + f N(0, ratio * s2)``.

    ``s2`` is the noiseless output variance divided by a ``Uniform[snr_low,
    snr_high]`` draw unless ``sigma2`` fixes it (``0`` gives noiseless data).
    """

    outlier_fraction: float = 0.2
    outlier_variance_ratio: float = 100.0
    snr_low: float = 1.0
    snr_high: float = 10.0
    sigma2: Optional[float] = None


@dataclass
class GeneratedSystem:
    """Accepted system; ``(A, B, C)`` is its discrete modal realization scaled like ``g``."""

    g: np.ndarray
    poles: np.ndarray
    sample_time: float
    bandwidth: float
    draws: int
    A: np.ndarray = field(repr=False, default=None)
    B: np.ndarray = field(repr=False, default=None)
    C: np.ndarray = field(repr=False, default=None)


@dataclass
class SimulatedData:
    u: np.ndarray
    y: np.ndarray
    y_clean: np.ndarray
    sigma2: float
    outliers: np.ndarray


class GeneratorError(PlqSysIdError, RuntimeError):
    pass


# -- system generation ----------------------------------------------------------------


def _random_modal_system(rng: np.random.Generator, order: int):
    k = order // 2
    re = -(10.0 ** rng.uniform(-1.0, 1.0, k))
    im = 10.0 ** rng.uniform(-1.0, 1.0, k)
    blocks = [np.array([[a, b], [-b, a]]) for a, b in zip(re, im)]
    if order % 2:
        blocks.append(np.array([[-(10.0 ** rng.uniform(-1.0, 1.0))]]))
    A = scipy.linalg.block_diag(*blocks)
    B = rng.standard_normal(order)
    C = rng.standard_normal(order)
    return A, B, C


def bandwidth(A, B, C, n_grid: int = 2048, wmin: float = 1e-4, wmax: float = 1e4
              ) -> Optional[float]:
    """First frequency (rad/s) where the gain is 3 dB below the DC gain.

    Located on a log-spaced grid and refined by bisection in log-frequency.
    Returns ``None`` if the gain never drops that far on the grid.
    """
    poles, V = np.linalg.eig(A)
    residues = (C @ V) * np.linalg.solve(V, B)

    def gain(w):
        w = np.atleast_1d(w)
        return np.abs((residues[None, :] / (1j * w[:, None] - poles[None, :])).sum(axis=1))

    dc = gain(0.0)[0]
    level = dc * 10.0 ** (-3.0 / 20.0)
    w = np.logspace(np.log10(wmin), np.log10(wmax), n_grid)
    below = np.flatnonzero(gain(w) < level)
    if dc == 0 or below.size == 0 or below[0] == 0:
        return None
    lo, hi = np.log(w[below[0] - 1]), np.log(w[below[0]])
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gain(np.exp(mid))[0] < level:
            hi = mid
        else:
            lo = mid
    return float(np.exp(hi))


def zoh(A, B, Ts: float):
    """Zero-order-hold discretization through the augmented matrix exponential."""
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = B
    E = scipy.linalg.expm(aug * Ts)
    return E[:n, :n], E[:n, n]


def generate_system(spec: RandomSystemSpec = RandomSystemSpec(), seed=None) -> GeneratedSystem:
    """Random stable SISO system sampled by ZOH; rejection on pole radius.

    Returns impulse-response samples ``g_1 .. g_length`` (the direct
    feedthrough ``g_0`` is zero), scaled to unit energy.
    """
    rng = np.random.default_rng(seed)
    for draw in range(1, spec.max_draws + 1):
        A, B, C = _random_modal_system(rng, spec.ct_order)
        bw = bandwidth(A, B, C)
        if bw is None:
            continue
        Ts = 1.0 / (bw * spec.bandwidth_multiplier * 2.0 * np.pi)
        Ad, Bd = zoh(A, B, Ts)
        poles = np.linalg.eigvals(Ad)
        if np.abs(poles).max() > spec.pole_radius_bound:
            continue
        g = np.empty(spec.length)
        x = Bd
        for k in range(spec.length):
            g[k] = C @ x
            x = Ad @ x
        norm = np.linalg.norm(g)
        if norm == 0:
            continue
        return GeneratedSystem(g=g / norm, poles=poles, sample_time=Ts, bandwidth=bw, draws=draw,
                               A=Ad, B=Bd, C=C / norm)
    raise GeneratorError(f"no acceptable system after {spec.max_draws} draws")


# -- data simulation ------------------------------------------------------------------


def simulate(g, noise: NoiseModel = NoiseModel(), seed=None, n_pairs: int = 400,
             horizon: Optional[int] = None) -> SimulatedData:
    """Unit-variance white input through ``g`` (one-sample delay) plus mixture noise.

    The first ``len(g)`` samples are discarded so the retained outputs do not
    depend on the zero initial state.
    """
    g = np.asarray(g, dtype=float).ravel()
    washout = g.size
    horizon = n_pairs + washout if horizon is None else int(horizon)
    if horizon < n_pairs + washout:
        raise InvalidParameterError(f"horizon must be at least {n_pairs + washout}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(horizon)
    y_clean = np.convolve(u, np.concatenate(([0.0], g)))[:horizon]
    u, y_clean = u[-n_pairs:], y_clean[-n_pairs:]
    snr = rng.uniform(noise.snr_low, noise.snr_high)
    sigma2 = float(np.var(y_clean) / snr) if noise.sigma2 is None else float(noise.sigma2)
    outliers = rng.random(n_pairs) < noise.outlier_fraction
    scale = np.where(outliers, np.sqrt(noise.outlier_variance_ratio), 1.0) * np.sqrt(sigma2)
    e = rng.standard_normal(n_pairs) * scale
    return SimulatedData(u=u, y=y_clean + e, y_clean=y_clean, sigma2=sigma2, outliers=outliers)


def fit_measure(g_true, g_est, length: int = 100) -> float:
    """``100 (1 - ||g - g_hat|| / ||g - mean(g)||)`` over the first ``length`` taps."""

    def clip(v):
        v = np.asarray(v, dtype=float).ravel()[:length]
        return np.pad(v, (0, length - v.size))

    g, gh = clip(g_true), clip(g_est)
    den = np.linalg.norm(g - g.mean())
    if den == 0:
        raise InvalidParameterError("fit measure undefined for a constant true response")
    return float(100.0 * (1.0 - np.linalg.norm(g - gh) / den))


# -- Monte Carlo ----------------------------------------------------------------------


ESTIMATORS = ("ss_l2_ml", "ss_plq")


@dataclass(frozen=True)
class MonteCarloConfig:
    n: int = 100
    delay: int = 1
    n_pairs: int = 400
    estimators: tuple = ESTIMATORS
    loss: str = "l1"
    loss_params: tuple = ()
    alpha_grid: tuple = ALPHA_GRID
    gamma_points: int = 20
    gamma_span: float = 100.0
    system: RandomSystemSpec = RandomSystemSpec()
    noise: NoiseModel = NoiseModel()
    solver: SolverOptions = SolverOptions()

    def label(self, estimator: str) -> str:
        return f"ss_{self.loss}_cv" if estimator == "ss_plq" else estimator


@dataclass
class EstimatorResult:
    fit: float
    alpha: float = float("nan")
    gamma: float = float("nan")
    iterations: int = 0
    wall_ms: float = float("nan")
    error: str = ""


@dataclass
class MonteCarloRun:
    run: int
    g_true: np.ndarray
    results: dict = field(default_factory=dict)

    def fits(self) -> dict:
        return {k: v.fit for k, v in self.results.items()}


def run_seeds(master_seed: int, run: int):
    """Independent (system, data) seed sequences for one run."""
    return np.random.SeedSequence(master_seed, spawn_key=(run,)).spawn(2)


def run_single(run: int, master_seed: int, config: MonteCarloConfig) -> MonteCarloRun:
    sys_seed, sim_seed = run_seeds(master_seed, run)
    system = generate_system(config.system, sys_seed)
    data = simulate(system.g, config.noise, sim_seed, n_pairs=config.n_pairs)
    out = MonteCarloRun(run=run, g_true=system.g[: config.n].copy())

    reg = None
    ml_est = None
    try:
        reg = build_regressor(data.u, data.y, config.n, config.delay)
    except PlqSysIdError as exc:
        for est in config.estimators:
            out.results[config.label(est)] = EstimatorResult(fit=float("nan"), error=str(exc))
        return out

    for est in config.estimators:
        label = config.label(est)
        t0 = time.perf_counter()
        try:
            if est == "ss_l2_ml":
                ml_est = ml_est or estimate_ss_l2_ml(reg, config.alpha_grid)
                res = EstimatorResult(fit=fit_measure(system.g, ml_est.x_hat),
                                      alpha=ml_est.alpha, gamma=ml_est.gamma)
            elif est == "ss_plq":
                ml_est = ml_est or estimate_ss_l2_ml(reg, config.alpha_grid)
                grid = gamma_grid_around(ml_est.gamma, config.gamma_points, config.gamma_span)
                cv = cv_tune_plq(None, None, config.n, config.delay, config.alpha_grid, grid,
                                 loss=config.loss, loss_params=dict(config.loss_params),
                                 opts=config.solver, data=reg)
                res = EstimatorResult(fit=fit_measure(system.g, cv.estimate.x_hat),
                                      alpha=cv.alpha, gamma=cv.gamma,
                                      iterations=cv.estimate.iterations)
            else:
                raise InvalidParameterError(f"unknown estimator {est!r}")
        except (PlqSysIdError, np.linalg.LinAlgError) as exc:
            res = EstimatorResult(fit=float("nan"), error=str(exc))
        res.wall_ms = 1e3 * (time.perf_counter() - t0)
        out.results[label] = res
    return out


def run_monte_carlo(n_runs: int, master_seed: int = 0,
                    config: MonteCarloConfig = MonteCarloConfig(), workers: int = 1,
                    progress=None) -> list:
    """Run ``n_runs`` independent runs; the result list is in run order.

    Each run's random streams depend only on ``(master_seed, run)``, so the
    table is the same for any ``workers`` count.
    """
    if n_runs < 1:
        raise InvalidParameterError("n_runs must be at least 1")
    for est in config.estimators:
        if est not in ESTIMATORS:
            raise InvalidParameterError(f"unknown estimator {est!r}; choose from {ESTIMATORS}")
    runs = range(n_runs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_single, runs, [master_seed] * n_runs,
                                    [config] * n_runs))
    else:
        results = []
        for r in runs:
            results.append(run_single(r, master_seed, config))
            if progress is not None:
                progress(results[-1])
    return results


# -- summaries ------------------------------------------------------------------------


QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)


def summarize(table: Sequence[MonteCarloRun]) -> dict:
    """Per-estimator mean, median, quantiles and whisker outliers.

    Quantiles interpolate linearly between order statistics; outliers are
    the fits outside the 10-90% whiskers.  With two estimators a paired
    two-sided sign test on the per-run differences is included.
    """
    if not table:
        raise InvalidParameterError("cannot summarize an empty table")
    labels = list(table[0].results)
    summary = {"runs": len(table), "estimators": {}}
    for label in labels:
        fits = np.array([r.results[label].fit for r in table], dtype=float)
        ok = fits[np.isfinite(fits)]
        entry = {"n": int(ok.size), "missing": int(fits.size - ok.size)}
        if ok.size:
            q = np.quantile(ok, QUANTILES)
            entry.update(mean=float(ok.mean()), median=float(q[2]), q10=float(q[0]),
                         q25=float(q[1]), q75=float(q[3]), q90=float(q[4]))
            entry["outliers"] = [float(v) for v in ok if v < q[0] or v > q[4]]
        summary["estimators"][label] = entry
    if len(labels) == 2:
        summary["sign_test"] = sign_test(table, labels[1], labels[0])
    return summary


def sign_test(table, first: str, second: str) -> dict:
    """Two-sided sign test of ``fit[first] - fit[second]`` over paired runs."""
    d = np.array([r.results[first].fit - r.results[second].fit for r in table], dtype=float)
    d = d[np.isfinite(d) & (d != 0)]
    wins = int((d > 0).sum())
    p = float(stats.binomtest(wins, d.size, 0.5).pvalue) if d.size else 1.0
    return {"first": first, "second": second, "pairs": int(d.size), "first_wins": wins,
            "median_difference": float(np.median(d)) if d.size else 0.0, "p_value": p}


RUN_COLUMNS = ("run", "estimator", "fit", "alpha", "gamma", "iterations", "wall_ms")


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if not np.isfinite(x) else format(x, ".17g")


def runs_csv(table: Sequence[MonteCarloRun], timing: bool = False) -> str:
    """Per-run fits as CSV text; ``wall_ms`` is left blank unless ``timing``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for r in table:
        for label, res in r.results.items():
            w.writerow([r.run, label, _num(res.fit), _num(res.alpha), _num(res.gamma),
                        res.iterations, _num(res.wall_ms) if timing else ""])
    return buf.getvalue()


def summary_json(summary: dict, config: Optional[MonteCarloConfig] = None) -> str:
    doc = dict(summary)
    if config is not None:
        doc["config"] = asdict(config)
    return json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n"
