"""ROAMS: penalized mean-shift estimation with hard thresholding and BIC selection.

For a fixed threshold ``lam`` the fit alternates between

1. ``theta <- argmin robust_nll(theta, Gamma)`` (box-constrained),
2. a filter pass with zero gain at the currently shifted timepoints, and
3. hard thresholding: ``gamma_t = r_t`` when
   ``sqrt(log|S_t| + MD^2(r_t, S_t)) > lam``, else 0, followed by a clamp
   that keeps fewer than n/2 timepoints shifted.

:func:`roams_select` runs the classical fit, spans a grid of thresholds from
2 to the largest classical Mahalanobis residual, fits every grid point and
keeps the minimum-BIC (or target-proportion) solution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGridError, InputError, RoamsError
from .likelihood import (ShiftMatrix, _md2_logdet, classical_objective,
                         robust_filter, robust_nll, robust_objective)
from .optim import OptimResult, ThetaVector, minimize_box
from .report import FitReport, LambdaRow
from .ssm import FilterOutput, ObservationSeries, filter_pass

log = logging.getLogger(__name__)

LAMBDA_MIN = 2.0
DEFAULT_TOL = 1e-4
DEFAULT_MAX_OUTER = 50
DEFAULT_GRID_SIZE = 20


@dataclass(frozen=True)
class LambdaGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size < 1 or np.any(np.diff(v) <= 0):
            raise InputError("lambda grid must be strictly increasing")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values)

    @property
    def step(self) -> float:
        return float(self.values[1] - self.values[0]) if self.values.size > 1 else 0.0


def lambda_grid(lambda_max, J, lambda_min=LAMBDA_MIN) -> LambdaGrid:
    """``J`` equally spaced thresholds from ``lambda_min`` to ``lambda_max``."""
    if J < 2:
        raise InputError(f"grid size must be at least 2, got {J}")
    if not lambda_max > lambda_min:
        raise DegenerateGridError(lambda_max, lambda_min)
    return LambdaGrid(np.linspace(lambda_min, lambda_max, int(J)))


def max_mahalanobis(theta, obs: ObservationSeries, builder) -> float:
    """Largest Mahalanobis innovation of the plain Kalman filter at ``theta``."""
    values = np.asarray(getattr(theta, "values", theta), dtype=float)
    spec = builder.build(values, builder.initial_state(obs))
    filt = filter_pass(spec, obs)
    return float(np.nanmax(filt.mahalanobis))


def build_lambda_grid(classical, obs: ObservationSeries, builder, J,
                      lambda_min=LAMBDA_MIN) -> LambdaGrid:
    """Grid for a classical fit (a :class:`FitReport`, ThetaVector or array)."""
    theta = classical.theta if isinstance(classical, FitReport) else classical
    return lambda_grid(max_mahalanobis(theta, obs, builder), J, lambda_min)


def threshold_statistic(r, S) -> float:
    """``sqrt(max(0, log|S| + MD^2(r, S)))``."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    md2, logdet = _md2_logdet(r, np.atleast_2d(np.asarray(S, dtype=float)))
    return math.sqrt(max(0.0, logdet + md2))


def threshold_statistics(filt: FilterOutput) -> np.ndarray:
    """Vectorized :func:`threshold_statistic` over a filter pass (NaN where missing)."""
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.maximum(0.0, filt.logdet + filt.md2))


def hard_threshold(filt: FilterOutput, lam, n=None):
    """Thresholding step followed by the fewer-than-half clamp.

    Returns:
        ``(gamma, stats)``: the new (n, p) shift matrix, whose flagged rows are
        the filter residuals bitwise, and the per-timepoint statistics.
    """
    stats = threshold_statistics(filt)
    n = filt.n if n is None else n
    with np.errstate(invalid="ignore"):
        flag = (stats > lam) & ~filt.missing
    k = int(flag.sum())
    if 2 * k >= n:
        idx = np.flatnonzero(flag)
        # unflag the weakest first; ties broken by time
        order = idx[np.lexsort((idx, stats[idx]))]
        n_keep = (n - 1) // 2
        flag[order[:k - n_keep]] = False
    gamma = np.zeros_like(filt.resid)
    gamma[flag] = filt.resid[flag]
    return gamma, stats


def bic(robust_nll_value, k_flagged, n_effective) -> float:
    """``2 * robust_nll + k * log(n)``."""
    if n_effective < 1:
        raise InputError("n_effective must be positive")
    return 2.0 * float(robust_nll_value) + int(k_flagged) * math.log(n_effective)


@dataclass
class RoamsFixedLambdaResult:
    lam: float
    theta: ThetaVector
    gamma: ShiftMatrix
    k: int
    bic: float
    robust_nll: float
    inner_iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)
    theta_steps: list = field(default_factory=list)
    stop_reason: str = "converged"

    @property
    def flagged(self):
        return tuple(int(t) for t in self.gamma.support)


def roams_fit_fixed_lambda(obs: ObservationSeries, builder, init_theta: ThetaVector, lam,
                           tol=DEFAULT_TOL, max_outer=DEFAULT_MAX_OUTER, *,
                           first_step: OptimResult | None = None,
                           warm_start=True, memo: dict | None = None) -> RoamsFixedLambdaResult:
    """Alternate theta-steps and hard thresholding at a fixed ``lam``.

    Args:
        first_step: result of minimizing the classical likelihood from
            ``init_theta``; the first theta-step (all shifts zero) is exactly
            that problem, so passing it avoids a redundant optimization.
        warm_start: start each later theta-step from the previous estimate.
        memo: theta-step results keyed by the shift matrix, shared between
            calls (e.g. across a lambda grid on the same series).

    Theta-steps are memoized by the shift matrix, so the estimate after a
    step depends only on the shift matrix it was computed under.  The
    iteration is then a deterministic map on shift matrices: once a shift
    matrix recurs it cycles forever, and the loop stops early with
    ``stop_reason="cycle"`` (the best-BIC iterate over the cycle is already
    in the trace).

    The returned pair follows the alternation literally: the last theta-step
    together with the shift matrix it was computed under.  If ``max_outer``
    is reached the iterate with the smallest BIC is returned instead and
    ``converged`` is False.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    n, p = obs.n, obs.p
    n_eff = obs.n_complete
    state = builder.initial_state(obs)
    theta_prev = init_theta
    gamma_prev = np.zeros((n, p))
    solved = {} if memo is None else memo
    visited = set()
    stop = "max_outer"
    trace = []
    steps = []
    best = None
    converged = False
    k = 0
    for k in range(1, max_outer + 1):
        key = gamma_prev.tobytes()
        visited.add(key)
        if key in solved:
            res = solved[key]
        elif k == 1 and first_step is not None:
            res = first_step
        else:
            start = theta_prev if (warm_start and k > 1) else init_theta
            res = minimize_box(robust_objective(obs, builder, gamma_prev), start)
        solved[key] = res
        steps.append(res)
        theta_k = res.theta
        filt, _ = robust_filter(theta_k.values, gamma_prev, obs, builder, init_state=state)
        gamma_k, _ = hard_threshold(filt, lam, n)
        k_prev = int(np.any(gamma_prev != 0, axis=1).sum())
        cur_bic = bic(res.objective, k_prev, n_eff)
        trace.append(cur_bic)
        if best is None or cur_bic < best[0]:
            best = (cur_bic, theta_k, gamma_prev)
        d_theta = float(np.max(np.abs(theta_k.values - theta_prev.values)))
        d_gamma = float(np.max(np.abs(gamma_k - gamma_prev))) if n else 0.0
        log.debug("lambda=%.4g iter=%d k=%d dtheta=%.3g dgamma=%.3g bic=%.6g",
                  lam, k, k_prev, d_theta, d_gamma, cur_bic)
        if d_theta <= tol and d_gamma <= tol:
            converged = True
            stop = "converged"
            break
        new_key = gamma_k.tobytes()
        if new_key == key:
            # the next theta-step is the memoized one: both changes would be 0
            converged = True
            stop = "converged"
            break
        if new_key in visited:
            stop = "cycle"
            break
        theta_prev, gamma_prev = theta_k, gamma_k

    if converged:
        theta_hat, gamma_hat = theta_k, gamma_prev
    else:
        _, theta_hat, gamma_hat = best
    shift = ShiftMatrix(gamma_hat)
    value = robust_nll(theta_hat.values, gamma_hat, obs, builder, init_state=state)
    return RoamsFixedLambdaResult(float(lam), theta_hat, shift, shift.k,
                                  bic(value, shift.k, n_eff), value, k, converged,
                                  trace, steps, stop)


def _selection(selection):
    if selection in (None, "min_bic", "bic"):
        return None
    if isinstance(selection, (tuple, list)) and selection[0] == "target_proportion":
        pi = float(selection[1])
    else:
        pi = float(selection)
    if not 0.0 <= pi < 0.5:
        raise InputError(f"target proportion must lie in [0, 0.5), got {pi}")
    return pi


def classical_fit(obs: ObservationSeries, builder, init_theta=None) -> FitReport:
    """Gaussian maximum likelihood (missing rows handled by zero gain)."""
    init = builder.initial_theta(obs) if init_theta is None else init_theta
    res = minimize_box(classical_objective(obs, builder), init)
    return _plain_report("classical", obs, builder, init, res)


def _plain_report(method, obs, builder, init, res, flagged=(), extra_diag=None):
    diag = {"termination": res.termination_reason.value, "iterations": res.iterations,
            "evaluations": res.evaluations}
    diag.update(extra_diag or {})
    warnings = _phi_warning(res.theta)
    return FitReport(method=method, theta=res.theta, gamma=ShiftMatrix.zeros(obs.n, obs.p),
                     flagged=tuple(int(t) for t in flagged), objective=res.objective,
                     n=obs.n, n_complete=obs.n_complete, converged=res.converged,
                     model=builder.to_config(), init_theta=init, diagnostics=diag,
                     warnings=warnings)


def _phi_warning(theta):
    if "phi" in theta.names and theta["phi"] > 1.0 - 1e-6:
        return ["phi_at_upper_bound"]
    return []


def roams_select(obs: ObservationSeries, builder, init_theta=None, J=DEFAULT_GRID_SIZE,
                 tol=DEFAULT_TOL, max_outer=DEFAULT_MAX_OUTER, selection="min_bic", *,
                 lambdas=None, warm_start_lambda=False, classical: OptimResult | None = None,
                 keep_fits=False) -> FitReport:
    """Full ROAMS with tuning-parameter selection.

    Args:
        selection: ``"min_bic"`` or ``("target_proportion", pi)``; the latter
            picks the threshold whose flagged fraction of observed points is
            closest to ``pi``.
        lambdas: explicit thresholds overriding the automatic grid.
        warm_start_lambda: start each grid point from the previous one's
            estimate instead of ``init_theta``.
        classical: a precomputed classical optimization from ``init_theta``.
        keep_fits: attach every per-lambda result as ``report.fits``.

    Ties in the selection go to the smaller threshold.
    """
    pi = _selection(selection)
    init = builder.initial_theta(obs) if init_theta is None else init_theta
    if classical is None:
        classical = minimize_box(classical_objective(obs, builder), init)
    warnings = []
    lambda_max = max_mahalanobis(classical.theta, obs, builder)
    if lambdas is None:
        try:
            grid = lambda_grid(lambda_max, J)
        except DegenerateGridError:
            log.warning("degenerate lambda grid (lambda_max=%.4g); returning classical fit",
                        lambda_max)
            rep = _plain_report("roams", obs, builder, init, classical,
                                extra_diag={"lambda_max": lambda_max})
            rep.warnings.append("degenerate_grid")
            rep.bic = bic(classical.objective, 0, obs.n_complete)
            return rep
    else:
        grid = LambdaGrid(lambdas)

    rows, fits = [], []
    start, first = init, classical
    memo = {}
    for lam in grid:
        row = LambdaRow(float(lam))
        try:
            fit = roams_fit_fixed_lambda(obs, builder, start, lam, tol, max_outer,
                                         first_step=first,
                                         memo=None if warm_start_lambda else memo)
        except (RoamsError, ArithmeticError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            log.warning("lambda=%.4g failed: %s", lam, row.error)
            fits.append(None)
            rows.append(row)
            continue
        row.bic, row.k, row.robust_nll = fit.bic, fit.k, fit.robust_nll
        row.converged, row.inner_iterations = fit.converged, fit.inner_iterations
        rows.append(row)
        fits.append(fit)
        if warm_start_lambda:
            start, first = fit.theta, None

    ok = [j for j, f in enumerate(fits) if f is not None]
    if not ok:
        raise RoamsError("every lambda on the grid failed: " + "; ".join(r.error for r in rows))
    if pi is None:
        j_star = min(ok, key=lambda j: (rows[j].bic, j))
    else:
        j_star = min(ok, key=lambda j: (abs(rows[j].k / obs.n_complete - pi), j))
    best = fits[j_star]
    if any(not fits[j].converged for j in ok):
        warnings.append("some_lambda_not_converged")
    warnings += _phi_warning(best.theta)
    rep = FitReport(
        method="roams", theta=best.theta, gamma=best.gamma, flagged=best.flagged,
        objective=best.robust_nll, n=obs.n, n_complete=obs.n_complete,
        converged=best.converged, model=builder.to_config(), init_theta=init,
        lambda_star=best.lam, bic=best.bic, path=rows,
        diagnostics={"selection": "min_bic" if pi is None else f"target_proportion:{pi}",
                     "lambda_max": lambda_max, "grid_size": len(grid),
                     "tol": tol, "max_outer": max_outer,
                     "classical_objective": classical.objective,
                     "classical_termination": classical.termination_reason.value},
        warnings=warnings)
    if keep_fits:
        rep.fits = fits
    return rep
