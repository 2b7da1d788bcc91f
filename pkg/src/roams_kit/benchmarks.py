"""Benchmark estimators: oracle, Huber and trimmed maximum likelihood.

The Huber and trimmed fits run a huberized-innovation filter (innovation
scaled by ``min(1, k / MD)`` in the mean update, covariance update unchanged),
an approximation of the Cipra-style robust Kalman filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NonFiniteObjectiveError
from .likelihood import classical_objective
from .online import chi2_quantile
from .optim import minimize_box
from .report import FitReport
from .roams import _plain_report
from .ssm import ObservationSeries, kernel_run, prepare_series

BENCHMARK_METHODS = ("oracle", "huber", "trimmed")


def default_huber_k(p) -> float:
    """``sqrt`` of the 0.95 quantile of chi-square with ``p`` degrees of freedom."""
    return math.sqrt(chi2_quantile(0.95, p))


def huber_rho(x, k):
    """``x^2`` below ``k``, ``2 k x - k^2`` above; vectorized over ``x``."""
    x = np.asarray(x, dtype=float)
    if not k > 0:
        raise InputError("k must be positive")
    out = np.where(x < k, x * x, 2.0 * k * x - k * k)
    return float(out) if out.ndim == 0 else out


def _rho_md2(md2, k):
    # huber_rho(sqrt(md2)) without the square root in the quadratic branch,
    # so k = inf gives md2 bitwise
    with np.errstate(invalid="ignore"):
        return np.where(md2 < k * k, md2, 2.0 * k * np.sqrt(md2) - k * k)


@dataclass(frozen=True)
class BenchmarkConfig:
    method: str
    huber_k: float | None = None
    trim_alpha: float = 0.1
    known_outlier_indices: tuple = ()

    def __post_init__(self):
        if self.method not in BENCHMARK_METHODS:
            raise InputError(f"unknown benchmark {self.method!r}")
        if not 0.0 <= self.trim_alpha < 0.5:
            raise InputError(f"trim_alpha must lie in [0, 0.5), got {self.trim_alpha}")
        if self.huber_k is not None and not self.huber_k > 0:
            raise InputError("huber_k must be positive")


def _mask(indices, n):
    m = np.zeros(n, dtype=bool)
    idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InputError(f"outlier index out of range [0, {n})")
    m[idx] = True
    return m


def oracle_fit(obs: ObservationSeries, builder, init_theta=None, known_outliers=()) -> FitReport:
    """Classical MLE with the known outliers treated as missing."""
    mask = _mask(known_outliers, obs.n)
    if 2 * int(mask.sum()) >= obs.n:
        raise InputError(f"{int(mask.sum())} known outliers is not fewer than n/2")
    init = builder.initial_theta(obs) if init_theta is None else init_theta
    res = minimize_box(classical_objective(obs, builder, mask if mask.any() else None), init)
    return _plain_report("oracle", obs, builder, init, res, flagged=np.flatnonzero(mask))


class _RobustEvaluator:
    """Huberized-filter objective with either Huber loss or trimming."""

    def __init__(self, obs, builder, filter_k, *, rho_k=np.inf, n_trim=0):
        self.builder = builder
        self.state = builder.initial_state(obs)
        self.prep = prepare_series(obs)
        self.use = ~self.prep.missing
        self.filter_k = float(filter_k)
        self.rho_k = float(rho_k)
        self.n_trim = int(n_trim)

    def terms(self, values):
        spec = self.builder.build(np.asarray(values, dtype=float), self.state)
        out = kernel_run(spec, self.prep, huber_k=self.filter_k)
        return out[8], out[9]

    def trimmed_set(self, md2):
        if self.n_trim == 0:
            return np.zeros(md2.shape[0], dtype=bool)
        idx = np.flatnonzero(self.use)
        # largest first, ties broken by time
        order = idx[np.lexsort((idx, -md2[idx]))]
        m = np.zeros(md2.shape[0], dtype=bool)
        m[order[:self.n_trim]] = True
        return m

    def __call__(self, values):
        logdet, md2 = self.terms(values)
        use = self.use & ~self.trimmed_set(md2) if self.n_trim else self.use
        total = 0.5 * (logdet[use].sum() + _rho_md2(md2, self.rho_k)[use].sum())
        if not np.isfinite(total):
            raise NonFiniteObjectiveError("benchmark objective is not finite")
        return float(total)


def huber_objective(obs, builder, k):
    return _RobustEvaluator(obs, builder, k, rho_k=k)


def trimmed_count(alpha, n_complete) -> int:
    # ceil with a guard against 0.1 * 10 style representation error
    return int(math.ceil(alpha * n_complete - 1e-9))


def trimmed_objective(obs, builder, alpha, filter_k=None):
    if filter_k is None:
        filter_k = default_huber_k(obs.p) if alpha > 0 else np.inf
    return _RobustEvaluator(obs, builder, filter_k, n_trim=trimmed_count(alpha, obs.n_complete))


def huber_fit(obs: ObservationSeries, builder, init_theta=None, k=None) -> FitReport:
    """Minimize ``0.5 * sum(log|S_t| + rho_k(MD_t))`` under the huberized filter.

    ``k`` defaults to the chi_p 0.95 quantile; ``k = inf`` is the classical fit.
    ``flagged`` lists the points whose innovation was clipped at the estimate.
    """
    k = default_huber_k(obs.p) if k is None else float(k)
    if not k > 0:
        raise InputError("huber k must be positive")
    init = builder.initial_theta(obs) if init_theta is None else init_theta
    f = huber_objective(obs, builder, k)
    res = minimize_box(f, init)
    _, md2 = f.terms(res.theta.values)
    with np.errstate(invalid="ignore"):
        clipped = np.flatnonzero(f.use & (md2 > k * k))
    rep = _plain_report("huber", obs, builder, init, res, flagged=clipped,
                        extra_diag={"huber_k": k})
    return rep


def trimmed_fit(obs: ObservationSeries, builder, init_theta=None, alpha=0.1,
                filter_k=None) -> FitReport:
    """Trimmed likelihood: the ``ceil(alpha * n_complete)`` largest-MD terms are
    dropped at every evaluation.

    ``flagged`` lists the points trimmed at the final estimate.
    """
    if not 0.0 <= alpha < 0.5:
        raise InputError(f"alpha must lie in [0, 0.5), got {alpha}")
    init = builder.initial_theta(obs) if init_theta is None else init_theta
    f = trimmed_objective(obs, builder, alpha, filter_k)
    res = minimize_box(f, init)
    _, md2 = f.terms(res.theta.values)
    trimmed = np.flatnonzero(f.trimmed_set(md2))
    return _plain_report("trimmed", obs, builder, init, res, flagged=trimmed,
                         extra_diag={"alpha": alpha, "n_trim": f.n_trim,
                                     "filter_k": f.filter_k})


def run_benchmark(obs, builder, cfg: BenchmarkConfig, init_theta=None) -> FitReport:
    if cfg.method == "oracle":
        return oracle_fit(obs, builder, init_theta, cfg.known_outlier_indices)
    if cfg.method == "huber":
        return huber_fit(obs, builder, init_theta, cfg.huber_k)
    return trimmed_fit(obs, builder, init_theta, cfg.trim_alpha)
