"""Out-of-sample filtering and one-step-ahead forecasting.

Four filters share the compiled kernel: plain Kalman, the threshold filter
(zero gain when the Mahalanobis innovation exceeds ``c``), the fast-updating
threshold (FUT) filter, which also inflates the filtered covariance by ``b``
at rejected points, and a huberized-innovation filter used for the Huber and
trimmed benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InputError
from .models import model_from_config
from .ssm import ModelSpec, ObservationSeries, PreparedSeries, filter_pass, kernel_run

FILTER_KINDS = ("kalman", "threshold", "fut", "huber")
DEFAULT_B = 2.0


def chi2_quantile(prob, df) -> float:
    """Quantile of the chi-square distribution with ``df`` degrees of freedom."""
    if not 0.0 < prob < 1.0:
        raise InputError("probability must lie in (0, 1)")
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    return float(2.0 * special.gammaincinv(0.5 * df, prob))


def default_threshold(p, level=0.99) -> float:
    """``sqrt`` of the ``level`` quantile of chi-square with ``p`` degrees of freedom."""
    if p < 1:
        raise InputError("dimension must be at least 1")
    return math.sqrt(chi2_quantile(level, p))


@dataclass(frozen=True)
class FutConfig:
    c: float
    b: float = DEFAULT_B

    def __post_init__(self):
        if not self.c > 0:
            raise InputError(f"threshold c must be positive, got {self.c}")
        if not self.b >= 1:
            raise InputError(f"inflation b must be at least 1, got {self.b}")


@dataclass
class ForecastOutput:
    """Per-timepoint one-step-ahead forecasts.

    Rows before the first observed test point (where the filter starts) are
    NaN and unflagged.
    """

    forecast: np.ndarray
    innov_cov: np.ndarray
    flagged: np.ndarray
    filt_state: np.ndarray
    filt_state_cov: np.ndarray
    missing: np.ndarray
    kind: str = "kalman"

    @property
    def n(self) -> int:
        return self.forecast.shape[0]

    def errors(self, target) -> np.ndarray:
        return np.asarray(target, dtype=float) - self.forecast


def _from_filter(filt, kind) -> ForecastOutput:
    return ForecastOutput(filt.pred_obs, filt.innov_cov, filt.flagged & ~filt.missing,
                          filt.filt_state, filt.filt_state_cov, filt.missing, kind)


def run_kalman_forecast(spec: ModelSpec, obs: ObservationSeries, zero_gain=None) -> ForecastOutput:
    return _from_filter(filter_pass(spec, obs, zero_gain), "kalman")


def run_threshold_filter(spec: ModelSpec, obs: ObservationSeries, c) -> ForecastOutput:
    """Zero gain wherever ``MD(y_t - yhat_t, S_t) > c``."""
    if c < 0:
        raise InputError("threshold c must be non-negative")
    return _from_filter(filter_pass(spec, obs, c=c), "threshold")


def run_fut_filter(spec: ModelSpec, obs: ObservationSeries, cfg: FutConfig) -> ForecastOutput:
    """Threshold filter with ``P_t|t = b * P_t|t-1`` at rejected points."""
    return _from_filter(filter_pass(spec, obs, c=cfg.c, b=cfg.b), "fut")


def run_huber_filter(spec: ModelSpec, obs: ObservationSeries, k) -> ForecastOutput:
    """Innovation shrunk by ``min(1, k / MD)`` in the mean update."""
    if not k > 0:
        raise InputError("huber k must be positive")
    return _from_filter(filter_pass(spec, obs, huber_k=k), "huber")


def _knobs(kind, c, b, huber_k, p):
    if kind not in FILTER_KINDS:
        raise InputError(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
    if kind == "kalman":
        return np.inf, 1.0, np.inf
    if kind == "huber":
        from .benchmarks import default_huber_k
        return np.inf, 1.0, default_huber_k(p) if huber_k is None else float(huber_k)
    c = default_threshold(p) if c is None else float(c)
    if kind == "threshold":
        if c < 0:
            raise InputError("threshold c must be non-negative")
        return c, 1.0, np.inf
    cfg = FutConfig(c, DEFAULT_B if b is None else float(b))
    return cfg.c, cfg.b, np.inf


def forecast_run(fit, test: ObservationSeries, filter_kind="kalman", builder=None, *,
                 c=None, b=None, huber_k=None, known_outliers=None) -> ForecastOutput:
    """One-step-ahead forecasts of ``test`` under a fitted model.

    The filter starts at the first observed test point from a point mass chosen
    so that the first forecast equals that observation exactly.

    Args:
        fit: a :class:`~roams_kit.report.FitReport`.
        filter_kind: ``kalman``, ``threshold``, ``fut`` or ``huber``.
        builder: model builder; rebuilt from ``fit.model`` when omitted.
        c: rejection threshold for threshold/FUT (default: chi-square 0.99 rule).
        b: FUT inflation (default 2).
        huber_k: clip constant for the huber filter.
        known_outliers: optional test indices given zero gain (oracle use).
    """
    builder = model_from_config(fit.model) if builder is None else builder
    if builder.p != test.p:
        raise InputError(f"model has p={builder.p} but test data have p={test.p}")
    obs_idx = test.observed_indices()
    if obs_idx.size == 0:
        raise InputError("test series has no observed values; nothing to forecast")
    c_, b_, k_ = _knobs(filter_kind, c, b, huber_k, test.p)
    start = int(obs_idx[0])
    values = fit.theta.values
    state = builder.forecast_state(values, test.values[start])
    spec = builder.build(values, state)
    part = test.slice(start, test.n)
    zg = None
    if known_outliers is not None:
        zg = np.zeros(test.n, dtype=bool)
        zg[np.asarray(list(known_outliers), dtype=int)] = True
        zg = zg[start:]
    filt = filter_pass(spec, part, zg, c=c_, b=b_, huber_k=k_)
    out = _from_filter(filt, filter_kind)
    if start == 0:
        return out
    return _pad(out, start)


def _pad(out: ForecastOutput, start) -> ForecastOutput:
    def pad(a, fill):
        shape = (start,) + a.shape[1:]
        return np.concatenate([np.full(shape, fill, dtype=a.dtype), a])
    return ForecastOutput(pad(out.forecast, np.nan), pad(out.innov_cov, np.nan),
                          pad(out.flagged, False), pad(out.filt_state, np.nan),
                          pad(out.filt_state_cov, np.nan), pad(out.missing, True), out.kind)


class StreamingFilter:
    """Point-at-a-time version of the batch filters.

    Each :meth:`step` runs the compiled kernel on a single row starting from
    the current filtered moments, so a stream reproduces the batch filter
    bitwise.

    Example:
        >>> sf = StreamingFilter(spec, c=3.0, b=2.0)
        >>> step = sf.step([0.1, -0.2])
    """

    def __init__(self, spec: ModelSpec, *, c=np.inf, b=1.0, huber_k=np.inf):
        spec.validate()
        if b < 1:
            raise InputError("inflation b must be at least 1")
        self.spec = spec
        self.c, self.b, self.huber_k = float(c), float(b), float(huber_k)
        self.mean = spec.init_mean.copy()
        self.cov = spec.init_cov.copy()
        self.t = 0

    def step(self, y) -> dict:
        """Consume one observation (NaN entries mark it missing).

        Returns:
            dict with ``forecast``, ``innov_cov``, ``flagged``, ``filt_state``
            and ``filt_state_cov`` for this timepoint.
        """
        y = np.asarray(y, dtype=float).reshape(1, -1)
        if y.shape[1] != self.spec.p:
            raise InputError(f"expected {self.spec.p} values, got {y.shape[1]}")
        miss = np.array([bool(np.isnan(y).any())])
        prep = PreparedSeries(np.where(miss[:, None], 0.0, y), miss, miss.copy(),
                              np.zeros_like(y))
        spec = ModelSpec(self.spec.obs_matrix, self.spec.transition, self.spec.obs_cov,
                         self.spec.state_cov, self.mean, self.cov)
        out = kernel_run(spec, prep, self.c, self.b, self.huber_k)
        self.mean = out[5][0].copy()
        self.cov = out[6][0].copy()
        self.t += 1
        return {"forecast": out[2][0], "innov_cov": out[3][0],
                "flagged": bool(out[11][0] and not miss[0]),
                "filt_state": self.mean.copy(), "filt_state_cov": self.cov.copy()}
