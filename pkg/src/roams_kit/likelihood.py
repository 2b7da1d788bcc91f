"""Classical and mean-shift robustified Gaussian negative log-likelihoods.

Both omit the ``p/2 log(2 pi)`` constants and skip missing timepoints
entirely.  In the robustified version a timepoint with a non-zero shift gets
a zero Kalman gain, loses its ``log|S|`` term and contributes the squared
Mahalanobis norm of ``resid - shift``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InputError, NonFiniteObjectiveError, SingularInnovationError
from .ssm import FilterOutput, ObservationSeries, PreparedSeries, kernel_run, prepare_series


@dataclass(frozen=True)
class ShiftMatrix:
    """Mean-shift parameters, one p-vector per timepoint (rows of ``values``)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise InputError("shift matrix must be (n, p)")
        if not np.all(np.isfinite(v)):
            raise InputError("shift matrix has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, n, p) -> "ShiftMatrix":
        return cls(np.zeros((n, p)))

    @property
    def mask(self) -> np.ndarray:
        return np.any(self.values != 0.0, axis=1)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def k(self) -> int:
        return int(self.mask.sum())

    def check_safeguard(self):
        n = self.values.shape[0]
        if 2 * self.k >= n:
            raise InputError(f"{self.k} flagged timepoints is not fewer than n/2 = {n / 2}")
        return self


def _as_values(theta):
    return np.asarray(getattr(theta, "values", theta), dtype=float)


def _as_shift(gamma, n, p):
    g = np.asarray(getattr(gamma, "values", gamma), dtype=float)
    if g.shape != (n, p):
        raise InputError(f"shift matrix has shape {g.shape}, expected {(n, p)}")
    return g


def mahalanobis(e, S) -> float:
    """``sqrt(e' S^-1 e)`` via a Cholesky factor of ``S``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return float(np.sqrt(_md2_logdet(e, S)[0]))


def _md2_logdet(e, S):
    S = 0.5 * (S + S.T)
    L = np.empty_like(S)
    if not _kernels._cholesky(S, L) or _kernels._condition(S) > _kernels.COND_LIMIT:
        raise SingularInnovationError("covariance is singular or ill-conditioned")
    z = np.empty(e.size)
    _kernels._forward(L, e, z)
    return float(z @ z), float(2.0 * np.log(np.diag(L)).sum())


def _nll_terms(logdet, md2, use, drop_logdet):
    ld = logdet if drop_logdet is None else np.where(drop_logdet, 0.0, logdet)
    total = 0.5 * (ld[use].sum() + md2[use].sum())
    if not np.isfinite(total):
        raise NonFiniteObjectiveError("negative log-likelihood is not finite")
    return float(total)


def nll_from_filter(filt: FilterOutput, drop_logdet=None, skip=None) -> float:
    """Sum 0.5 * (log|S| + MD^2) over observed timepoints.

    Args:
        filt: output of a filter pass; ``md2_shifted`` is used for MD^2.
        drop_logdet: mask of timepoints whose ``log|S|`` term is omitted.
        skip: mask of timepoints dropped entirely (in addition to missing).
    """
    use = ~filt.missing
    if skip is not None:
        use &= ~skip
    return _nll_terms(filt.logdet, filt.md2_shifted, use, drop_logdet)


class _Evaluator:
    """Likelihood of one series under a fixed mask/shift setup, for many theta."""

    def __init__(self, obs, builder, zero_gain=None, gamma=None, *, init_state=None,
                 skip=None, drop_logdet=None):
        self.builder = builder
        self.state = builder.initial_state(obs) if init_state is None else init_state
        self.prep: PreparedSeries = prepare_series(obs, zero_gain, gamma)
        use = ~self.prep.missing
        if skip is not None:
            use &= ~np.asarray(skip, dtype=bool)
        self.use = use
        self.drop = drop_logdet
        if builder.p != obs.p:
            raise InputError(f"model has p={builder.p} but observations have p={obs.p}")

    def __call__(self, values):
        spec = self.builder.build(_as_values(values), self.state)
        out = kernel_run(spec, self.prep)
        return _nll_terms(out[8], out[10], self.use, self.drop)


def classical_nll(theta, obs: ObservationSeries, builder, *, known_outliers=None,
                  init_state=None) -> float:
    """Negative Gaussian log-likelihood from the prediction-error decomposition.

    ``known_outliers`` (boolean mask) are treated exactly like missing values.
    """
    return _Evaluator(obs, builder, known_outliers, init_state=init_state,
                      skip=known_outliers)(theta)


def robust_filter(theta, gamma, obs: ObservationSeries, builder, *, init_state=None):
    """Filter pass with zero gain wherever the shift is non-zero."""
    g = _as_shift(gamma, obs.n, obs.p)
    flags = np.any(g != 0.0, axis=1)
    state = builder.initial_state(obs) if init_state is None else init_state
    spec = builder.build(_as_values(theta), state)
    prep = prepare_series(obs, flags, g)
    out = kernel_run(spec, prep)
    return FilterOutput(*out[:12], prep.missing.copy()), flags


def _robust_evaluator(obs, builder, gamma, init_state=None):
    g = _as_shift(gamma, obs.n, obs.p)
    flags = np.any(g != 0.0, axis=1)
    return _Evaluator(obs, builder, flags, g, init_state=init_state, drop_logdet=flags)


def robust_nll(theta, gamma, obs: ObservationSeries, builder, *, init_state=None) -> float:
    """Mean-shift robustified negative log-likelihood.

    With an all-zero ``gamma`` this is identical to :func:`classical_nll`.
    """
    return _robust_evaluator(obs, builder, gamma, init_state)(theta)


def classical_objective(obs, builder, known_outliers=None):
    """``values -> classical_nll`` callable with the setup precomputed."""
    return _Evaluator(obs, builder, known_outliers, skip=known_outliers)


def robust_objective(obs, builder, gamma):
    """``values -> robust_nll`` callable for a fixed shift matrix."""
    return _robust_evaluator(obs, builder, gamma)
