"""Linear Gaussian state-space models, the Kalman filter and the RTS smoother.

The model is

    y_t = A x_t + v_t,        v_t ~ N(0, obs_cov)
    x_t = Phi x_{t-1} + w_t,  w_t ~ N(0, state_cov)

with ``x_0 ~ N(init_mean, init_cov)``.  Observations live in an
:class:`ObservationSeries` whose rows are timepoints; a row containing any NaN
is treated as fully missing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InputError, NumericalFailure, SingularInnovationError

PSD_TOL = _kernels.PSD_TOL


def _as_matrix(x, name):
    if type(x) is np.ndarray and x.ndim == 2 and x.dtype == np.float64 and x.flags.c_contiguous:
        return x
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise InputError(f"{name} must be a matrix")
    return np.ascontiguousarray(m)


def _check_psd(m, name):
    if m.shape[0] != m.shape[1]:
        raise InputError(f"{name} must be square, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} has non-finite entries")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise InputError(f"{name} is not symmetric")
    if m.size and np.linalg.eigvalsh(0.5 * (m + m.T))[0] < -PSD_TOL:
        raise InputError(f"{name} is not positive semidefinite")


@dataclass(frozen=True)
class ModelSpec:
    """Matrices and initial-state law of one linear Gaussian SSM."""

    obs_matrix: np.ndarray
    transition: np.ndarray
    obs_cov: np.ndarray
    state_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "obs_matrix", _as_matrix(self.obs_matrix, "obs_matrix"))
        object.__setattr__(self, "transition", _as_matrix(self.transition, "transition"))
        object.__setattr__(self, "obs_cov", _as_matrix(self.obs_cov, "obs_cov"))
        object.__setattr__(self, "state_cov", _as_matrix(self.state_cov, "state_cov"))
        object.__setattr__(
            self, "init_mean",
            np.ascontiguousarray(np.asarray(self.init_mean, dtype=float).reshape(-1)))
        object.__setattr__(self, "init_cov", _as_matrix(self.init_cov, "init_cov"))

    @property
    def p(self) -> int:
        return self.obs_matrix.shape[0]

    @property
    def q(self) -> int:
        return self.transition.shape[0]

    def validate(self) -> "ModelSpec":
        """Check dimensions and PSD-ness; returns ``self`` for chaining."""
        p, q = self.obs_matrix.shape
        if self.transition.shape != (q, q):
            raise InputError(f"transition must be {q}x{q}, got {self.transition.shape}")
        if self.obs_cov.shape != (p, p):
            raise InputError(f"obs_cov must be {p}x{p}, got {self.obs_cov.shape}")
        if self.state_cov.shape != (q, q):
            raise InputError(f"state_cov must be {q}x{q}, got {self.state_cov.shape}")
        if self.init_mean.shape != (q,):
            raise InputError(f"init_mean must have length {q}")
        if self.init_cov.shape != (q, q):
            raise InputError(f"init_cov must be {q}x{q}")
        for name in ("obs_matrix", "transition", "init_mean"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} has non-finite entries")
        _check_psd(self.obs_cov, "obs_cov")
        _check_psd(self.state_cov, "state_cov")
        _check_psd(self.init_cov, "init_cov")
        return self

    def with_initial_state(self, mean, cov) -> "ModelSpec":
        return ModelSpec(self.obs_matrix, self.transition, self.obs_cov,
                         self.state_cov, mean, cov)


@dataclass(frozen=True)
class ObservationSeries:
    """Regularly spaced p-variate observations; NaN rows are missing.

    ``values`` has shape (n, p).  ``times`` defaults to 1..n.
    """

    values: np.ndarray
    times: np.ndarray = None
    missing_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InputError(f"values must be an (n, p) array, got shape {v.shape}")
        # partial missingness is promoted to a fully missing row
        miss = np.isnan(v).any(axis=1)
        v = v.copy()
        v[miss] = np.nan
        if np.isinf(v).any():
            raise InputError("observations contain infinite values")
        times = (np.arange(1, v.shape[0] + 1) if self.times is None
                 else np.asarray(self.times, dtype=np.int64).reshape(-1))
        if times.shape[0] != v.shape[0]:
            raise InputError("times and values disagree in length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise InputError("times must be strictly increasing")
        v.setflags(write=False)
        miss.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "missing_mask", miss)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def n_complete(self) -> int:
        return int(self.n - self.missing_mask.sum())

    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.missing_mask)

    def first_observed(self) -> int:
        idx = self.observed_indices()
        if idx.size == 0:
            raise InputError("series has no observed timepoints")
        return int(idx[0])

    def with_missing(self, indices) -> "ObservationSeries":
        """Copy with the given (0-based) rows blanked out."""
        v = np.array(self.values)
        v[np.asarray(list(indices), dtype=int)] = np.nan
        return ObservationSeries(v, self.times)

    def slice(self, start, stop=None) -> "ObservationSeries":
        return ObservationSeries(self.values[start:stop], self.times[start:stop])


@dataclass(frozen=True)
class FilterOutput:
    """Per-timepoint Kalman quantities; arrays are indexed by 0-based t.

    ``flagged`` marks observed timepoints whose gain was zeroed (by mask or
    threshold).  ``resid``, ``logdet`` and ``md2`` are NaN at missing rows.
    ``md2_shifted`` is the squared Mahalanobis norm of ``resid - gamma``.
    """

    pred_state: np.ndarray
    pred_state_cov: np.ndarray
    pred_obs: np.ndarray
    innov_cov: np.ndarray
    gain: np.ndarray
    filt_state: np.ndarray
    filt_state_cov: np.ndarray
    resid: np.ndarray
    logdet: np.ndarray
    md2: np.ndarray
    md2_shifted: np.ndarray
    flagged: np.ndarray
    missing: np.ndarray

    @property
    def n(self) -> int:
        return self.pred_state.shape[0]

    @property
    def mahalanobis(self) -> np.ndarray:
        return np.sqrt(self.md2)


def _raise_status(status, t):
    if status == _kernels.STATUS_SINGULAR:
        raise SingularInnovationError(
            "innovation covariance is singular or its condition number exceeds "
            f"{_kernels.COND_LIMIT:g}", t)
    if status == _kernels.STATUS_NOT_PSD:
        raise NumericalFailure("filtered state covariance is not PSD", t)
    if status == _kernels.STATUS_NONFINITE:
        raise NumericalFailure("filtered state is not finite", t)


def _check_dims(spec, obs):
    if spec.p != obs.p:
        raise InputError(f"model has p={spec.p} but observations have p={obs.p}")


@dataclass(frozen=True)
class PreparedSeries:
    """Kernel-ready view of a series plus per-timepoint masks.

    Built once per objective so that repeated filter passes over the same
    data skip the Python-side preparation.
    """

    y: np.ndarray
    missing: np.ndarray
    zero_gain: np.ndarray
    gamma: np.ndarray


def prepare_series(obs: ObservationSeries, zero_gain=None, gamma=None) -> PreparedSeries:
    """Missing rows zeroed in ``y``; ``zero_gain`` includes the missing rows."""
    n, p = obs.n, obs.p
    missing = np.ascontiguousarray(obs.missing_mask)
    if zero_gain is None:
        zg = np.zeros(n, dtype=bool)
    else:
        zg = np.asarray(zero_gain, dtype=bool).reshape(-1)
        if zg.shape[0] != n:
            raise InputError(f"zero_gain has length {zg.shape[0]}, expected {n}")
    zg = np.ascontiguousarray(zg | missing)
    if gamma is None:
        g = np.zeros((n, p))
    else:
        g = np.ascontiguousarray(np.asarray(gamma, dtype=float).reshape(n, p))
    y = np.ascontiguousarray(np.where(missing[:, None], 0.0, obs.values))
    return PreparedSeries(y, missing, zg, g)


def kernel_run(spec: ModelSpec, prep: PreparedSeries, c=np.inf, b=1.0, huber_k=np.inf):
    """Raw kernel outputs (a tuple); raises on numerical failure."""
    out = _kernels.kalman_pass(
        spec.obs_matrix, spec.transition, spec.obs_cov, spec.state_cov,
        spec.init_mean, spec.init_cov, prep.y, prep.missing, prep.zero_gain, prep.gamma,
        float(c), float(b), float(huber_k))
    if out[12] != _kernels.STATUS_OK:
        _raise_status(out[12], int(out[13]))
    return out


def filter_pass(spec: ModelSpec, obs: ObservationSeries, zero_gain=None, *,
                gamma=None, c=np.inf, b=1.0, huber_k=np.inf) -> FilterOutput:
    """Generic forward pass shared by every filter variant in the package.

    Args:
        spec: model matrices.
        obs: the series to filter.
        zero_gain: optional boolean mask; missing rows are OR-ed in.
        gamma: optional (n, p) shift matrix, only used for ``md2_shifted``.
        c: Mahalanobis rejection threshold (``inf`` disables).
        b: covariance inflation applied at rejected points.
        huber_k: innovation clip constant (``inf`` disables).
    """
    _check_dims(spec, obs)
    prep = prepare_series(obs, zero_gain, gamma)
    out = kernel_run(spec, prep, c, b, huber_k)
    return FilterOutput(*out[:12], prep.missing.copy())


def run_filter(spec: ModelSpec, obs: ObservationSeries, zero_gain=None) -> FilterOutput:
    """Kalman filter with the gain forced to zero at ``zero_gain`` and missing rows.

    At zero-gain timepoints the filtered moments equal the predicted ones;
    the innovation covariance is still computed everywhere.

    Raises:
        SingularInnovationError: an innovation covariance fails the condition guard.
        NumericalFailure: a filtered covariance loses PSD-ness.
    """
    return filter_pass(spec.validate(), obs, zero_gain)


def _solve_psd(M, B, t):
    """Return ``B @ pinv(M)`` for symmetric PSD ``M``."""
    w, V = np.linalg.eigh(M)
    if not np.all(np.isfinite(w)):
        raise NumericalFailure("smoother gain is not finite", t)
    tol = max(M.shape) * np.finfo(float).eps * max(w[-1], 0.0)
    keep = w > tol
    inv = (V[:, keep] / w[keep]) @ V[:, keep].T
    return B @ inv


def run_smoother(spec: ModelSpec, filt: FilterOutput):
    """Rauch-Tung-Striebel backward pass.

    Returns:
        ``(means, covs)`` with shapes (n, q) and (n, q, q).  The last entries
        equal the final filtered moments.

    A singular one-step predicted covariance (e.g. deterministic states)
    is handled with its pseudo-inverse, which is exact Gaussian conditioning.
    """
    n = filt.n
    xs = np.array(filt.filt_state)
    Ps = np.array(filt.filt_state_cov)
    Phi = spec.transition
    for t in range(n - 2, -1, -1):
        Pp_next = filt.pred_state_cov[t + 1]
        J = _solve_psd(Pp_next, filt.filt_state_cov[t] @ Phi.T, t)
        xs[t] = filt.filt_state[t] + J @ (xs[t + 1] - filt.pred_state[t + 1])
        P = filt.filt_state_cov[t] + J @ (Ps[t + 1] - Pp_next) @ J.T
        Ps[t] = 0.5 * (P + P.T)
        if not (np.all(np.isfinite(xs[t])) and np.all(np.isfinite(Ps[t]))):
            raise NumericalFailure("smoothed moments are not finite", t)
    return xs, Ps
