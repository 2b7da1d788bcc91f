"""First-differenced correlated random walk (DCRW) for 2-D tracking data.

The two-lag form  z_t = z_{t-1} + phi (z_{t-1} - z_{t-2}) + w_t  is written in
state-space form with state x_t = [z_t, z_{t-1}] (q = 4) and y_t = z_t + v_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, InsufficientDataError
from .optim import VARIANCE_FLOOR, ThetaVector
from .ssm import ModelSpec, ObservationSeries

PARAM_NAMES = ("phi", "obs_var1", "obs_var2", "state_var1", "state_var2")
MAD_CONSISTENCY = 1.4826

OBS_MATRIX = np.hstack([np.eye(2), np.zeros((2, 2))])
OBS_MATRIX.setflags(write=False)


@dataclass(frozen=True)
class DcrwTheta:
    phi: float
    obs_var: tuple
    state_var: tuple

    def __post_init__(self):
        ov = tuple(float(v) for v in self.obs_var)
        sv = tuple(float(v) for v in self.state_var)
        if len(ov) != 2 or len(sv) != 2:
            raise InputError("obs_var and state_var need two entries each")
        if not 0.0 <= self.phi <= 1.0:
            raise InputError(f"phi={self.phi} outside [0, 1]")
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "obs_var", ov)
        object.__setattr__(self, "state_var", sv)

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, *self.obs_var, *self.state_var])

    @classmethod
    def from_array(cls, values) -> "DcrwTheta":
        v = np.asarray(values, dtype=float)
        return cls(v[0], (v[1], v[2]), (v[3], v[4]))


def transition_matrix(phi):
    return np.array([[1.0 + phi, 0.0, -phi, 0.0],
                     [0.0, 1.0 + phi, 0.0, -phi],
                     [1.0, 0.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0]])


def dcrw_initial_state(first_obs):
    """Point mass at ``[y1, y1]``: the first prediction equals ``y1`` for every phi."""
    y1 = np.asarray(first_obs, dtype=float).reshape(2)
    if not np.all(np.isfinite(y1)):
        raise InputError("first observation must be non-missing")
    return np.concatenate([y1, y1]), np.zeros((4, 4))


def build_dcrw(theta, init_mean=None, init_cov=None) -> ModelSpec:
    """State-space matrices for a :class:`DcrwTheta` (or its 5-array)."""
    if isinstance(theta, DcrwTheta):
        v = theta.as_array()
    else:
        v = np.asarray(theta, dtype=float)
    R = np.zeros((2, 2))
    R[0, 0], R[1, 1] = v[1], v[2]
    Q = np.zeros((4, 4))
    Q[0, 0], Q[1, 1] = v[3], v[4]
    return ModelSpec(
        OBS_MATRIX,
        transition_matrix(float(v[0])),
        R,
        Q,
        np.zeros(4) if init_mean is None else init_mean,
        np.zeros((4, 4)) if init_cov is None else init_cov,
    )


def extract_dcrw(spec: ModelSpec) -> DcrwTheta:
    """Inverse of :func:`build_dcrw` on the matrix entries."""
    return DcrwTheta(spec.transition[0, 0] - 1.0,
                     (spec.obs_cov[0, 0], spec.obs_cov[1, 1]),
                     (spec.state_cov[0, 0], spec.state_cov[1, 1]))


def _mad(x):
    return float(np.median(np.abs(x - np.median(x))))


def init_dcrw_theta(obs: ObservationSeries, *, consistent_mad=False) -> DcrwTheta:
    """Starting values: squared MAD of coordinate differences for all variances.

    Differences are taken between consecutive observed rows only; pairs that
    straddle a missing row are skipped.  ``phi`` starts at 0.5.
    """
    y = obs.values
    ok = ~obs.missing_mask
    pair = ok[1:] & ok[:-1]
    if pair.sum() < 2:
        raise InsufficientDataError("need at least two consecutive observed pairs")
    diffs = (y[1:] - y[:-1])[pair]
    scale = MAD_CONSISTENCY if consistent_mad else 1.0
    var = [max((scale * _mad(diffs[:, j])) ** 2, VARIANCE_FLOOR) for j in range(2)]
    return DcrwTheta(0.5, tuple(var), tuple(var))


class DcrwModel:
    """Model builder for the DCRW; the initial state is a point mass at the
    first observed location of whatever series is being filtered."""

    identifier = "dcrw"
    names = PARAM_NAMES
    lower = np.array([0.0] + [VARIANCE_FLOOR] * 4)
    upper = np.array([1.0] + [np.inf] * 4)
    p = 2

    def __init__(self, consistent_mad=False):
        self.consistent_mad = consistent_mad

    def theta(self, values) -> ThetaVector:
        return ThetaVector(self.names, values, self.lower, self.upper)

    def initial_theta(self, obs: ObservationSeries) -> ThetaVector:
        return self.theta(init_dcrw_theta(obs, consistent_mad=self.consistent_mad).as_array())

    def initial_state(self, obs: ObservationSeries):
        return dcrw_initial_state(obs.values[obs.first_observed()])

    def build(self, values, init_state) -> ModelSpec:
        return build_dcrw(np.asarray(values, dtype=float), *init_state)

    def forecast_state(self, values, first_obs):
        return dcrw_initial_state(first_obs)

    def to_config(self) -> dict:
        return {"kind": "dcrw", "consistent_mad": self.consistent_mad}
