"""Model builders: map a parameter vector to a :class:`ModelSpec`.

A builder exposes ``names``, ``lower``, ``upper``, ``p``, ``identifier`` and

* ``theta(values)``            -> ThetaVector with the builder's bounds
* ``initial_theta(obs)``       -> starting point for the optimizer
* ``initial_state(obs)``       -> (init_mean, init_cov) used when fitting ``obs``,
                                  or None to keep the built-in one
* ``build(values, state)``     -> ModelSpec
* ``forecast_state(values, y)``-> initial state whose first forecast equals ``y``
* ``to_config()``              -> JSON-able dict accepted by :func:`model_from_config`
"""

from __future__ import annotations

import numpy as np

from .dcrw import DcrwModel
from .errors import InputError
from .optim import VARIANCE_FLOOR, ThetaVector
from .ssm import ModelSpec, ObservationSeries

MATRIX_FIELDS = ("obs_matrix", "transition", "obs_cov", "state_cov", "init_mean", "init_cov")
_COV_FIELDS = {"obs_cov", "state_cov", "init_cov"}


def _num(x):
    # JSON carries infinite bounds as "inf" / "-inf"
    return float(x)


class MatrixModel:
    """Arbitrary linear Gaussian SSM with free parameters mapped onto matrix cells.

    Args:
        matrices: dict with the six ModelSpec fields (nested lists or arrays).
        params: list of dicts with ``name``, ``cells`` (list of
            ``[field, i, j]``; ``[field, i]`` for ``init_mean``), ``init`` and
            optional ``lower``, ``upper``, ``variance``.  Off-diagonal cells of
            covariance fields are mirrored.
        init_rule: ``"fixed"`` uses ``init_mean``/``init_cov`` as given;
            ``"first_observation"`` starts from a point mass that makes the first
            forecast equal the first observed value.
    """

    identifier = "matrices"

    def __init__(self, matrices, params, init_rule="fixed"):
        self.base = {}
        for f in MATRIX_FIELDS:
            if f not in matrices:
                raise InputError(f"missing matrix field {f!r}")
            a = np.array(matrices[f], dtype=float)
            self.base[f] = a.reshape(-1) if f == "init_mean" else np.atleast_2d(a)
        self.base["init_mean"] = self.base["init_mean"].reshape(-1)
        ModelSpec(**self.base).validate()
        if init_rule not in ("fixed", "first_observation"):
            raise InputError(f"unknown init_rule {init_rule!r}")
        self.init_rule = init_rule
        self.params = []
        names, lo, hi, init = [], [], [], []
        for k, prm in enumerate(params):
            try:
                name = str(prm["name"])
                cells = [tuple(c) for c in prm["cells"]]
                value = _num(prm["init"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"params[{k}]: {exc}") from None
            is_var = bool(prm.get("variance", False))
            lower = _num(prm.get("lower", VARIANCE_FLOOR if is_var else -np.inf))
            if is_var:
                lower = max(lower, VARIANCE_FLOOR)
            upper = _num(prm.get("upper", np.inf))
            for c in cells:
                if c[0] not in MATRIX_FIELDS:
                    raise InputError(f"params[{k}]: unknown matrix {c[0]!r}")
                idx = tuple(int(i) for i in c[1:])
                try:
                    self.base[c[0]][idx]
                except IndexError:
                    raise InputError(f"params[{k}]: cell {list(c)} out of range") from None
            self.params.append({"name": name, "cells": [[c[0], *map(int, c[1:])] for c in cells],
                                "init": value, "lower": lower, "upper": upper,
                                "variance": is_var})
            names.append(name)
            lo.append(lower)
            hi.append(upper)
            init.append(value)
        self.names = tuple(names)
        self.lower = np.array(lo, dtype=float)
        self.upper = np.array(hi, dtype=float)
        self._init = np.array(init, dtype=float)
        self.p = self.base["obs_matrix"].shape[0]
        self.theta(self._init)

    def theta(self, values) -> ThetaVector:
        return ThetaVector(self.names, values, self.lower, self.upper)

    def initial_theta(self, obs: ObservationSeries) -> ThetaVector:
        return self.theta(self._init)

    def _fill(self, values):
        mats = {f: np.array(v) for f, v in self.base.items()}
        for prm, v in zip(self.params, np.asarray(values, dtype=float)):
            for c in prm["cells"]:
                f, idx = c[0], tuple(c[1:])
                mats[f][idx] = v
                if f in _COV_FIELDS and len(idx) == 2 and idx[0] != idx[1]:
                    mats[f][idx[::-1]] = v
        return mats

    def forecast_state(self, values, first_obs):
        mats = self._fill(values)
        M = mats["obs_matrix"] @ mats["transition"]
        mu0 = np.linalg.lstsq(M, np.asarray(first_obs, dtype=float), rcond=None)[0]
        q = mats["transition"].shape[0]
        return mu0, np.zeros((q, q))

    def initial_state(self, obs: ObservationSeries):
        if self.init_rule == "fixed":
            return None
        return self.forecast_state(self._init, obs.values[obs.first_observed()])

    def build(self, values, init_state) -> ModelSpec:
        mats = self._fill(values)
        if init_state is not None:
            mats["init_mean"], mats["init_cov"] = init_state
        return ModelSpec(**mats)

    def to_config(self) -> dict:
        return {"kind": "matrices", "init_rule": self.init_rule,
                "matrices": {f: np.asarray(v).tolist() for f, v in self.base.items()},
                "params": [{**p, "lower": _enc(p["lower"]), "upper": _enc(p["upper"])}
                           for p in self.params]}


def _enc(x):
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf")


def model_from_config(cfg) -> "DcrwModel | MatrixModel":
    """Rebuild a builder from its ``to_config`` dict (or ``None`` for DCRW)."""
    if cfg is None:
        return DcrwModel()
    kind = cfg.get("kind", "dcrw")
    if kind == "dcrw":
        return DcrwModel(consistent_mad=bool(cfg.get("consistent_mad", False)))
    if kind in ("matrices", "custom-matrices"):
        if "matrices" not in cfg or "params" not in cfg:
            raise InputError("custom model needs 'matrices' and 'params'")
        return MatrixModel(cfg["matrices"], cfg["params"], cfg.get("init_rule", "fixed"))
    raise InputError(f"unknown model kind {kind!r}")
