import numpy as np
import pytest

from conftest import local_level
from roams_kit.errors import InitializationError, InputError, NonFiniteObjectiveError
from roams_kit.likelihood import classical_nll
from roams_kit.models import MatrixModel
from roams_kit.optim import ThetaVector, fd_gradient, minimize_box
from roams_kit.ssm import ObservationSeries


def theta(values, lo, hi, names=None):
    names = names or tuple(f"x{i}" for i in range(len(values)))
    return ThetaVector(names, values, lo, hi)


def test_interior_quadratic():
    res = minimize_box(lambda v: float(np.sum((v - 1.0) ** 2)),
                       theta([5.0, 5.0], [0.0, 0.0], [10.0, 10.0]))
    np.testing.assert_allclose(res.theta.values, [1.0, 1.0], atol=1e-6)
    assert res.objective == pytest.approx(0.0, abs=1e-8)
    assert res.converged


def test_active_bound():
    res = minimize_box(lambda v: float(v[0] ** 2), theta([5.0], [2.0], [10.0]))
    assert res.theta.values[0] == 2.0
    assert res.objective == 4.0


def test_objective_never_increases():
    rng = np.random.default_rng(0)
    for _ in range(10):
        c = rng.uniform(-3, 3, 3)
        init = theta(rng.uniform(-1, 1, 3), [-1.0] * 3, [1.0] * 3)

        def f(v):
            return float(np.sum((v - c) ** 2) + np.sum(v ** 4))
        res = minimize_box(f, init)
        assert res.objective <= f(init.values)
        assert np.all(res.theta.values >= -1.0) and np.all(res.theta.values <= 1.0)


def test_fd_gradient_matches_analytic():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    H = A @ A.T + np.eye(4)
    b = rng.normal(size=4)
    x = rng.uniform(-1, 1, 4)
    g = fd_gradient(lambda v: float(0.5 * v @ H @ v + b @ v), x, np.full(4, -5.0), np.full(4, 5.0))
    exact = H @ x + b
    np.testing.assert_allclose(g, exact, rtol=1e-5)


def test_fd_gradient_at_bound_stays_inside():
    seen = []

    def f(v):
        seen.append(v.copy())
        return float(v[0] ** 2)
    fd_gradient(f, np.array([0.0]), np.array([0.0]), np.array([1.0]))
    assert all(v[0] >= 0.0 for v in seen)


def test_nonfinite_at_init_is_an_error():
    with pytest.raises(InitializationError):
        minimize_box(lambda v: float("nan"), theta([1.0], [0.0], [2.0]))


def test_nonfinite_region_is_a_barrier():
    def f(v):
        if v[0] < 0.5:
            raise NonFiniteObjectiveError("degenerate")
        return float((v[0] - 0.1) ** 2)
    res = minimize_box(f, theta([2.0], [0.0], [3.0]))
    assert res.theta.values[0] >= 0.5
    assert res.theta.values[0] == pytest.approx(0.5, abs=1e-3)


def test_theta_vector_validation():
    with pytest.raises(InputError):
        theta([3.0], [0.0], [1.0])
    with pytest.raises(InputError):
        ThetaVector(("a", "a"), [0, 0], [0, 0], [1, 1])
    t = theta([0.5], [0.0], [np.inf], names=("v",))
    assert t["v"] == 0.5 and t.as_dict() == {"v": 0.5}
    assert ThetaVector.from_json(t.to_json()) == t or np.array_equal(
        ThetaVector.from_json(t.to_json()).values, t.values)


def test_variance_recovery_against_grid_search():
    rng = np.random.default_rng(42)
    n = 200
    x = np.cumsum(rng.normal(scale=np.sqrt(0.1), size=n))
    y = x + rng.normal(scale=np.sqrt(0.4), size=n)
    obs = ObservationSeries(y)
    model = MatrixModel(
        {"obs_matrix": [[1.0]], "transition": [[1.0]], "obs_cov": [[0.4]],
         "state_cov": [[0.1]], "init_mean": [0.0], "init_cov": [[0.0]]},
        [{"name": "obs_var", "cells": [["obs_cov", 0, 0]], "init": 1.0, "variance": True}])
    grid = np.arange(1e-3, 5.0, 1e-3)
    vals = [classical_nll([g], obs, model) for g in grid]
    best = grid[int(np.argmin(vals))]
    res = minimize_box(lambda v: classical_nll(v, obs, model), model.theta([1.0]))
    assert abs(res.theta.values[0] - best) < 0.15
    assert res.objective <= min(vals) + 1e-6
    assert local_level().p == 1
