import math

import numpy as np
import pytest

from conftest import sim
from roams_kit.errors import DegenerateGridError, InputError
from roams_kit.likelihood import classical_nll, robust_nll
from roams_kit.optim import minimize_box
from roams_kit.likelihood import classical_objective
from roams_kit.roams import (bic, build_lambda_grid, classical_fit, hard_threshold, lambda_grid,
                             max_mahalanobis, roams_fit_fixed_lambda, roams_select,
                             threshold_statistic)
from roams_kit.ssm import ObservationSeries, run_filter


def test_grid_examples():
    np.testing.assert_allclose(lambda_grid(10.0, 5).values, [2, 4, 6, 8, 10])
    np.testing.assert_allclose(lambda_grid(7.5, 2).values, [2, 7.5])
    with pytest.raises(DegenerateGridError):
        lambda_grid(1.5, 5)
    with pytest.raises(InputError):
        lambda_grid(10.0, 1)


def test_threshold_statistic_examples():
    assert threshold_statistic([3, 0], np.eye(2)) == pytest.approx(3.0, abs=1e-14)
    assert threshold_statistic([0, 0], np.eye(2)) == 0.0
    S = np.diag([2.0, 0.5])
    r = np.array([1.0, 2.0])
    direct = math.sqrt(np.linalg.slogdet(S)[1] + r @ np.linalg.solve(S, r))
    assert threshold_statistic(r, S) == pytest.approx(math.sqrt(8.5), abs=1e-12)
    assert threshold_statistic(r, S) == pytest.approx(direct, abs=1e-12)
    # negative argument clamps to zero
    assert threshold_statistic([0.0], [[0.1]]) == 0.0


def test_bic_examples():
    assert bic(10.0, 2, 100) == pytest.approx(29.2103, abs=1e-4)
    assert bic(10.0, 0, 100) == 20.0
    with pytest.raises(InputError):
        bic(1.0, 0, 0)


def test_lambda_max_recomputed(dcrw):
    data = sim(50, seed=3, config="clean", rate=0.0)
    obs = data.train
    rep = classical_fit(obs, dcrw)
    spec = dcrw.build(rep.theta.values, dcrw.initial_state(obs))
    filt = run_filter(spec, obs)
    md = [math.sqrt(filt.resid[t] @ np.linalg.solve(filt.innov_cov[t], filt.resid[t]))
          for t in range(obs.n)]
    assert max_mahalanobis(rep.theta, obs, dcrw) == pytest.approx(max(md), rel=1e-10)
    grid = build_lambda_grid(rep, obs, dcrw, 5)
    assert grid.values[0] == 2.0 and grid.values[-1] == pytest.approx(max(md), rel=1e-10)


def test_hard_threshold_flags_exact_residuals(contaminated, dcrw):
    obs = contaminated.train
    theta = dcrw.initial_theta(obs)
    filt = run_filter(dcrw.build(theta.values, dcrw.initial_state(obs)), obs)
    gamma, stats = hard_threshold(filt, 3.0)
    flagged = np.any(gamma != 0, axis=1)
    assert np.array_equal(flagged, stats > 3.0)
    assert np.array_equal(gamma[flagged], filt.resid[flagged])


def test_safeguard_clamps_by_weakest_then_time():
    # a filter-like stub with hand-made statistics
    class F:
        n = 6
        logdet = np.zeros(6)
        md2 = np.array([16.0, 25.0, 16.0, 9.0, 36.0, 1.0])
        missing = np.zeros(6, dtype=bool)
        resid = np.arange(12, dtype=float).reshape(6, 2) + 1.0
    gamma, _ = hard_threshold(F, 2.0)
    # five exceed 2; keep (6-1)//2 = 2 strongest: t=4 (6) and t=1 (5)
    assert np.flatnonzero(np.any(gamma != 0, axis=1)).tolist() == [1, 4]


def test_infinite_lambda_is_classical(dcrw):
    obs = sim(60, seed=4).train
    init = dcrw.initial_theta(obs)
    fit = roams_fit_fixed_lambda(obs, dcrw, init, np.inf)
    cl = minimize_box(classical_objective(obs, dcrw), init)
    assert fit.k == 0 and fit.converged
    assert fit.robust_nll == pytest.approx(cl.objective, abs=1e-8)
    assert fit.bic == pytest.approx(2 * classical_nll(cl.theta, obs, dcrw), abs=1e-8)


def test_clean_series_flags_little(dcrw):
    data = sim(100, seed=5, config="clean", rate=0.0)
    obs = data.train
    init = dcrw.initial_theta(obs)
    fit = roams_fit_fixed_lambda(obs, dcrw, init, 4.0)
    cl = classical_fit(obs, dcrw, init)
    assert fit.k <= 2
    if fit.k == 0:
        np.testing.assert_allclose(fit.theta.values, cl.theta.values, atol=1e-4)


def test_fixed_lambda_finds_outliers(contaminated, dcrw):
    obs = contaminated.train
    fit = roams_fit_fixed_lambda(obs, dcrw, dcrw.initial_theta(obs), 3.0)
    true = set(contaminated.outliers.tolist())
    assert len(true & set(fit.flagged)) / len(true) >= 0.85
    assert 2 * fit.k < obs.n
    assert fit.stop_reason in ("converged", "cycle", "max_outer")
    assert fit.bic == pytest.approx(bic(robust_nll(fit.theta, fit.gamma, obs, dcrw), fit.k,
                                        obs.n_complete), abs=1e-9)


def test_select_reports_minimum_bic(contaminated, dcrw):
    obs = contaminated.train
    rep = roams_select(obs, dcrw, J=8)
    bics = [r.bic for r in rep.path]
    j = int(np.argmin(bics))
    assert rep.lambda_star == rep.path[j].lam
    assert rep.bic == pytest.approx(min(bics))
    assert rep.k == rep.path[j].k
    assert 0.05 <= rep.k / obs.n <= 0.2
    again = roams_select(obs, dcrw, J=8)
    assert again.bic_table() == rep.bic_table()
    assert rep.gamma.support.tolist() == list(rep.flagged)


def test_target_proportion_within_one_grid_step(contaminated, dcrw):
    obs = contaminated.train
    rep = roams_select(obs, dcrw, J=10, selection=("target_proportion", 0.10))
    props = sorted(abs(r.k / obs.n_complete - 0.10) for r in rep.path)
    assert abs(rep.k / obs.n_complete - 0.10) == props[0]
    with pytest.raises(InputError):
        roams_select(obs, dcrw, J=10, selection=("target_proportion", 0.6))


def test_degenerate_grid_returns_classical(dcrw):
    # a perfectly smooth track: every standardized residual is tiny
    t = np.arange(30, dtype=float)
    obs = ObservationSeries(np.column_stack([t, 0.5 * t]))
    rep = roams_select(obs, dcrw, J=5, lambdas=None)
    if "degenerate_grid" in rep.warnings:
        assert rep.k == 0 and rep.path == []
    else:
        assert rep.k < obs.n / 2


def test_missing_points_are_never_flagged(contaminated, dcrw):
    obs = contaminated.train.with_missing(contaminated.outliers[:5])
    fit = roams_fit_fixed_lambda(obs, dcrw, dcrw.initial_theta(obs), 2.5)
    assert not set(fit.flagged) & set(contaminated.outliers[:5].tolist())
