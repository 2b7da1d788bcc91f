import numpy as np
import pytest

from roams_kit.dcrw import (OBS_MATRIX, DcrwModel, DcrwTheta, build_dcrw, dcrw_initial_state,
                            extract_dcrw, init_dcrw_theta)
from roams_kit.errors import InputError, InsufficientDataError
from roams_kit.optim import VARIANCE_FLOOR
from roams_kit.ssm import ObservationSeries, run_filter


def test_transition_rows():
    spec = build_dcrw(DcrwTheta(0.8, (1, 1), (1, 1)))
    np.testing.assert_allclose(spec.transition[0], [1.8, 0, -0.8, 0])
    np.testing.assert_allclose(spec.transition[1], [0, 1.8, 0, -0.8])
    np.testing.assert_array_equal(spec.transition[2:], [[1, 0, 0, 0], [0, 1, 0, 0]])
    np.testing.assert_array_equal(build_dcrw(DcrwTheta(0.0, (1, 1), (1, 1))).transition[0],
                                  [1, 0, 0, 0])
    np.testing.assert_array_equal(spec.obs_matrix, OBS_MATRIX)


def test_covariances_and_round_trip():
    th = DcrwTheta(0.3, (0.2, 0.7), (0.05, 1.5))
    spec = build_dcrw(th)
    np.testing.assert_array_equal(spec.obs_cov, np.diag([0.2, 0.7]))
    assert np.all(spec.state_cov[2:, :] == 0) and np.all(spec.state_cov[:, 2:] == 0)
    back = extract_dcrw(spec)
    assert back.obs_var == th.obs_var and back.state_var == th.state_var
    assert back.phi == pytest.approx(th.phi, abs=1e-15)


def test_two_lag_form_matches_state_space():
    rng = np.random.default_rng(0)
    phi = 0.8
    spec = build_dcrw(DcrwTheta(phi, (0.4, 0.4), (0.1, 0.1)))
    w = rng.normal(size=(50, 2)) * np.sqrt(0.1)
    z = np.zeros((52, 2))
    x = np.zeros(4)
    for t in range(50):
        z[t + 2] = z[t + 1] + phi * (z[t + 1] - z[t]) + w[t]
        x = spec.transition @ x + np.concatenate([w[t], [0.0, 0.0]])
        np.testing.assert_allclose(x[:2], z[t + 2], atol=1e-12)
        np.testing.assert_allclose(x[2:], z[t + 1], atol=1e-12)


def test_initial_state_examples():
    mu, cov = dcrw_initial_state([3.0, -1.0])
    np.testing.assert_array_equal(mu, [3, -1, 3, -1])
    np.testing.assert_array_equal(cov, np.zeros((4, 4)))
    with pytest.raises(InputError):
        dcrw_initial_state([np.nan, 1.0])


@pytest.mark.parametrize("phi", [0.0, 0.25, 0.8, 1.0])
def test_first_prediction_is_first_observation(phi):
    y = np.array([[3.0, -1.0], [3.5, -0.5], [4.0, 0.1]])
    spec = build_dcrw(DcrwTheta(phi, (0.4, 0.4), (0.1, 0.1)), *dcrw_initial_state(y[0]))
    out = run_filter(spec, ObservationSeries(y))
    np.testing.assert_allclose(out.pred_obs[0], y[0], atol=1e-14)
    np.testing.assert_array_equal(out.pred_state_cov[0], spec.state_cov)


def test_mad_initialisation():
    # coordinate differences {1, 2, 4}: median 2, MAD 1
    y1 = np.cumsum([0.0, 1.0, 2.0, 4.0])
    y = np.column_stack([y1, 2 * y1])
    th = init_dcrw_theta(ObservationSeries(y))
    assert th.phi == 0.5
    assert th.obs_var[0] == 1.0 and th.state_var[0] == 1.0
    assert th.obs_var[1] == 4.0
    scaled = init_dcrw_theta(ObservationSeries(y), consistent_mad=True)
    assert scaled.obs_var[0] == pytest.approx(1.4826 ** 2)


def test_mad_constant_series_hits_floor():
    th = init_dcrw_theta(ObservationSeries(np.ones((6, 2))))
    assert th.obs_var == (VARIANCE_FLOOR, VARIANCE_FLOOR)


def test_mad_skips_gap_differences():
    y = np.column_stack([[0.0, 1.0, np.nan, 100.0, 102.0, 106.0]] * 2)
    th = init_dcrw_theta(ObservationSeries(y))
    # pairs: 1, 2, 4 (the 1 -> 100 jump spans the gap)
    assert th.obs_var[0] == 1.0


def test_insufficient_data():
    with pytest.raises(InsufficientDataError):
        init_dcrw_theta(ObservationSeries(np.array([[0.0, 0], [np.nan, np.nan], [1, 1]])))


def test_model_builder_contract():
    m = DcrwModel()
    y = np.array([[np.nan, np.nan], [1.0, 2.0], [1.5, 2.5], [2.0, 2.0], [2.2, 2.1]])
    obs = ObservationSeries(y)
    mu, _ = m.initial_state(obs)
    np.testing.assert_array_equal(mu, [1, 2, 1, 2])
    th = m.initial_theta(obs)
    assert th.names == ("phi", "obs_var1", "obs_var2", "state_var1", "state_var2")
    assert th.lower[0] == 0.0 and th.upper[0] == 1.0
    assert np.all(th.lower[1:] == VARIANCE_FLOOR)
    assert m.to_config() == {"kind": "dcrw", "consistent_mad": False}


def test_theta_validation():
    with pytest.raises(InputError):
        DcrwTheta(1.5, (1, 1), (1, 1))
    with pytest.raises(InputError):
        DcrwTheta(0.5, (1,), (1, 1))
