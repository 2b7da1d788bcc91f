import numpy as np
import pytest
from mpmath import mp

from conftest import sim
from roams_kit.dcrw import DcrwTheta, build_dcrw, dcrw_initial_state
from roams_kit.errors import InputError
from roams_kit.online import (FutConfig, StreamingFilter, chi2_quantile, default_threshold,
                              forecast_run, run_fut_filter, run_huber_filter,
                              run_kalman_forecast, run_threshold_filter)
from roams_kit.roams import classical_fit
from roams_kit.ssm import ObservationSeries, filter_pass

FIELDS = ("forecast", "innov_cov", "flagged", "filt_state", "filt_state_cov")
THETA = DcrwTheta(0.8, (0.4, 0.4), (0.1, 0.1))


def dcrw_spec(first=(0.0, 0.0)):
    return build_dcrw(THETA, *dcrw_initial_state(np.asarray(first, dtype=float)))


def clean_track(seed, n=20):
    return sim(max(n, 10), seed=seed, config="clean", rate=0.0).clean_train[:n]


def same(a, b):
    for f in FIELDS:
        assert np.array_equal(getattr(a, f), getattr(b, f)), f


def test_default_threshold_examples():
    assert default_threshold(1) == pytest.approx(2.575829, abs=1e-6)
    assert default_threshold(2) == pytest.approx(3.034854, abs=1e-6)
    assert default_threshold(2) > default_threshold(1)


@pytest.mark.parametrize("df", [1, 2, 3, 5])
@pytest.mark.parametrize("prob", [0.5, 0.9, 0.95, 0.99, 0.999])
def test_chi2_quantile_against_high_precision(df, prob):
    mp.dps = 40
    q = mp.findroot(lambda x: mp.gammainc(mp.mpf(df) / 2, 0, x / 2, regularized=True) - prob,
                    mp.mpf(df))
    assert chi2_quantile(prob, df) == pytest.approx(float(q), abs=1e-8)


def test_threshold_reductions():
    y = ObservationSeries(clean_track(1))
    spec = dcrw_spec(y.values[0])
    same(run_threshold_filter(spec, y, np.inf), run_kalman_forecast(spec, y))
    same(run_fut_filter(spec, y, FutConfig(3.0, 1.0)), run_threshold_filter(spec, y, 3.0))


def test_threshold_zero_flags_everything():
    y = ObservationSeries(clean_track(2))
    out = filter_pass(dcrw_spec(y.values[0]), y, c=0.0)
    # the first forecast is exact, so MD = 0 is not above c = 0
    assert out.flagged[1:].all()
    np.testing.assert_array_equal(out.filt_state[1:], out.pred_state[1:])


def test_injected_outlier_is_flagged():
    track = clean_track(3)
    track[10] += [5.0, 0.0]
    y = ObservationSeries(track)
    out = run_threshold_filter(dcrw_spec(track[0]), y, default_threshold(2))
    assert out.flagged[10]
    np.testing.assert_array_equal(out.filt_state[10][:2], out.forecast[10])


def test_fut_doubles_covariance_at_flags():
    track = clean_track(4)
    track[8] += [0.0, 6.0]
    y = ObservationSeries(track)
    spec = dcrw_spec(track[0])
    c = default_threshold(2)
    fut = filter_pass(spec, y, c=c, b=2.0)
    thr = filter_pass(spec, y, c=c)
    assert fut.flagged[8]
    for t in np.flatnonzero(fut.flagged):
        np.testing.assert_array_equal(fut.filt_state[t], fut.pred_state[t])
        np.testing.assert_array_equal(fut.filt_state_cov[t], 2.0 * fut.pred_state_cov[t])
    assert np.all(fut.innov_cov[9] >= thr.innov_cov[9])


def test_fut_cascade_is_milder():
    fewer = cascades = 0
    for seed in range(100):
        track = clean_track(1000 + seed)
        track[10] += 8.0 * np.array([np.cos(seed), np.sin(seed)])
        y = ObservationSeries(track)
        spec = dcrw_spec(track[0])
        c = default_threshold(2)
        thr = run_threshold_filter(spec, y, c).flagged[11:].sum()
        fut = run_fut_filter(spec, y, FutConfig(c, 2.0)).flagged[11:].sum()
        assert fut <= thr
        # a cascade: more than one clean point rejected after the outlier
        if thr >= 2:
            cascades += 1
            fewer += fut < thr
    assert cascades > 0 and fewer == cascades


def test_fut_config_validation():
    with pytest.raises(InputError):
        FutConfig(0.0)
    with pytest.raises(InputError):
        FutConfig(3.0, 0.5)


def test_forecast_run_first_error_zero(dcrw):
    data = sim(100, seed=6)
    fit = classical_fit(data.train, dcrw)
    test = data.test.with_missing([0, 1])
    for kind in ("kalman", "threshold", "fut", "huber"):
        fc = forecast_run(fit, test, kind, dcrw)
        assert np.isnan(fc.forecast[:2]).all()
        np.testing.assert_array_equal(fc.forecast[2], test.values[2])
        assert not fc.flagged[:2].any()


def test_forecast_kalman_equals_fut_without_threshold(dcrw):
    data = sim(100, seed=7)
    fit = classical_fit(data.train, dcrw)
    same(forecast_run(fit, data.test, "kalman", dcrw),
         forecast_run(fit, data.test, "fut", dcrw, c=np.inf))


def test_forecast_run_rejects_empty_test(dcrw):
    data = sim(50, seed=8)
    fit = classical_fit(data.train, dcrw)
    empty = data.test.with_missing(range(data.test.n))
    with pytest.raises(InputError):
        forecast_run(fit, empty, "kalman", dcrw)
    with pytest.raises(InputError):
        forecast_run(fit, data.test, "median", dcrw)


@pytest.mark.parametrize("kind", ["kalman", "threshold", "fut", "huber"])
def test_streaming_matches_batch(kind):
    track = clean_track(9)
    track[5] += [4.0, 4.0]
    track[12] = np.nan
    y = ObservationSeries(track)
    spec = dcrw_spec(track[0])
    c = default_threshold(2)
    batch = {"kalman": lambda: run_kalman_forecast(spec, y),
             "threshold": lambda: run_threshold_filter(spec, y, c),
             "fut": lambda: run_fut_filter(spec, y, FutConfig(c, 2.0)),
             "huber": lambda: run_huber_filter(spec, y, 2.4)}[kind]()
    knobs = {"kalman": {}, "threshold": {"c": c}, "fut": {"c": c, "b": 2.0},
             "huber": {"huber_k": 2.4}}[kind]
    sf = StreamingFilter(spec, **knobs)
    for t in range(y.n):
        step = sf.step(track[t])
        assert np.array_equal(step["forecast"], batch.forecast[t])
        assert np.array_equal(step["filt_state"], batch.filt_state[t])
        assert np.array_equal(step["filt_state_cov"], batch.filt_state_cov[t])
        assert step["flagged"] == bool(batch.flagged[t])
