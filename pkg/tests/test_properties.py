"""Randomized properties of the thresholding step and zero-gain filtering."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from roams_kit.dcrw import DcrwModel, DcrwTheta, build_dcrw, dcrw_initial_state
from roams_kit.roams import hard_threshold, roams_fit_fixed_lambda
from roams_kit.ssm import ObservationSeries, filter_pass

CASES = settings(max_examples=1000, deadline=None,
                 suppress_health_check=[HealthCheck.too_slow])


@st.composite
def cases(draw, max_n=40):
    """A DCRW parameter, a contaminated track and a missingness pattern."""
    n = draw(st.integers(4, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    theta = DcrwTheta(draw(st.floats(0.0, 1.0)),
                      tuple(draw(st.lists(st.floats(0.01, 2.0), min_size=2, max_size=2))),
                      tuple(draw(st.lists(st.floats(0.01, 2.0), min_size=2, max_size=2))))
    y = np.cumsum(rng.normal(size=(n, 2)), axis=0)
    frac = draw(st.floats(0.0, 0.6))
    bad = rng.random(n) < frac
    y[bad] += rng.normal(scale=draw(st.floats(1.0, 50.0)), size=(bad.sum(), 2))
    miss = rng.random(n) < draw(st.floats(0.0, 0.3))
    miss[0] = False
    y[miss] = np.nan
    spec = build_dcrw(theta, *dcrw_initial_state(y[0]))
    return spec, ObservationSeries(y)


def flags(gamma):
    return np.any(gamma != 0, axis=1)


@CASES
@given(cases(), st.floats(2.0, 10.0), st.floats(0.0, 10.0))
def test_flag_sets_shrink_as_lambda_grows(case, lam, step):
    spec, obs = case
    filt = filter_pass(spec, obs)
    small = flags(hard_threshold(filt, lam)[0])
    large = flags(hard_threshold(filt, lam + step)[0])
    assert not np.any(large & ~small)


@CASES
@given(cases(), st.floats(0.0, 10.0))
def test_safeguard_and_missing(case, lam):
    spec, obs = case
    filt = filter_pass(spec, obs)
    gamma, stats = hard_threshold(filt, lam)
    f = flags(gamma)
    assert 2 * f.sum() < obs.n
    assert not np.any(f & obs.missing_mask)
    np.testing.assert_array_equal(gamma[f], filt.resid[f])
    # flagged points dominate every unflagged candidate once the clamp is active
    cand = (stats > lam) & ~obs.missing_mask
    if np.any(cand & ~f):
        assert stats[f].min(initial=np.inf) >= stats[cand & ~f].max()


@CASES
@given(cases(), st.floats(2.0, 6.0))
def test_zero_gain_points_keep_the_prediction(case, lam):
    spec, obs = case
    gamma, _ = hard_threshold(filter_pass(spec, obs), lam)
    mask = flags(gamma)
    out = filter_pass(spec, obs, mask, gamma=gamma)
    zg = mask | obs.missing_mask
    assert np.array_equal(out.filt_state[zg], out.pred_state[zg])
    assert np.array_equal(out.filt_state_cov[zg], out.pred_state_cov[zg])
    # a flagged point is equivalent to a missing one
    blank = filter_pass(spec, obs.with_missing(np.flatnonzero(mask)))
    np.testing.assert_array_equal(out.filt_state, blank.filt_state)
    np.testing.assert_array_equal(out.filt_state_cov, blank.filt_state_cov)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(20, 60), st.integers(0, 2**32 - 1))
def test_fit_survives_gross_majority_contamination(n, seed):
    rng = np.random.default_rng(seed)
    y = np.cumsum(rng.normal(scale=0.3, size=(n, 2)), axis=0)
    bad = rng.permutation(np.arange(1, n))[: int(0.6 * n)]
    y[bad] += rng.normal(scale=30.0, size=(bad.size, 2))
    obs = ObservationSeries(y)
    model = DcrwModel()
    fit = roams_fit_fixed_lambda(obs, model, model.initial_theta(obs), 2.0, max_outer=10)
    assert 2 * fit.k < n
    assert 2 * int(fit.gamma.support.size) < n
