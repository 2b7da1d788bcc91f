"""Seeded simulation of contaminated DCRW tracks, metrics and study runners.

Every random draw comes from a Philox generator keyed by ``(seed, stream)``,
so adding a method or a metric never shifts the draws of another stream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dcrw import DcrwTheta, build_dcrw
from .errors import InputError
from .ssm import ObservationSeries

log = logging.getLogger(__name__)

STREAM_DGP = 0
STREAM_INDICES = 1
STREAM_DIRECTIONS = 2
STREAM_CLUSTER = 3
STREAM_OOS = 4

TRUE_THETA = DcrwTheta(0.8, (0.4, 0.4), (0.1, 0.1))
CONFIGS = ("clean", "fixed_distance", "multi_level", "cluster")
STUDY3_POSITIONS = {0.0: (), 0.05: (10,), 0.10: (5, 15), 0.15: (5, 10, 15),
                    0.20: (5, 10, 15, 20)}


def rng_for(seed, stream) -> np.random.Generator:
    """Counter-based generator for one (seed, stream) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def outlier_count(rate, n) -> int:
    # floor with a guard against 0.1 * 99 style representation error
    return int(math.floor(rate * (n - 1) + 1e-9))


@dataclass(frozen=True)
class ContaminationSpec:
    """In-sample outlier mechanism plus the out-of-sample plan.

    ``config`` is one of ``clean``, ``fixed_distance``, ``multi_level`` or
    ``cluster``.  ``oos_plan="study3"`` places outliers at the fixed test
    positions for ``oos_rate`` (defaults to ``rate``).
    """

    config: str = "clean"
    rate: float = 0.0
    distance: float = 5.0
    levels: tuple = (3.0, 5.0, 7.0)
    center: tuple = (20.0, 20.0)
    cluster_var: float = 4.0
    oos_plan: str = "clean"
    oos_rate: float | None = None
    oos_distance: float = 5.0

    def __post_init__(self):
        if self.config not in CONFIGS:
            raise InputError(f"unknown contamination config {self.config!r}")
        if not 0.0 <= self.rate < 0.5:
            raise InputError(f"contamination rate must be in [0, 0.5), got {self.rate}")
        if self.oos_plan not in ("clean", "study3"):
            raise InputError(f"unknown oos_plan {self.oos_plan!r}")
        if self.oos_plan == "study3" and _study3_key(self.effective_oos_rate) is None:
            raise InputError(f"no fixed test positions for rate {self.effective_oos_rate}")
        if self.config == "clean":
            object.__setattr__(self, "rate", 0.0)

    @property
    def effective_oos_rate(self) -> float:
        return self.rate if self.oos_rate is None else self.oos_rate


def _study3_key(rate):
    for k in STUDY3_POSITIONS:
        if abs(k - rate) < 1e-9:
            return k
    return None


@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    seed: int = 0
    dgp_theta: DcrwTheta = TRUE_THETA
    contamination: ContaminationSpec = field(default_factory=ContaminationSpec)
    n_oos: int = 20

    def __post_init__(self):
        if self.n < 10:
            raise InputError(f"n must be at least 10, got {self.n}")
        if self.n_oos < 0:
            raise InputError("n_oos must be non-negative")


@dataclass
class SimData:
    """One simulated data set.

    ``train``/``test`` are what a method sees; ``clean_train``/``clean_test``
    hold the uncontaminated observations; indices are 0-based within each part.
    """

    config: SimConfig
    states: np.ndarray
    clean_train: np.ndarray
    clean_test: np.ndarray
    train: ObservationSeries
    test: ObservationSeries
    outliers: np.ndarray
    outlier_distances: np.ndarray
    test_outliers: np.ndarray

    @property
    def true_theta(self) -> DcrwTheta:
        return self.config.dgp_theta


def generate_clean(cfg: SimConfig):
    """Simulate ``n + n_oos`` steps of the DCRW from a zero initial state.

    Returns:
        ``(observations, states)`` with shapes (N, 2) and (N, 4).
    """
    spec = build_dcrw(cfg.dgp_theta)
    total = cfg.n + cfg.n_oos
    rng = rng_for(cfg.seed, STREAM_DGP)
    zw = rng.standard_normal((total, 2))
    zv = rng.standard_normal((total, 2))
    sw = np.sqrt(np.diag(spec.state_cov)[:2])
    sv = np.sqrt(np.diag(spec.obs_cov))
    x = np.zeros(4)
    states = np.empty((total, 4))
    y = np.empty((total, 2))
    for t in range(total):
        w = np.zeros(4)
        w[:2] = sw * zw[t]
        x = spec.transition @ x + w
        states[t] = x
        y[t] = spec.obs_matrix @ x + sv * zv[t]
    return y, states


def contaminate(clean, spec: ContaminationSpec, seed):
    """Replace a fraction of rows 2..n of ``clean`` by outliers.

    The outlier positions are the leading entries of one seeded permutation,
    so index sets are nested in the rate for a fixed seed.  Directions and
    cluster draws are tied to the permutation slot, hence identical across
    rates and distances.

    Returns:
        ``(values, outlier_indices, clean_rows, distances)``; indices are
        0-based and sorted, ``distances`` is NaN for cluster outliers.
    """
    clean = np.asarray(clean, dtype=float)
    n = clean.shape[0]
    if not 0.0 <= spec.rate < 0.5:
        raise InputError("contamination rate must be in [0, 0.5)")
    m = outlier_count(spec.rate, n) if spec.config != "clean" else 0
    out = clean.copy()
    if m == 0:
        return out, np.array([], dtype=int), clean[:0].copy(), np.array([])
    perm = rng_for(seed, STREAM_INDICES).permutation(np.arange(1, n))
    angles = rng_for(seed, STREAM_DIRECTIONS).uniform(0.0, 2.0 * np.pi, size=n - 1)
    chosen = perm[:m]
    dist = np.full(m, np.nan)
    if spec.config == "fixed_distance":
        dist[:] = spec.distance
    elif spec.config == "multi_level":
        levels = np.asarray(spec.levels, dtype=float)
        dist = levels[np.arange(m) % levels.size]
    if spec.config == "cluster":
        z = rng_for(seed, STREAM_CLUSTER).standard_normal((n - 1, 2))[:m]
        out[chosen] = np.asarray(spec.center) + math.sqrt(spec.cluster_var) * z
    else:
        a = angles[:m]
        out[chosen] = clean[chosen] + dist[:, None] * np.column_stack([np.cos(a), np.sin(a)])
    order = np.argsort(chosen)
    return out, chosen[order], clean[chosen[order]], dist[order]


def contaminate_test(clean_test, spec: ContaminationSpec, seed):
    """Fixed-position out-of-sample outliers (1-based test positions 5, 10, ...)."""
    out = np.array(clean_test, dtype=float)
    if spec.oos_plan == "clean":
        return out, np.array([], dtype=int)
    pos = np.array([p - 1 for p in STUDY3_POSITIONS[_study3_key(spec.effective_oos_rate)]
                    if p <= out.shape[0]], dtype=int)
    a = rng_for(seed, STREAM_OOS).uniform(0.0, 2.0 * np.pi, size=max(out.shape[0], 1))
    for i in pos:
        out[i] = out[i] + spec.oos_distance * np.array([np.cos(a[i]), np.sin(a[i])])
    return out, pos


def simulate(cfg: SimConfig) -> SimData:
    """Clean DGP draw plus in-sample and out-of-sample contamination."""
    y, states = generate_clean(cfg)
    clean_train, clean_test = y[:cfg.n], y[cfg.n:]
    train, idx, _, dist = contaminate(clean_train, cfg.contamination, cfg.seed)
    test, test_idx = contaminate_test(clean_test, cfg.contamination, cfg.seed)
    times_test = np.arange(cfg.n + 1, cfg.n + cfg.n_oos + 1)
    return SimData(cfg, states, clean_train, clean_test, ObservationSeries(train),
                   ObservationSeries(test, times_test) if cfg.n_oos else None,
                   idx, dist, test_idx)


@dataclass
class RunMetrics:
    """Per-run performance of one method.

    ``sensitivity`` is NaN (undefined) when there are no true outliers.
    ``msfe`` scores forecasts against the test data as observed,
    ``msfe_clean`` against the clean test values excluding the points the
    reference FUT filter flagged, and ``msfe_truth`` against the clean values
    at every test point.
    """

    sensitivity: float
    specificity: float
    rmse_phi: float
    rmse_obs_var: float
    rmse_state_var: float
    msfe: float
    msfe_clean: float
    msfe_truth: float


def _theta_parts(theta):
    v = np.asarray(getattr(theta, "values", theta), dtype=float)
    return v[0], v[1:3], v[3:5]


def _mean_sq(err, keep):
    keep = keep & np.all(np.isfinite(err), axis=1)
    if not keep.any():
        return float("nan")
    return float(np.mean(np.sum(err[keep] ** 2, axis=1)))


def compute_metrics(truth, fit, forecasts, true_outliers, clean_test, *, n=None,
                    exclude=None, test_values=None) -> RunMetrics:
    """Detection rates, parameter RMSEs and forecast errors for one fit.

    Args:
        truth: true parameters (DcrwTheta or 5-array).
        fit: FitReport; ``fit.flagged`` are the detected outliers.
        forecasts: ForecastOutput on the test segment (or None).
        true_outliers: 0-based in-sample outlier indices.
        clean_test: uncontaminated test observations.
        n: in-sample length (defaults to ``fit.n``).
        exclude: test indices dropped from ``msfe_clean``.
        test_values: the test data as observed (defaults to ``clean_test``).
    """
    n = fit.n if n is None else n
    truth_v = truth.as_array() if hasattr(truth, "as_array") else np.asarray(truth, dtype=float)
    true_set = set(int(i) for i in true_outliers)
    flagged = set(int(i) for i in fit.flagged)
    sens = len(flagged & true_set) / len(true_set) if true_set else float("nan")
    n_clean = n - len(true_set)
    spec = (n_clean - len(flagged - true_set)) / n_clean if n_clean else float("nan")
    p_hat, v_hat, w_hat = _theta_parts(fit.theta)
    p_true, v_true, w_true = _theta_parts(truth_v)
    rmse = (float(abs(p_hat - p_true)), float(np.linalg.norm(v_hat - v_true)),
            float(np.linalg.norm(w_hat - w_true)))
    if forecasts is None:
        return RunMetrics(sens, spec, *rmse, float("nan"), float("nan"), float("nan"))
    clean_test = np.asarray(clean_test, dtype=float)
    observed = clean_test if test_values is None else np.asarray(test_values, dtype=float)
    keep = np.ones(clean_test.shape[0], dtype=bool)
    keep_clean = keep.copy()
    if exclude is not None and len(exclude):
        keep_clean[np.asarray(list(exclude), dtype=int)] = False
    return RunMetrics(sens, spec, *rmse,
                      _mean_sq(observed - forecasts.forecast, keep),
                      _mean_sq(clean_test - forecasts.forecast, keep_clean),
                      _mean_sq(clean_test - forecasts.forecast, keep))


# --- studies -----------------------------------------------------------------

METHOD_ROWS = ("oracle", "classical", "roams-kalman", "roams-fut", "huber", "trimmed")
STUDY2_DISTANCES = (1.0, 3.0, 5.0, 7.0, 9.0)
STUDY2_RATES = (0.0, 0.05, 0.10, 0.15, 0.20)
STUDY3_RATES = (0.05, 0.10, 0.15, 0.20)

RESULT_COLUMNS = ("study", "config", "n", "rate", "distance", "method", "run", "seed",
                  "sensitivity", "specificity", "rmse_phi", "rmse_obs_var",
                  "rmse_state_var", "msfe", "msfe_clean", "msfe_truth", "k", "lambda_star",
                  "k_monotone", "converged", "failure")


@dataclass(frozen=True)
class StudyScale:
    """Size of a study run: ``runs`` seeds for every ``n`` in ``n_list``.

    ``configs`` restricts Study 1 to a subset of contamination configurations
    and ``rates`` restricts Study 3 (or the Study 2 rate axis).
    """

    runs: int = 50
    n_list: tuple = (100, 200)
    configs: tuple = ("clean", "fixed_distance", "multi_level", "cluster")
    rates: tuple | None = None
    grid_size: int = 20
    trim_alpha: float = 0.10

    def __post_init__(self):
        if self.runs < 1:
            raise InputError("runs must be at least 1")
        if not self.n_list or min(self.n_list) < 10:
            raise InputError("every n must be at least 10")
        for c in self.configs:
            if c not in CONFIGS:
                raise InputError(f"unknown contamination config {c!r}")


def run_seed(seed, study, run) -> int:
    """Per-run seed derived from the master seed (independent streams per run)."""
    s = np.random.SeedSequence([int(seed), int(study), int(run)]).generate_state(2, np.uint32)
    return int(s[0]) << 32 | int(s[1])


def _settings(study, scale: StudyScale):
    """(config, rate, distance, oos_plan) tuples for a study."""
    if study == 1:
        out = []
        for c in scale.configs:
            out.append((c, 0.0 if c == "clean" else 0.10, 5.0, "clean"))
        return out
    if study == 2:
        rates = STUDY2_RATES if scale.rates is None else tuple(scale.rates)
        out = [("fixed_distance", 0.10, d, "clean") for d in STUDY2_DISTANCES]
        out += [("fixed_distance" if r > 0 else "clean", r, 5.0, "clean") for r in rates]
        return out
    if study == 3:
        rates = STUDY3_RATES if scale.rates is None else tuple(scale.rates)
        return [("fixed_distance", r, 5.0, "study3") for r in rates]
    raise InputError(f"unknown study {study!r}; expected 1, 2 or 3")


def _is_monotone(path):
    ks = [r.k for r in path if r.error is None]
    return bool(all(a >= b for a, b in zip(ks, ks[1:])))


def evaluate_methods(data: SimData, *, grid_size=20, trim_alpha=0.10, methods=METHOD_ROWS):
    """Fit every method on ``data.train`` and forecast ``data.test``.

    Returns:
        ``{method: (FitReport | None, ForecastOutput | None, failure | None)}``.
    """
    from .benchmarks import huber_fit, oracle_fit, trimmed_fit
    from .dcrw import DcrwModel
    from .online import forecast_run
    from .optim import minimize_box
    from .likelihood import classical_objective
    from .roams import _plain_report, roams_select

    builder = DcrwModel()
    obs = data.train
    results = {}

    def attempt(name, fn):
        try:
            results[name] = fn()
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.warning("%s failed on seed %d: %s", name, data.config.seed, exc)
            results[name] = (None, None, type(exc).__name__)

    def forecast(fit, kind, **kw):
        if data.test is None:
            return None
        return forecast_run(fit, data.test, kind, builder, **kw)

    init = builder.initial_theta(obs)
    test_out = data.test_outliers
    classical = {}

    def fit_classical():
        res = minimize_box(classical_objective(obs, builder), init)
        classical["res"] = res
        rep = _plain_report("classical", obs, builder, init, res)
        return rep, forecast(rep, "kalman"), None

    def fit_oracle():
        rep = oracle_fit(obs, builder, init, data.outliers)
        return rep, forecast(rep, "kalman", known_outliers=test_out), None

    def fit_roams():
        rep = roams_select(obs, builder, init, J=grid_size, classical=classical.get("res"))
        return rep, forecast(rep, "kalman"), None

    if "oracle" in methods:
        attempt("oracle", fit_oracle)
    attempt("classical", fit_classical)
    if "roams-kalman" in methods or "roams-fut" in methods:
        attempt("roams-kalman", fit_roams)
        fit = results["roams-kalman"][0]
        if fit is not None:
            attempt("roams-fut", lambda: (fit, forecast(fit, "fut"), None))
        else:
            results["roams-fut"] = results["roams-kalman"]
    if "huber" in methods:
        attempt("huber", lambda: (lambda r: (r, forecast(r, "huber"), None))(
            huber_fit(obs, builder, init)))
    if "trimmed" in methods:
        attempt("trimmed", lambda: (lambda r: (r, forecast(r, "huber"), None))(
            trimmed_fit(obs, builder, init, trim_alpha)))
    return {m: results[m] for m in methods if m in results}


def run_single(study, cfg: SimConfig, run, *, grid_size=20, trim_alpha=0.10) -> list:
    """All result rows for one simulated data set."""
    data = simulate(cfg)
    res = evaluate_methods(data, grid_size=grid_size, trim_alpha=trim_alpha)
    fut = res.get("roams-fut", (None, None, None))[1]
    exclude = np.flatnonzero(fut.flagged) if fut is not None else np.array([], dtype=int)
    c = cfg.contamination
    rows = []
    for method, (fit, fc, failure) in res.items():
        row = {"study": study, "config": c.config, "n": cfg.n, "rate": c.rate,
               "distance": c.distance if c.config in ("fixed_distance",) else float("nan"),
               "method": method, "run": run, "seed": cfg.seed}
        if fit is None:
            row.update({k: float("nan") for k in RESULT_COLUMNS if k not in row})
            row.update(k=-1, lambda_star=float("nan"), k_monotone=False, converged=False,
                       failure=failure)
        else:
            m = compute_metrics(cfg.dgp_theta, fit, fc, data.outliers, data.clean_test,
                                exclude=exclude, test_values=None if data.test is None
                                else data.test.values)
            row.update(vars(m))
            row.update(k=fit.k,
                       lambda_star=float("nan") if fit.lambda_star is None else fit.lambda_star,
                       k_monotone=_is_monotone(fit.path) if fit.path else True,
                       converged=fit.converged, failure="")
        rows.append(row)
    return rows


def study_tasks(study, scale: StudyScale, seed):
    tasks = []
    for n in scale.n_list:
        for run in range(scale.runs):
            s = run_seed(seed, study, run)
            for config, rate, dist, oos in _settings(study, scale):
                spec = ContaminationSpec(config, rate, distance=dist, oos_plan=oos)
                tasks.append((study, SimConfig(n=n, seed=s, contamination=spec), run))
    return tasks


def _task(args):
    study, cfg, run, grid_size, trim_alpha = args
    return run_single(study, cfg, run, grid_size=grid_size, trim_alpha=trim_alpha)


def _sort_key(row):
    return (row["study"], CONFIGS.index(row["config"]), row["n"], row["rate"],
            -1.0 if math.isnan(row["distance"]) else row["distance"],
            METHOD_ROWS.index(row["method"]), row["run"])


def run_study(study, scale: StudyScale | None = None, seed=0, jobs=1) -> list:
    """Tidy result rows (dicts keyed by :data:`RESULT_COLUMNS`) for a study.

    Rows are sorted by (study, config, n, rate, distance, method, run) so the
    table does not depend on ``jobs``.  Study 2 reuses one clean draw per seed
    across its distance and rate axes.
    """
    scale = StudyScale() if scale is None else scale
    tasks = [(s, c, r, scale.grid_size, scale.trim_alpha)
             for s, c, r in study_tasks(study, scale, seed)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_task, tasks))
    else:
        chunks = [_task(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=_sort_key)
    # Study 2 repeats the (fixed_distance, 0.10, 5) cell on both axes
    out, seen = [], set()
    for r in rows:
        key = _cell(r, ("study", "config", "n", "rate", "distance", "method", "run"))
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    return out


def _cell(row, fields):
    # NaN distances (cluster, multi-level, clean) must compare equal as keys
    return tuple(None if isinstance(row[k], float) and math.isnan(row[k]) else row[k]
                 for k in fields)


SUMMARY_METRICS = ("sensitivity", "specificity", "rmse_phi", "rmse_obs_var",
                   "rmse_state_var", "msfe", "msfe_clean", "msfe_truth", "k")


def summarize(rows) -> list:
    """Means per (study, config, n, rate, distance, method), NaNs and failures skipped.

    RMSE columns are also reported relative to the oracle mean of the same cell.
    """
    groups = {}
    for r in rows:
        key = _cell(r, ("study", "config", "n", "rate", "distance", "method"))
        groups.setdefault(key, []).append(r)
    out = []
    for key, rs in groups.items():
        ok = [r for r in rs if not r["failure"]]
        row = {k: rs[0][k] for k in ("study", "config", "n", "rate", "distance", "method")}
        row["runs"] = len(rs)
        row["failures"] = len(rs) - len(ok)
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[m] = float(vals.mean()) if vals.size else float("nan")
        out.append(row)
    cell = ("study", "config", "n", "rate", "distance")
    oracle = {_cell(r, cell): r for r in out if r["method"] == "oracle"}
    for r in out:
        o = oracle.get(_cell(r, cell))
        for m in ("rmse_phi", "rmse_obs_var", "rmse_state_var"):
            r[f"rel_{m}"] = r[m] / o[m] if o is not None and o[m] > 0 else float("nan")
    return out
