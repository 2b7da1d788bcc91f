"""``roams-kit`` command line: simulate, fit, forecast, smooth, bench and split.

Exit codes: 0 success, 2 input error, 3 non-convergence, 4 numerical failure.
Set ``ROAMS_KIT_LOG`` (e.g. ``INFO``/``DEBUG``) to change the log level.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalFailure, RoamsError
from .io import (file_digest, load_report, read_json, read_series, report_document,
                 write_dict_table, write_json, write_series, write_table)
from .models import model_from_config
from .ssm import ObservationSeries

log = logging.getLogger("roams_kit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERICAL = 4

METHODS = ("classical", "roams", "huber", "trimmed", "oracle")


@dataclass
class RunConfig:
    """Settings for ``fit``; a JSON config supplies defaults, flags override.

    Only one of ``lam`` (fixed threshold) and ``target_prop`` may be set;
    with neither, the threshold is chosen by minimum BIC.
    """

    model: dict | None = None
    method: str = "roams"
    grid_size: int = 20
    lam: float | None = None
    target_prop: float | None = None
    filter: str = "kalman"
    b: float = 2.0
    c: float | None = None
    seed: int = 0
    tol: float = 1e-4
    max_outer: int = 50
    huber_k: float | None = None
    trim_alpha: float = 0.10
    known_outliers: tuple = ()
    init_theta: dict | None = None

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.grid_size < 2:
            raise InputError("grid_size must be at least 2")
        if self.lam is not None and self.target_prop is not None:
            raise InputError("--lambda and --target-prop are mutually exclusive")
        if self.target_prop is not None and not 0.0 <= self.target_prop < 0.5:
            raise InputError("target proportion must lie in [0, 0.5)")
        if self.lam is not None and not self.lam > 0:
            raise InputError("lambda must be positive")
        if self.tol <= 0 or self.max_outer < 1:
            raise InputError("tol must be positive and max_outer at least 1")
        if not 0.0 <= self.trim_alpha < 0.5:
            raise InputError("trim_alpha must lie in [0, 0.5)")
        return self

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        alias = {"lambda": "lam", "grid-size": "grid_size", "target-prop": "target_prop"}
        kw = {}
        for k, v in d.items():
            k = alias.get(k, k)
            if k not in known:
                raise InputError(f"config: unknown field {k!r}")
            kw[k] = v
        if "known_outliers" in kw:
            kw["known_outliers"] = tuple(int(i) for i in kw["known_outliers"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InputError(f"config: {exc}") from None


def _setup_logging():
    level = os.environ.get("ROAMS_KIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- simulate ------------------------------------------------------------------

def _sim_config(d: dict, seed=None):
    from .dcrw import DcrwTheta
    from .simlab import ContaminationSpec, SimConfig, TRUE_THETA

    allowed = {"n", "seed", "n_oos", "dgp_theta", "contamination"}
    extra = set(d) - allowed
    if extra:
        raise InputError(f"config: unknown field(s) {sorted(extra)}")
    theta = TRUE_THETA
    if "dgp_theta" in d:
        t = d["dgp_theta"]
        try:
            theta = DcrwTheta(float(t["phi"]), tuple(map(float, t["obs_var"])),
                              tuple(map(float, t["state_var"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"config.dgp_theta: {exc}") from None
    cont = d.get("contamination", {})
    try:
        spec = ContaminationSpec(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in cont.items()})
    except TypeError as exc:
        raise InputError(f"config.contamination: {exc}") from None
    try:
        return SimConfig(n=int(d.get("n", 200)),
                         seed=int(d.get("seed", 0) if seed is None else seed),
                         dgp_theta=theta, contamination=spec, n_oos=int(d.get("n_oos", 20)))
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from None


def cmd_simulate(args) -> int:
    from .simlab import simulate

    cfg = _sim_config(read_json(args.config) if args.config else {}, args.seed)
    data = simulate(cfg)
    out = _out_dir(args)
    write_series(out / "data.csv", data.train)
    if data.test is not None:
        write_series(out / "test.csv", data.test)
    flags = np.zeros(cfg.n + cfg.n_oos, dtype=bool)
    flags[data.outliers] = True
    flags[cfg.n + data.test_outliers] = True
    clean = np.vstack([data.clean_train, data.clean_test])
    rows = []
    for i in range(cfg.n + cfg.n_oos):
        rows.append([i + 1, "train" if i < cfg.n else "test", *clean[i], bool(flags[i]),
                     *data.states[i]])
    write_table(out / "truth.csv", ["t", "segment", "y1_clean", "y2_clean", "outlier",
                                    "x1", "x2", "x3", "x4"], rows)
    return EXIT_OK


# --- fit -------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(read_json(args.config)) if args.config else RunConfig()
    for name, attr in (("method", "method"), ("grid_size", "grid_size"), ("lam", "lam"),
                       ("target_prop", "target_prop"), ("seed", "seed"), ("tol", "tol"),
                       ("max_outer", "max_outer"), ("huber_k", "huber_k"),
                       ("trim_alpha", "trim_alpha")):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, attr, v)
    if getattr(args, "known_outliers", None):
        cfg.known_outliers = tuple(int(i) for i in args.known_outliers.split(",") if i)
    if args.lam is not None and args.target_prop is None:
        cfg.target_prop = None
    if args.target_prop is not None and args.lam is None:
        cfg.lam = None
    return cfg.validate()


def fit_series(obs: ObservationSeries, cfg: RunConfig):
    """Run the configured estimator; returns a FitReport."""
    from .benchmarks import huber_fit, oracle_fit, trimmed_fit
    from .roams import classical_fit, roams_select

    builder = model_from_config(cfg.model)
    if builder.p != obs.p:
        raise InputError(f"model has p={builder.p} but data have p={obs.p}")
    init = builder.initial_theta(obs)
    if cfg.init_theta:
        vals = dict(init.as_dict())
        for k, v in cfg.init_theta.items():
            if k not in vals:
                raise InputError(f"init_theta: unknown parameter {k!r}")
            vals[k] = float(v)
        init = builder.theta([vals[k] for k in builder.names])
    if cfg.method == "classical":
        return classical_fit(obs, builder, init)
    if cfg.method == "oracle":
        return oracle_fit(obs, builder, init, cfg.known_outliers)
    if cfg.method == "huber":
        return huber_fit(obs, builder, init, cfg.huber_k)
    if cfg.method == "trimmed":
        return trimmed_fit(obs, builder, init, cfg.trim_alpha)
    selection = "min_bic" if cfg.target_prop is None else ("target_proportion", cfg.target_prop)
    return roams_select(obs, builder, init, J=cfg.grid_size, tol=cfg.tol,
                        max_outer=cfg.max_outer, selection=selection,
                        lambdas=None if cfg.lam is None else [cfg.lam])


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    obs = read_series(args.data)
    if obs.n_complete < 3:
        raise InputError(f"{args.data}: need at least 3 observed rows, got {obs.n_complete}")
    start = time.perf_counter()
    rep = fit_series(obs, cfg)
    elapsed = time.perf_counter() - start
    out = _out_dir(args)
    write_json(out / "report.json", report_document(rep, input_digest=file_digest(args.data),
                                                    wall_clock=round(elapsed, 3)))
    if rep.method == "roams":
        write_table(out / "bic_curve.csv", ["lambda", "bic", "k"], rep.bic_table())
        g = rep.gamma.values
        write_table(out / "outliers.csv", ["t"] + [f"gamma{j + 1}" for j in range(obs.p)],
                    ([_time(obs.times[t]), *g[t]] for t in rep.flagged))
    for w in rep.warnings:
        log.warning("fit warning: %s", w)
    if not rep.converged:
        log.error("estimation did not converge (report written with converged=false)")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _time(t):
    t = float(t)
    return int(t) if t.is_integer() else t


# --- forecast / smooth ----------------------------------------------------------

def cmd_forecast(args) -> int:
    from .online import forecast_run

    rep = load_report(args.report)
    test = read_series(args.data)
    builder = model_from_config(rep.model)
    fc = forecast_run(rep, test, args.filter, builder, c=args.c, b=args.b)
    out = _out_dir(args)
    p = test.p
    write_table(out / "forecasts.csv", ["t"] + [f"yhat{j + 1}" for j in range(p)] + ["flagged"],
                ([_time(t), *fc.forecast[i], bool(fc.flagged[i])]
                 for i, t in enumerate(test.times)))
    err = test.values - fc.forecast
    scored = np.all(np.isfinite(err), axis=1)
    clean = scored & ~fc.flagged
    summary = {
        "n_scored": int(scored.sum()),
        "n_flagged": int(fc.flagged.sum()),
        "msfe": float(np.mean(np.sum(err[scored] ** 2, axis=1))) if scored.any() else None,
        "msfe_clean": float(np.mean(np.sum(err[clean] ** 2, axis=1))) if clean.any() else None,
        "report_digest": file_digest(args.report),
    }
    write_json(out / "forecast_summary.json", summary)
    return EXIT_OK


def cmd_smooth(args) -> int:
    from .ssm import run_filter, run_smoother

    rep = load_report(args.report)
    obs = read_series(args.data)
    builder = model_from_config(rep.model)
    if builder.p != obs.p:
        raise InputError(f"report model has p={builder.p} but data have p={obs.p}")
    mask = None
    if rep.rejects_flagged and rep.flagged:
        if rep.n != obs.n:
            raise InputError(f"report was fitted on n={rep.n} rows but data have {obs.n}")
        mask = rep.zero_gain_mask()
    spec = builder.build(rep.theta.values, builder.initial_state(obs)).validate()
    filt = run_filter(spec, obs, mask)
    xs, Ps = run_smoother(spec, filt)
    q = xs.shape[1]
    cols = ["t"] + [f"x{j + 1}" for j in range(q)] + [f"var_x{j + 1}" for j in range(q)]
    write_table(_out_dir(args) / "states.csv", cols,
                ([_time(t), *xs[i], *np.diagonal(Ps[i])] for i, t in enumerate(obs.times)))
    return EXIT_OK


# --- bench / split ---------------------------------------------------------------

def cmd_bench(args) -> int:
    from .simlab import RESULT_COLUMNS, StudyScale, run_study, summarize

    kw = {"runs": args.runs, "grid_size": args.grid_size or 20}
    if args.n:
        kw["n_list"] = tuple(args.n)
    if args.configs:
        kw["configs"] = tuple(args.configs)
    if args.rates:
        kw["rates"] = tuple(args.rates)
    scale = StudyScale(**kw)
    rows = run_study(args.study, scale, seed=args.seed, jobs=args.jobs)
    out = _out_dir(args)
    write_dict_table(out / "results.csv", RESULT_COLUMNS, rows)
    summ = summarize(rows)
    cols = list(summ[0].keys()) if summ else []
    write_dict_table(out / "summary.csv", cols, summ)
    return EXIT_OK


def cmd_split(args) -> int:
    obs = read_series(args.data)
    if not 0.0 < args.frac < 1.0:
        raise InputError("--frac must lie in (0, 1)")
    cut = int(math.floor(args.frac * obs.n))
    if cut < 1 or cut >= obs.n:
        raise InputError(f"split at {cut} leaves an empty part (n={obs.n})")
    out = _out_dir(args)
    write_series(out / "train.csv", obs.slice(0, cut))
    write_series(out / "test.csv", obs.slice(cut))
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

def _float(s):
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roams-kit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a contaminated DCRW track")
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="estimate parameters (and outliers)")
    f.add_argument("--data", required=True)
    f.add_argument("--config", help="RunConfig JSON (model, method, tolerances, ...)")
    f.add_argument("--method", choices=METHODS)
    f.add_argument("--grid-size", dest="grid_size", type=int)
    g = f.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=_float)
    g.add_argument("--target-prop", dest="target_prop", type=_float)
    f.add_argument("--seed", type=int)
    f.add_argument("--tol", type=_float)
    f.add_argument("--max-outer", dest="max_outer", type=int)
    f.add_argument("--huber-k", dest="huber_k", type=_float)
    f.add_argument("--trim-alpha", dest="trim_alpha", type=_float)
    f.add_argument("--known-outliers", dest="known_outliers",
                   help="comma-separated 0-based row indices (oracle method)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", help="one-step-ahead forecasts of a test series")
    fc.add_argument("--report", required=True)
    fc.add_argument("--data", required=True)
    fc.add_argument("--filter", choices=("kalman", "threshold", "fut", "huber"),
                    default="kalman")
    fc.add_argument("--b", type=_float, default=None)
    fc.add_argument("--c", type=_float, default=None)
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=cmd_forecast)

    sm = sub.add_parser("smooth", help="RTS-smoothed states under a fitted model")
    sm.add_argument("--report", required=True)
    sm.add_argument("--data", required=True)
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_smooth)

    b = sub.add_parser("bench", help="run a simulation study")
    b.add_argument("--study", type=int, choices=(1, 2, 3), required=True)
    b.add_argument("--runs", type=int, default=50)
    b.add_argument("--n", type=int, nargs="+")
    b.add_argument("--configs", nargs="+")
    b.add_argument("--rates", type=_float, nargs="+")
    b.add_argument("--grid-size", dest="grid_size", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    sp = sub.add_parser("split", help="chronological train/test split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--frac", type=_float, default=0.9)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except (NumericalFailure, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except RoamsError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
