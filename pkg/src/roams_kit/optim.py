"""Box-constrained minimization with finite-difference gradients.

The quasi-Newton iteration itself is scipy's L-BFGS-B; this module owns the
parameter container, the central-difference gradient (step sizes clipped to
the box), the treatment of non-finite objective values and the termination
bookkeeping.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import InitializationError, InputError

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
MEMORY = 10
GRAD_TOL = 1e-6
STEP_TOL = 1e-10
MAX_ITER = 500
# relative objective decrease below which L-BFGS-B stops; reported as step_small
FTOL = 1e-10
_PENALTY = 1e20
MAX_RESTARTS = 20


@dataclass(frozen=True)
class ThetaVector:
    """Named free parameters with box bounds."""

    names: tuple
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        vals = np.array(self.values, dtype=float).reshape(-1)
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if not (len(names) == vals.size == lo.size == hi.size):
            raise InputError("names, values and bounds must have equal length")
        if len(set(names)) != len(names):
            raise InputError("parameter names must be unique")
        if np.any(np.isnan(vals)) or np.any(lo > hi):
            raise InputError("invalid parameter values or bounds")
        bad = (vals < lo) | (vals > hi)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InputError(f"{names[i]}={vals[i]!r} outside [{lo[i]!r}, {hi[i]!r}]")
        for a in (vals, lo, hi):
            a.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def with_values(self, values) -> "ThetaVector":
        return ThetaVector(self.names, values, self.lower, self.upper)

    def clip(self, values) -> "ThetaVector":
        return self.with_values(np.clip(values, self.lower, self.upper))

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in zip(self.names, self.values)}

    def to_json(self) -> dict:
        def enc(x):
            return x if np.isfinite(x) else ("inf" if x > 0 else "-inf")
        return {"names": list(self.names), "values": [float(v) for v in self.values],
                "lower": [enc(float(v)) for v in self.lower],
                "upper": [enc(float(v)) for v in self.upper]}

    @classmethod
    def from_json(cls, d) -> "ThetaVector":
        return cls(tuple(d["names"]), d["values"],
                   [float(v) for v in d["lower"]], [float(v) for v in d["upper"]])


class Termination(str, enum.Enum):
    GRADIENT_SMALL = "gradient_small"
    STEP_SMALL = "step_small"
    MAX_ITERS = "max_iters"
    OBJECTIVE_NONFINITE = "objective_nonfinite_everywhere"


@dataclass(frozen=True)
class OptimResult:
    theta: ThetaVector
    objective: float
    iterations: int
    converged: bool
    termination_reason: Termination
    evaluations: int = 0


def fd_steps(x, lower, upper):
    """Forward and backward step lengths for the central difference at ``x``."""
    h = np.maximum(1e-7, 1e-7 * np.abs(x))
    h_up = np.minimum(h, upper - x)
    h_dn = np.minimum(h, x - lower)
    return h_up, h_dn


def fd_gradient(f, x, lower, upper, fx=None):
    """Central finite-difference gradient, one-sided next to an active bound.

    Non-finite probes fall back to the one-sided difference on the other side
    (needs ``fx``); if both sides fail the component is set to zero.
    """
    x = np.asarray(x, dtype=float)
    h_up, h_dn = fd_steps(x, lower, upper)
    g = np.zeros_like(x)
    for i in range(x.size):
        fp = fm = np.nan
        if h_up[i] > 0:
            xp = x.copy()
            xp[i] = x[i] + h_up[i]
            fp = f(xp)
        if h_dn[i] > 0:
            xm = x.copy()
            xm[i] = x[i] - h_dn[i]
            fm = f(xm)
        ok_p, ok_m = np.isfinite(fp), np.isfinite(fm)
        if ok_p and ok_m:
            g[i] = (fp - fm) / (h_up[i] + h_dn[i])
        else:
            if fx is None:
                fx = f(x)
            if ok_p:
                g[i] = (fp - fx) / h_up[i]
            elif ok_m:
                g[i] = (fx - fm) / h_dn[i]
    return g


def _backtrack(raw, x, fx, lower, upper, max_halvings=60):
    """Projected steepest-descent step, halved until finite and decreasing."""
    g = fd_gradient(raw, x, lower, upper, fx)
    gmax = np.max(np.abs(g))
    if not np.isfinite(gmax) or gmax == 0.0:
        return None
    step = max(1.0, np.max(np.abs(x))) / gmax
    for _ in range(max_halvings):
        xn = np.clip(x - step * g, lower, upper)
        fn = raw(xn)
        if np.isfinite(fn) and fn < fx - FTOL * max(1.0, abs(fx)):
            return xn
        step *= 0.5
    return None


def minimize_box(objective, init: ThetaVector, *, max_iter=MAX_ITER,
                 grad_tol=GRAD_TOL, step_tol=STEP_TOL) -> OptimResult:
    """Minimize ``objective(values)`` over the box of ``init``.

    The objective receives a plain float array.  Non-finite values are treated
    as +inf so the line search backs off instead of failing.

    Raises:
        InitializationError: the objective is not finite at ``init``.
    """
    lower, upper = init.lower, init.upper
    x0 = np.array(init.values, dtype=float)
    n_eval = 0

    def raw(x):
        nonlocal n_eval
        n_eval += 1
        try:
            v = float(objective(x))
        except ArithmeticError:
            return np.inf
        return v if np.isfinite(v) else np.inf

    f0 = raw(x0)
    if not np.isfinite(f0):
        raise InitializationError(f"objective is not finite at the initial point {init.as_dict()}")

    cache = {}
    hit = {"barrier": False}

    def fun_and_grad(x):
        x = np.clip(x, lower, upper)
        key = x.tobytes()
        if key in cache:
            return cache[key]
        fx = raw(x)
        if not np.isfinite(fx):
            hit["barrier"] = True
            out = (_PENALTY, np.zeros_like(x))
        else:
            out = (fx, fd_gradient(raw, x, lower, upper, fx))
        cache.clear()
        cache[key] = out
        return out

    state = {"prev": x0.copy(), "iters": 0, "best_x": x0.copy(), "best_f": f0}

    def callback(intermediate_result):
        x = np.clip(intermediate_result.x, lower, upper)
        state["iters"] += 1
        fx = float(intermediate_result.fun)
        if fx <= state["best_f"]:
            state["best_f"], state["best_x"] = fx, x.copy()
        step = np.max(np.abs(x - state["prev"])) / max(1.0, np.max(np.abs(x)))
        state["prev"] = x.copy()
        if step < step_tol:
            raise StopIteration

    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
              for lo, hi in zip(lower, upper)]
    x_start, nit = x0, 0
    for _ in range(MAX_RESTARTS + 1):
        hit["barrier"] = False
        state["prev"] = x_start.copy()
        res = minimize(fun_and_grad, x_start, jac=True, method="L-BFGS-B", bounds=bounds,
                       callback=callback,
                       options=dict(maxcor=MEMORY, gtol=grad_tol, ftol=FTOL,
                                    maxiter=max_iter - nit, maxfun=50 * max_iter, maxls=40))
        nit += int(res.nit)
        x = np.clip(res.x, lower, upper)
        fx = raw(x)
        if np.isfinite(fx) and fx <= state["best_f"]:
            state["best_f"], state["best_x"] = fx, x.copy()
        if not hit["barrier"] or "PROJECTED_GRADIENT" in str(res.message).upper() \
                or nit >= max_iter:
            break
        # the penalty wrecks the line-search interpolation; back off by halving
        x_next = _backtrack(raw, state["best_x"], state["best_f"], lower, upper)
        if x_next is None:
            break
        x_start = x_next
    x, fx = state["best_x"], state["best_f"]
    if not (np.isfinite(fx) and fx <= f0):
        x, fx = x0, f0

    msg = str(res.message).upper()
    if "PROJECTED_GRADIENT" in msg:
        reason = Termination.GRADIENT_SMALL
    elif nit >= max_iter or "ITERATIONS" in msg or "EVALUATIONS" in msg:
        reason = Termination.MAX_ITERS
    elif not np.isfinite(res.fun) or res.fun >= _PENALTY:
        reason = Termination.OBJECTIVE_NONFINITE
    else:
        # relative reduction, callback step test and line-search stalls
        reason = Termination.STEP_SMALL
    converged = reason in (Termination.GRADIENT_SMALL, Termination.STEP_SMALL)
    log.debug("minimize_box: %s after %d iterations, f=%.10g", reason.value, nit, fx)
    return OptimResult(init.with_values(x), float(fx), nit, converged,
                       reason, n_eval)
