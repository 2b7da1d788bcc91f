"""Fit results shared by every estimator, with a lossless JSON form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .likelihood import ShiftMatrix
from .optim import ThetaVector

SCHEMA_VERSION = 1


def _f(x):
    """JSON-safe float (infinities and NaN as strings)."""
    if x is None:
        return None
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _unf(x):
    return None if x is None else float(x)


@dataclass
class LambdaRow:
    """One entry of the lambda path (the data behind a BIC curve)."""

    lam: float
    bic: float = np.nan
    k: int = -1
    robust_nll: float = np.nan
    converged: bool = False
    inner_iterations: int = 0
    error: str | None = None

    def to_json(self):
        return {"lambda": _f(self.lam), "bic": _f(self.bic), "k": self.k,
                "robust_nll": _f(self.robust_nll), "converged": self.converged,
                "inner_iterations": self.inner_iterations, "error": self.error}

    @classmethod
    def from_json(cls, d):
        return cls(_unf(d["lambda"]), _unf(d["bic"]), int(d["k"]), _unf(d["robust_nll"]),
                   bool(d["converged"]), int(d["inner_iterations"]), d.get("error"))


@dataclass
class FitReport:
    """Outcome of one estimation method on one series.

    ``flagged`` holds 0-based timepoint indices.  For ROAMS they are the
    support of ``gamma``; for the oracle they are the known outliers; for the
    trimmed method the points trimmed at the final estimate.
    """

    method: str
    theta: ThetaVector
    gamma: ShiftMatrix
    flagged: tuple
    objective: float
    n: int
    n_complete: int
    converged: bool
    model: dict
    init_theta: ThetaVector
    lambda_star: float | None = None
    bic: float | None = None
    path: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.flagged)

    @property
    def rejects_flagged(self) -> bool:
        """Whether the flagged points were given zero gain during fitting."""
        return self.method in ("roams", "oracle")

    def zero_gain_mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        if self.rejects_flagged:
            m[list(self.flagged)] = True
        return m

    def bic_table(self):
        """Rows ``(lambda, bic, k)`` of the lambda path, in grid order."""
        return [(r.lam, r.bic, r.k) for r in self.path]

    def to_json(self) -> dict:
        g = self.gamma.values
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "theta": self.theta.to_json(),
            "init_theta": self.init_theta.to_json(),
            "gamma": {"n": int(g.shape[0]), "p": int(g.shape[1]),
                      "columns": [{"t": int(t), "value": [float(v) for v in g[t]]}
                                  for t in np.flatnonzero(np.any(g != 0, axis=1))]},
            "flagged": [int(t) for t in self.flagged],
            "objective": _f(self.objective),
            "n": self.n,
            "n_complete": self.n_complete,
            "converged": self.converged,
            "model": self.model,
            "lambda_star": _f(self.lambda_star),
            "bic": _f(self.bic),
            "path": [r.to_json() for r in self.path],
            "diagnostics": self.diagnostics,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, d) -> "FitReport":
        g = np.zeros((d["gamma"]["n"], d["gamma"]["p"]))
        for col in d["gamma"]["columns"]:
            g[col["t"]] = col["value"]
        return cls(
            method=d["method"],
            theta=ThetaVector.from_json(d["theta"]),
            gamma=ShiftMatrix(g),
            flagged=tuple(int(t) for t in d["flagged"]),
            objective=_unf(d["objective"]),
            n=int(d["n"]),
            n_complete=int(d["n_complete"]),
            converged=bool(d["converged"]),
            model=d["model"],
            init_theta=ThetaVector.from_json(d["init_theta"]),
            lambda_star=_unf(d.get("lambda_star")),
            bic=_unf(d.get("bic")),
            path=[LambdaRow.from_json(r) for r in d.get("path", [])],
            diagnostics=d.get("diagnostics", {}),
            warnings=list(d.get("warnings", [])),
        )

    def same_content(self, other: "FitReport") -> bool:
        """Semantic equality (used to check JSON round-trips)."""
        a, b = self.to_json(), other.to_json()
        return a == b
