"""Evaluation metrics and probabilistic confidence bounds on the error.

The three concentration bounds give an ``eps`` such that the expected
absolute error is within ``eps`` of its empirical mean over ``M`` test points
with probability at least ``1 - delta``:

* Hoeffding        ``R sqrt(log(2/delta) / 2M)``
* empirical Bern.  ``sqrt(2 V log(3/delta) / M) + c R log(3/delta) / M``, c = 3
* Bernstein (MPV)  ``sqrt(2 alpha MPV log(1/delta) / M) + 2 R log(1/delta) / 3M``
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .posterior import build_ppms
from .problems.base import ProblemSpec

PCB_COLUMNS = ("variable_id", "mean_abs_err", "eps_hoeffding", "eps_emp_bernstein",
               "eps_bernstein_mpv", "mpv", "var_emp", "R", "M", "delta")
METRIC_COLUMNS = ("gap_percent", "max_eq", "mean_eq", "max_ineq", "mean_ineq")


class UndefinedGapError(ZeroDivisionError):
    pass


# --------------------------------------------------------------------------
# metrics

@dataclass
class MetricsTable:
    gap_percent: float
    max_eq: float
    mean_eq: float
    max_ineq: float
    mean_ineq: float
    n_instances: int = 0

    def row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def instance_metrics(problem: ProblemSpec, X, Y_true, Y_pred) -> dict[str, np.ndarray]:
    """Per-instance statistics, each of shape ``(N,)``."""
    X = np.atleast_2d(X)
    Y_pred = np.atleast_2d(Y_pred)
    g = np.abs(np.asarray(problem.eq_residuals(X, Y_pred)))
    h = np.maximum(np.asarray(problem.ineq_residuals(X, Y_pred)), 0.0)
    out = {
        "max_eq": g.max(axis=1) if g.shape[1] else np.zeros(len(X)),
        "mean_eq": g.mean(axis=1) if g.shape[1] else np.zeros(len(X)),
        "max_ineq": h.max(axis=1) if h.shape[1] else np.zeros(len(X)),
        "mean_ineq": h.mean(axis=1) if h.shape[1] else np.zeros(len(X)),
    }
    if Y_true is not None:
        c_true = problem.cost(X, np.atleast_2d(Y_true))
        bad = np.flatnonzero(c_true == 0)
        if bad.size:
            raise UndefinedGapError(f"optimal cost is zero for instance {int(bad[0])}")
        out["gap_percent"] = np.abs(problem.cost(X, Y_pred) - c_true) / np.abs(c_true) * 100.0
    return out


def metrics(problem: ProblemSpec, X, Y_true, Y_pred) -> MetricsTable:
    """Per-instance max/mean gaps, then averaged over instances."""
    per = instance_metrics(problem, X, Y_true, Y_pred)
    gap = float(per["gap_percent"].mean()) if "gap_percent" in per else float("nan")
    return MetricsTable(gap, *(float(per[k].mean()) for k in METRIC_COLUMNS[1:]),
                        n_instances=len(per["max_eq"]))


# --------------------------------------------------------------------------
# concentration bounds

def delta_from_confidence(confidence: float) -> float:
    """``1 - confidence`` without the trailing float noise of the subtraction."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    return round(1.0 - confidence, 15)


def _check(R, M, delta):
    if R < 0 or not math.isfinite(R):
        raise ValueError("R must be a finite non-negative number")
    if M < 1:
        raise ValueError("M must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


def hoeffding_eps(R: float, M: int, delta: float) -> float:
    _check(R, M, delta)
    return R * math.sqrt(math.log(2.0 / delta) / (2.0 * M))


def empirical_bernstein_eps(v_hat: float, R: float, M: int, delta: float,
                            coef: float = 3.0) -> float:
    """``coef`` is 3 by default; pass 2 for the variant with the smaller range term."""
    _check(R, M, delta)
    if v_hat < 0:
        raise ValueError("v_hat must be non-negative")
    L = math.log(3.0 / delta)
    return math.sqrt(2.0 * v_hat * L / M) + coef * R * L / M


def bernstein_eps(variance: float, R: float, M: int, delta: float) -> float:
    _check(R, M, delta)
    if variance < 0:
        raise ValueError("variance must be non-negative")
    L = math.log(1.0 / delta)
    return math.sqrt(2.0 * variance * L / M) + 2.0 * R * L / (3.0 * M)


def bernstein_eps_mpv(mpv: float, R: float, M: int, delta: float, alpha: float = 2.0) -> float:
    """Bernstein bound with ``alpha * MPV`` standing in for the error variance."""
    if mpv < 0:
        raise ValueError("mpv must be non-negative")
    return bernstein_eps(alpha * mpv, R, M, delta)


# --------------------------------------------------------------------------
# predictive variance

def mpv(ppms) -> np.ndarray:
    """Mean over test inputs of the per-variable posterior sample variance.

    ``ppms`` is a sequence of ``(O, H)`` matrices or an ``(M, O, H)`` array.
    """
    try:
        arr = np.stack([getattr(p, "values", p) for p in ppms])
    except ValueError as exc:
        raise ValueError("all PPMs must share the same shape") from exc
    if arr.ndim != 3 or arr.shape[2] < 2:
        raise ValueError("need PPMs of shape (O, H) with H >= 2")
    return arr.var(axis=2, ddof=1).mean(axis=0)


@dataclass
class VarianceDecomposition:
    total: float            # variance of all M*H errors
    within_posterior: float  # E_M[V_W[e]]
    between_inputs: float    # V_M[E_W[e]]
    mpv: float               # within_posterior rescaled to the H-1 divisor
    across_inputs: float     # E_W[V_M[e]], kept for comparison only

    @property
    def component_sum(self) -> float:
        return self.within_posterior + self.between_inputs


def variance_decomposition(errors) -> VarianceDecomposition:
    """Law-of-total-variance split of an ``(M, H)`` error matrix.

    Rows are test inputs, columns posterior samples. Moments use the ``1/n``
    divisor so that the two components add up to the total exactly; ``mpv``
    is the within-posterior term with the ``1/(H-1)`` divisor used by
    :func:`mpv`.
    """
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2 or e.shape[1] < 2:
        raise ValueError("errors must be an (M, H) matrix with M, H >= 2")
    H = e.shape[1]
    within = float(e.var(axis=1).mean())
    between = float(e.mean(axis=1).var())
    return VarianceDecomposition(float(e.var()), within, between, within * H / (H - 1),
                                 float(e.var(axis=0).mean()))


# --------------------------------------------------------------------------
# PCB report

def bound_widths(problem: ProblemSpec, r_default: float = 1.0) -> np.ndarray:
    """Default ``R`` per output: the width of its bounds, or ``r_default``."""
    lo, hi = problem.output_bounds
    w = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
    return np.where(np.isfinite(w), w, r_default)


@dataclass
class PCBReport:
    variable_id: list[int]
    mean_abs_err: list[float]
    eps_hoeffding: list[float]
    eps_emp_bernstein: list[float]
    eps_bernstein_mpv: list[float]
    mpv: list[float]
    var_emp: list[float]
    R: list[float]
    M: int
    delta: float
    H: int = 0
    alpha: float = 2.0
    emp_bernstein_coef: float = 3.0
    config: dict = field(default_factory=dict)
    format_version: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> PCBReport:
        return cls(**json.loads(text))

    def rows(self):
        for i, vid in enumerate(self.variable_id):
            yield [vid, self.mean_abs_err[i], self.eps_hoeffding[i], self.eps_emp_bernstein[i],
                   self.eps_bernstein_mpv[i], self.mpv[i], self.var_emp[i], self.R[i],
                   self.M, self.delta]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PCB_COLUMNS)
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def pcb_from_arrays(y_true, ppms, R, delta: float, alpha: float = 2.0,
                    emp_coef: float = 3.0) -> PCBReport:
    """PCB report from labels ``(M, O)`` and PPMs ``(M, O, H)``.

    The error of a test point is ``y - mean(PPM)``; ``var_emp`` is the
    ``1/M`` variance of that signed error, which upper-bounds the variance of
    its absolute value.
    """
    y_true = np.atleast_2d(np.asarray(y_true, dtype=float))
    ppms = np.asarray(ppms, dtype=float)
    M, O = y_true.shape
    err = y_true - ppms.mean(axis=2)
    abs_err = np.abs(err).mean(axis=0)
    var_emp = err.var(axis=0)
    mp = mpv(ppms)
    R = np.broadcast_to(np.asarray(R, dtype=float), (O,))
    return PCBReport(
        variable_id=list(range(O)),
        mean_abs_err=abs_err.tolist(),
        eps_hoeffding=[hoeffding_eps(float(r), M, delta) for r in R],
        eps_emp_bernstein=[empirical_bernstein_eps(float(v), float(r), M, delta, emp_coef)
                           for v, r in zip(var_emp, R)],
        eps_bernstein_mpv=[bernstein_eps_mpv(float(m), float(r), M, delta, alpha)
                           for m, r in zip(mp, R)],
        mpv=mp.tolist(), var_emp=var_emp.tolist(), R=R.tolist(), M=M, delta=delta,
        H=ppms.shape[2], alpha=alpha, emp_bernstein_coef=emp_coef)


def pcb_report(problem: ProblemSpec, q, spec, X_test, Y_test, H: int = 500, R=None,
               confidence: float = 0.95, seed=0, r_default: float = 1.0, alpha: float = 2.0,
               emp_coef: float = 3.0) -> PCBReport:
    """Confidence bounds for every output variable of a trained posterior.

    ``R`` defaults to the output bound widths (``r_default`` where a bound is
    infinite). ``delta = 1 - confidence``.
    """
    if H < 2:
        raise ValueError("H must be >= 2")
    R = bound_widths(problem, r_default) if R is None else R
    ppms, _ = build_ppms(q, spec, X_test, H, seed)
    rep = pcb_from_arrays(Y_test, ppms, R, delta_from_confidence(confidence), alpha, emp_coef)
    rep.config = {"confidence": confidence, "seed": seed, "r_default": r_default}
    return rep


# --------------------------------------------------------------------------
# hypothesis meta-study

ALPHAS = (1.0, 1.5, 2.0)


@dataclass
class HypothesisRow:
    model: str
    problem: str
    variable_id: int
    total_variance: float
    mpv: float
    holds: dict  # alpha -> bool


def hypothesis_rows(model: str, problem: str, y_true, ppms, alphas=ALPHAS) -> list[HypothesisRow]:
    """Compare the total error variance with ``alpha * MPV`` per variable."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=float))
    ppms = np.asarray(ppms, dtype=float)
    errors = y_true[:, :, None] - ppms  # (M, O, H)
    mp = mpv(ppms)
    rows = []
    for i in range(ppms.shape[1]):
        total = float(errors[:, i, :].var())
        rows.append(HypothesisRow(model, problem, i, total, float(mp[i]),
                                  {a: bool(a * mp[i] >= total) for a in alphas}))
    return rows


def hypothesis_study(runs, alphas=ALPHAS) -> dict:
    """Tabulate the variance hypothesis over several trained models.

    ``runs`` is an iterable of ``(model_name, problem_name, y_true, ppms)``.
    Returns the rows and, per alpha, the fraction of variables where
    ``alpha * MPV >= V_e``.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError("the study needs at least two trained models")
    rows = []
    for model, prob, y_true, ppms in runs:
        rows += hypothesis_rows(model, prob, y_true, ppms, alphas)
    frac = {a: float(np.mean([r.holds[a] for r in rows])) for a in alphas}
    return {"rows": rows, "fraction_holds": frac}


def hypothesis_csv(study: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    alphas = sorted(study["fraction_holds"])
    w.writerow(["model", "problem", "variable_id", "total_variance", "mpv"]
               + [f"holds_alpha_{a:g}" for a in alphas])
    for r in study["rows"]:
        w.writerow([r.model, r.problem, r.variable_id, repr(r.total_variance), repr(r.mpv)]
                   + [int(r.holds[a]) for a in alphas])
    return buf.getvalue()
