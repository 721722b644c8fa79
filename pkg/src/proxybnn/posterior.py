"""Posterior prediction matrices and selection via posterior (SvP).

A PPM for one input is an ``(O, H)`` matrix: one row per output variable,
one column per posterior weight draw. Column ``j`` is the network output for
``mu + sigma * eps_j`` with ``eps_j`` drawn from ``default_rng(seeds[j])``,
so any column can be recomputed on its own.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .problems.base import ProblemSpec
from .vi import MeanFieldPosterior, MLPSpec, mlp_forward


@dataclass
class PPM:
    values: np.ndarray  # (O, H)
    weight_sample_seeds: np.ndarray  # (H,)

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path):
        """Row = output variable, column = posterior sample."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variable_id"] + [f"s{int(s)}" for s in self.weight_sample_seeds])
            for i, row in enumerate(self.values):
                w.writerow([i] + [repr(float(v)) for v in row])


def column_seeds(seed, H: int) -> np.ndarray:
    if H < 1:
        raise ValueError("H must be >= 1")
    return np.random.default_rng(seed).integers(0, 2 ** 63 - 1, size=H, dtype=np.int64)


def draw_column_weights(q: MeanFieldPosterior, column_seed) -> np.ndarray:
    eps = np.random.default_rng(int(column_seed)).standard_normal(q.mu.size)
    return q.mu + q.sigma * eps


def build_ppms(q: MeanFieldPosterior, spec: MLPSpec, X, H: int = 500, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """PPMs for a batch of inputs, shape ``(M, O, H)``, plus the column seeds.

    All inputs share the same ``H`` weight draws.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    seeds = column_seeds(seed, H)
    out = np.empty((X.shape[0], spec.output_dim, H))
    for j, s in enumerate(seeds):
        out[:, :, j] = mlp_forward(spec, draw_column_weights(q, s), X)
    return out, seeds


def build_ppm(q: MeanFieldPosterior, spec: MLPSpec, x, H: int = 500, seed=0) -> PPM:
    values, seeds = build_ppms(q, spec, np.asarray(x, dtype=float).reshape(1, -1), H, seed)
    return PPM(values[0], seeds)


def replay_column(q: MeanFieldPosterior, spec: MLPSpec, x, ppm: PPM, j: int) -> np.ndarray:
    w = draw_column_weights(q, ppm.weight_sample_seeds[j])
    return mlp_forward(spec, w, np.asarray(x, dtype=float).reshape(1, -1))[0]


def _values(ppm):
    return ppm.values if isinstance(ppm, PPM) else np.asarray(ppm, dtype=float)


def ppm_mean(ppm) -> np.ndarray:
    return _values(ppm).mean(axis=-1)


def ppm_variance(ppm) -> np.ndarray:
    """Row-wise unbiased sample variance (divisor ``H - 1``)."""
    v = _values(ppm)
    if v.shape[-1] < 2:
        raise ValueError("variance needs at least two posterior samples")
    return v.var(axis=-1, ddof=1)


def column_scores(ppm, problem: ProblemSpec, x, ineq_weight: float | None = None) -> np.ndarray:
    """Max absolute equality residual of every column (lower is better).

    With ``ineq_weight`` the largest inequality violation, scaled by it, is
    added to the score.
    """
    cols = _values(ppm).T
    xs = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, -1), (cols.shape[0], problem.input_dim))
    g = np.asarray(problem.eq_residuals(xs, cols))
    score = np.max(np.abs(g), axis=1) if g.shape[1] else np.zeros(cols.shape[0])
    if ineq_weight:
        h = np.asarray(problem.ineq_residuals(xs, cols))
        if h.shape[1]:
            score = score + ineq_weight * np.max(np.maximum(h, 0.0), axis=1)
    return score


def svp_select(ppm, problem: ProblemSpec, x, ineq_weight: float | None = None) -> tuple[int, np.ndarray]:
    """Column with the smallest max equality gap; ties go to the lowest index."""
    scores = column_scores(ppm, problem, x, ineq_weight)
    j = int(np.argmin(scores))
    return j, _values(ppm)[:, j].copy()


def predict(q, spec, problem, X, H=500, seed=0, svp=True, ineq_weight=None):
    """Mean and (optionally) SvP predictions for a batch of inputs.

    Returns ``(mean, svp_pred, ppms)``; ``svp_pred`` is None when ``svp`` is
    false.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ppms, _ = build_ppms(q, spec, X, H, seed)
    mean = ppms.mean(axis=-1)
    sel = None
    if svp:
        sel = np.stack([svp_select(ppms[k], problem, X[k], ineq_weight)[1] for k in range(X.shape[0])])
    return mean, sel, ppms
