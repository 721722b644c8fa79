"""Common interface of a parametric constrained problem.

A problem maps an input ``x`` to ``min c(y) s.t. g(x, y) = 0, h(x, y) <= 0``.
All evaluators take a batch ``x`` of shape ``(N, input_dim)`` and ``y`` of
shape ``(N, output_dim)``; one-dimensional arguments are treated as a batch of
one. ``y`` may also be an autodiff :class:`~proxybnn.autodiff.Var`, in which
case the residuals are recorded on its tape.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad


class ProblemSpec:
    """Base class; subclasses fill in the residuals and the input sampler."""

    name = "problem"
    input_dim: int
    output_dim: int
    lower: np.ndarray  # -inf where unbounded
    upper: np.ndarray

    @property
    def output_groups(self) -> list[tuple[str, np.ndarray]]:
        """Partition of the output vector, one entry per sub-network."""
        return [("y", np.arange(self.output_dim))]

    @property
    def output_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def cost(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def eq_residuals(self, x, y):
        raise NotImplementedError

    def ineq_residuals(self, x, y):
        raise NotImplementedError

    def sample_inputs(self, n: int, seed) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def as_batch(a):
    if isinstance(a, ad.Var):
        return a
    a = np.asarray(a, dtype=float)
    return a[None, :] if a.ndim == 1 else a


def feasibility(problem: ProblemSpec, x, y, lambda_e: float = 1.0, lambda_i: float = 1.0):
    """Weighted squared constraint violation per sample, shape ``(N,)``.

    Zero exactly when ``y`` is feasible for ``x``; works on tape variables.
    """
    x, y = as_batch(x), as_batch(y)
    g = problem.eq_residuals(x, y)
    h = problem.ineq_residuals(x, y)
    out = lambda_e * ad.sum(ad.square(g), axis=1)
    if lambda_i != 0.0 and h.shape[1] > 0:
        out = out + lambda_i * ad.sum(ad.square(ad.relu(h)), axis=1)
    return out


def box_residuals(y, lower: np.ndarray, upper: np.ndarray):
    """One-sided bound residuals ``[y - upper, lower - y]`` for finite bounds.

    Written as a matmul against a fixed selection matrix so it stays inside
    the autodiff primitive set.
    """
    n = lower.shape[0]
    up = np.flatnonzero(np.isfinite(upper))
    lo = np.flatnonzero(np.isfinite(lower))
    sel = np.zeros((n, up.size + lo.size))
    sel[up, np.arange(up.size)] = 1.0
    sel[lo, up.size + np.arange(lo.size)] = -1.0
    offset = np.concatenate([-upper[up], lower[lo]])
    return y @ sel + offset
