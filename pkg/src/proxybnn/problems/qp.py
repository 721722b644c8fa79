"""Equality-constrained quadratic programs with an exact KKT oracle.

    min_y  0.5 y'Qy - x'y   s.t.  Ay = Bx,  -10 <= y <= 10

The input ``x`` lives in ``[-1, 1]^n``. Because the optimum is linear in
``x`` the box is checked once at construction to be inactive over the whole
input hyper-rectangle.
"""

from __future__ import annotations

import json

import numpy as np

from .base import ProblemSpec, as_batch, box_residuals

BOX = 10.0


class QuadraticProblem(ProblemSpec):
    name = "qp"

    def __init__(self, Q, A, B, lower=None, upper=None, seed=None):
        self.Q = np.array(Q, dtype=float)
        self.A = np.atleast_2d(np.array(A, dtype=float))
        self.B = np.atleast_2d(np.array(B, dtype=float))
        n = self.Q.shape[0]
        if self.Q.shape != (n, n) or self.A.shape[1] != n or self.B.shape[0] != self.A.shape[0]:
            raise ValueError("inconsistent QP dimensions")
        if not np.allclose(self.Q, self.Q.T):
            raise ValueError("Q must be symmetric")
        self.input_dim = self.B.shape[1]
        self.output_dim = n
        self.lower = np.full(n, -BOX) if lower is None else np.array(lower, dtype=float)
        self.upper = np.full(n, BOX) if upper is None else np.array(upper, dtype=float)
        self.seed = seed
        m = self.A.shape[0]
        self.kkt = np.block([[self.Q, self.A.T], [self.A, np.zeros((m, m))]])
        if np.linalg.matrix_rank(self.kkt) < n + m:
            raise np.linalg.LinAlgError("singular KKT system")

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    def cost(self, x, y):
        x, y = as_batch(x), as_batch(y)
        return 0.5 * np.einsum("ni,ij,nj->n", y, self.Q, y) - np.sum(x * y, axis=1)

    def eq_residuals(self, x, y):
        x, y = as_batch(x), as_batch(y)
        return y @ self.A.T - x @ self.B.T

    def ineq_residuals(self, x, y):
        return box_residuals(as_batch(y), self.lower, self.upper)

    def sample_inputs(self, n, seed):
        rng = np.random.default_rng(seed)
        return rng.uniform(-1.0, 1.0, size=(n, self.input_dim))

    def solve(self, x) -> np.ndarray:
        """Exact optimum for one input or a batch of inputs."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = as_batch(x)
        rhs = np.concatenate([xb, xb @ self.B.T], axis=1).T
        try:
            sol = np.linalg.solve(self.kkt, rhs)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular KKT system") from exc
        y = sol[: self.output_dim].T
        return y[0] if single else y

    def gain(self) -> np.ndarray:
        """Matrix ``K`` with ``y*(x) = K x``."""
        return self.solve(np.eye(self.input_dim)).T

    def null_space(self) -> np.ndarray:
        _, s, vt = np.linalg.svd(self.A)
        rank = int(np.sum(s > 1e-12 * s[0]))
        return vt[rank:].T

    def to_dict(self) -> dict:
        return {
            "kind": "qp",
            "Q": self.Q.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> QuadraticProblem:
        return cls(d["Q"], d["A"], d["B"], d.get("lower"), d.get("upper"), d.get("seed"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> QuadraticProblem:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def qp_make(n: int, m: int, seed) -> QuadraticProblem:
    """Random well-conditioned instance with ``n`` outputs and ``m`` equalities."""
    if not 1 <= m < n:
        raise ValueError("need 1 <= m < n")
    rng = np.random.default_rng(seed)
    while True:
        G = rng.normal(size=(n, n))
        Q = G @ G.T / n + np.eye(n)
        Q = 0.5 * (Q + Q.T)
        A = rng.normal(size=(m, n))
        B = rng.normal(size=(m, n)) / np.sqrt(n)
        if np.linalg.matrix_rank(A) < m:
            continue
        prob = QuadraticProblem(Q, A, B, seed=seed)
        # worst case of |K x|_i over the input box is the row 1-norm of K
        if np.max(np.abs(prob.gain()).sum(axis=1)) < BOX:
            return prob


def qp_solve_oracle(problem: QuadraticProblem, x) -> np.ndarray:
    return problem.solve(x)
