"""Mean-field Gaussian variational inference over MLP weights.

The network is a set of independent ReLU sub-networks, one per output group;
each sees the full input and writes its slice of the output vector. All
weights and biases are flattened into one parameter vector in the order
``subnet -> layer -> (W, b)`` with ``W`` stored row-major as
``(fan_in, fan_out)``.

A :class:`MeanFieldPosterior` holds a Gaussian ``N(mu, exp(log_sigma)^2)`` per
coordinate plus a Gaussian over the log noise variance of the supervised
likelihood. Its trainable vector is ``[mu, log_sigma, noise_mu,
noise_log_sigma]``; gradients and the optimizer use the same layout.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .problems.base import ProblemSpec, feasibility

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, term=None, samples=None):
        super().__init__(message)
        self.term = term
        self.samples = samples


# --------------------------------------------------------------------------
# architecture

@dataclass
class SubNetwork:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    label: str
    output_index: np.ndarray  # positions in the full output vector

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MLPSpec:
    sub_networks: list[SubNetwork]
    output_dim: int
    bound_repair: str | None = None  # None or "sigmoid"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    blocks: list = field(init=False, repr=False)

    def __post_init__(self):
        # (offset, shape, is_bias) for every weight/bias array, in order
        self.blocks = []
        off = 0
        for net in self.sub_networks:
            for fan_in, fan_out in net.layer_dims:
                self.blocks.append((off, (fan_in, fan_out), False))
                off += fan_in * fan_out
                self.blocks.append((off, (fan_out,), True))
                off += fan_out
        self.n_params = off
        covered = np.sort(np.concatenate([n.output_index for n in self.sub_networks]))
        if not np.array_equal(covered, np.arange(self.output_dim)):
            raise ValueError("output groups must partition the output vector")
        self.placements = []
        for net in self.sub_networks:
            place = np.zeros((net.output_dim, self.output_dim))
            place[np.arange(net.output_dim), net.output_index] = 1.0
            self.placements.append(place)
        if self.bound_repair not in (None, "sigmoid"):
            raise ValueError(f"unknown bound repair {self.bound_repair!r}")
        if self.bound_repair and (self.lower is None or self.upper is None):
            raise ValueError("bound repair needs output bounds")

    @property
    def input_dim(self) -> int:
        return self.sub_networks[0].input_dim

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for off, shape, is_bias in self.blocks:
            if is_bias:
                mask[off:off + int(np.prod(shape))] = True
        return mask

    def unflatten(self, w: np.ndarray) -> list[np.ndarray]:
        return [w[off:off + int(np.prod(shape))].reshape(shape)
                for off, shape, _ in self.blocks]

    def to_dict(self) -> dict:
        return {
            "sub_networks": [
                {"input_dim": n.input_dim, "hidden_dims": list(n.hidden_dims),
                 "output_dim": n.output_dim, "label": n.label,
                 "output_index": [int(i) for i in n.output_index]}
                for n in self.sub_networks],
            "output_dim": self.output_dim,
            "bound_repair": self.bound_repair,
            "lower": None if self.lower is None else _finite_list(self.lower),
            "upper": None if self.upper is None else _finite_list(self.upper),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MLPSpec:
        nets = [SubNetwork(n["input_dim"], tuple(n["hidden_dims"]), n["output_dim"],
                           n["label"], np.array(n["output_index"], dtype=int))
                for n in d["sub_networks"]]
        lower = None if d.get("lower") is None else _from_finite_list(d["lower"], -np.inf)
        upper = None if d.get("upper") is None else _from_finite_list(d["upper"], np.inf)
        return cls(nets, d["output_dim"], d.get("bound_repair"), lower, upper)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _finite_list(a):
    return [None if not np.isfinite(v) else float(v) for v in a]


def _from_finite_list(a, fill):
    return np.array([fill if v is None else v for v in a], dtype=float)


def mlp_spec_for(problem: ProblemSpec, hidden_factor: int = 2, width_from: str = "input",
                 bound_repair: str | None = None, n_hidden: int = 2) -> MLPSpec:
    """One sub-network per output group of ``problem``.

    Hidden width is ``hidden_factor`` times the input size (or times the
    sub-network output size when ``width_from="output"``).
    """
    nets = []
    for label, idx in problem.output_groups:
        base = problem.input_dim if width_from == "input" else len(idx)
        width = max(1, hidden_factor * base)
        nets.append(SubNetwork(problem.input_dim, (width,) * n_hidden, len(idx), label,
                               np.asarray(idx, dtype=int)))
    lower, upper = problem.output_bounds
    return MLPSpec(nets, problem.output_dim, bound_repair,
                   np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))


def _repair(spec: MLPSpec, raw):
    """Map raw outputs into the box; works on arrays and tape variables."""
    lo, hi = spec.lower, spec.upper
    both = np.isfinite(lo) & np.isfinite(hi)
    lo_only = np.isfinite(lo) & ~np.isfinite(hi)
    hi_only = ~np.isfinite(lo) & np.isfinite(hi)
    free = ~(both | lo_only | hi_only)
    width = np.where(both, hi - lo, 0.0)
    offset = np.where(both | lo_only, np.nan_to_num(lo), 0.0) + np.where(hi_only, np.nan_to_num(hi), 0.0)
    out = ad.sigmoid(raw) * width + offset
    if free.any():
        out = out + raw * free.astype(float)
    if lo_only.any():
        out = out + ad.softplus(raw) * lo_only.astype(float)
    if hi_only.any():
        out = out - ad.softplus(-raw) * hi_only.astype(float)
    return out


def _forward(spec: MLPSpec, arrays, X):
    """Shared forward pass; ``arrays`` are per-block weights or tape vars."""
    out = None
    k = 0
    for net, place in zip(spec.sub_networks, spec.placements):
        h = X
        layers = net.layer_dims
        for li in range(len(layers)):
            W, b = arrays[k], arrays[k + 1]
            k += 2
            h = h @ W + b
            if li < len(layers) - 1:
                h = ad.relu(h)
        term = h @ place
        out = term if out is None else out + term
    if spec.bound_repair:
        out = _repair(spec, out)
    return out


def mlp_forward(spec: MLPSpec, w: np.ndarray, X) -> np.ndarray:
    """Network output for flat weights ``w`` and inputs ``X`` (N, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return _forward(spec, spec.unflatten(np.asarray(w, dtype=float)), X)


# --------------------------------------------------------------------------
# distributions

def lognormal_moment_match(mean: float, var: float) -> tuple[float, float]:
    """Gaussian ``(mu, var)`` of ``log s`` such that ``s`` has the given moments."""
    s2 = math.log1p(var / mean ** 2)
    return math.log(mean) - 0.5 * s2, s2


NOISE_MEAN, NOISE_VAR = 1e-5, 1e-6


@dataclass
class PriorSpec:
    mu0: np.ndarray
    var0: np.ndarray
    noise_mu0: float = 0.0
    noise_var0: float = 1.0

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.var0 = np.asarray(self.var0, dtype=float)
        if self.mu0.shape != self.var0.shape:
            raise ValueError("mu0 and var0 shapes differ")
        if np.any(self.var0 <= 0) or self.noise_var0 <= 0:
            raise ValueError("prior variances must be positive")


def default_prior(spec: MLPSpec, var0: float = 1e-2) -> PriorSpec:
    nmu, nvar = lognormal_moment_match(NOISE_MEAN, NOISE_VAR)
    return PriorSpec(np.zeros(spec.n_params), np.full(spec.n_params, var0), nmu, nvar)


@dataclass
class MeanFieldPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray
    noise_mu: float = 0.0
    noise_log_sigma: float = 0.0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_sigma, [self.noise_mu, self.noise_log_sigma]])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> MeanFieldPosterior:
        p = (v.size - 2) // 2
        return cls(v[:p].copy(), v[p:2 * p].copy(), float(v[-2]), float(v[-1]))

    def copy(self) -> MeanFieldPosterior:
        return MeanFieldPosterior(self.mu.copy(), self.log_sigma.copy(),
                                  self.noise_mu, self.noise_log_sigma)

    def __eq__(self, other):
        if not isinstance(other, MeanFieldPosterior):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())


def init_posterior(spec: MLPSpec, prior: PriorSpec | None = None, seed=0,
                   var_fraction: float = 0.1) -> MeanFieldPosterior:
    """Small random means, variances at ``var_fraction`` of the prior."""
    prior = default_prior(spec) if prior is None else prior
    rng = np.random.default_rng(seed)
    mu = np.zeros(spec.n_params)
    for off, shape, is_bias in spec.blocks:
        if not is_bias:
            bound = 1.0 / math.sqrt(shape[0])
            mu[off:off + shape[0] * shape[1]] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
    log_sigma = 0.5 * np.log(var_fraction * prior.var0)
    return MeanFieldPosterior(mu, log_sigma, prior.noise_mu0, 0.5 * math.log(prior.noise_var0))


def kl_mean_field(q: MeanFieldPosterior, p: PriorSpec, include_noise: bool = True) -> float:
    """KL(q || p) for factorized Gaussians, summed over coordinates."""
    if q.mu.shape != p.mu0.shape:
        raise ValueError(f"dimension mismatch: q has {q.mu.size}, prior has {p.mu0.size}")
    kl = _kl_terms(q.mu, q.log_sigma, p.mu0, p.var0).sum()
    if include_noise:
        kl += float(_kl_terms(np.array([q.noise_mu]), np.array([q.noise_log_sigma]),
                              np.array([p.noise_mu0]), np.array([p.noise_var0]))[0])
    return float(kl)


def _kl_terms(mu, log_sigma, mu0, var0):
    # log(var0) - log(var) rather than log(var0) - 2*log_sigma: exactly zero
    # when var0 was itself computed as exp(2*log_sigma)
    var = np.exp(2.0 * log_sigma)
    return 0.5 * (np.log(var0) - np.log(var) + (var + (mu - mu0) ** 2) / var0 - 1.0)


def _kl_grad(q: MeanFieldPosterior, p: PriorSpec) -> np.ndarray:
    var = np.exp(2.0 * q.log_sigma)
    nvar = math.exp(2.0 * q.noise_log_sigma)
    return np.concatenate([
        (q.mu - p.mu0) / p.var0,
        var / p.var0 - 1.0,
        [(q.noise_mu - p.noise_mu0) / p.noise_var0, nvar / p.noise_var0 - 1.0],
    ])


def sample_weights(q: MeanFieldPosterior, seed, count: int = 1) -> np.ndarray:
    """Reparameterized draws ``mu + sigma * eps``, shape ``(count, P)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    eps = np.random.default_rng(seed).standard_normal((count, q.mu.size))
    return q.mu + q.sigma * eps


# --------------------------------------------------------------------------
# ELBO objectives

@dataclass
class ElboResult:
    loss: float      # -ELBO
    kl: float
    nll: float       # Monte-Carlo negative log-likelihood
    grad: np.ndarray  # d(loss)/d(q.to_vector())


class _Objective:
    """Traces the likelihood once; each call replays it for new noise."""

    def __init__(self, spec: MLPSpec, prior: PriorSpec, mc_samples: int = 1):
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.spec = spec
        self.prior = prior
        self.mc_samples = mc_samples
        self.tape = ad.Tape()
        nb = len(spec.blocks)
        shapes = [shape for _, shape, _ in spec.blocks]
        self._mu = [self.tape.leaf(np.zeros(s)) for s in shapes]
        self._ls = [self.tape.leaf(np.zeros(s)) for s in shapes]
        self._nmu = self.tape.leaf(0.0)
        self._nls = self.tape.leaf(0.0)
        self._eps = [[self.tape.leaf(np.zeros(s)) for s in shapes] for _ in range(mc_samples)]
        self._neps = [self.tape.leaf(0.0) for _ in range(mc_samples)]
        total = None
        self._traced = []
        for s in range(mc_samples):
            weights = [self._mu[k] + ad.exp(self._ls[k]) * self._eps[s][k] for k in range(nb)]
            log_noise = self._nmu + ad.exp(self._nls) * self._neps[s]
            term = self._nll(weights, log_noise)
            total = term if total is None else total + term
        self.tape.mark_output(total * (1.0 / mc_samples))
        self._n_blocks = nb

    def _nll(self, weights, log_noise):
        raise NotImplementedError

    def draw_noise(self, rng) -> list[tuple[np.ndarray, float]]:
        P = self.spec.n_params
        return [(rng.standard_normal(P), float(rng.standard_normal())) for _ in range(self.mc_samples)]

    def _leaf_values(self, q: MeanFieldPosterior, noise):
        spec = self.spec
        vals = spec.unflatten(q.mu) + spec.unflatten(q.log_sigma)
        vals += [np.array(q.noise_mu), np.array(q.noise_log_sigma)]
        for eps, _ in noise:
            vals += spec.unflatten(eps)
        vals += [np.array(ne) for _, ne in noise]
        return vals

    def nll_value(self, q, noise) -> float:
        return float(self.tape.forward(self._leaf_values(q, noise))[0])

    def expected_loss(self, q: MeanFieldPosterior, draws: int = 64, seed=0) -> float:
        """-ELBO averaged over ``draws`` noise draws (common random numbers
        for a fixed ``seed``), without gradients."""
        rng = np.random.default_rng(seed)
        nll = np.mean([self.nll_value(q, self.draw_noise(rng)) for _ in range(draws)])
        return kl_mean_field(q, self.prior) + float(nll)

    def __call__(self, q: MeanFieldPosterior, noise=None, rng=None) -> ElboResult:
        if noise is None:
            noise = self.draw_noise(np.random.default_rng(rng))
        kl = kl_mean_field(q, self.prior)
        if not np.isfinite(kl):
            raise NonFiniteLossError(f"non-finite KL term ({kl})", term="kl")
        vals = self._leaf_values(q, noise)
        try:
            nll = float(self.tape.forward(vals)[0])
        except ad.DomainError as exc:
            raise NonFiniteLossError(f"likelihood evaluation failed: {exc}", term="nll") from exc
        if not np.isfinite(nll):
            raise NonFiniteLossError(f"non-finite likelihood term ({nll})", term="nll",
                                     samples=self._bad_samples())
        g = self.tape.backward(None, 0)
        nb = self._n_blocks
        grad_nll = np.concatenate(
            [x.ravel() for x in g[:nb]] + [x.ravel() for x in g[nb:2 * nb]]
            + [np.atleast_1d(g[2 * nb]), np.atleast_1d(g[2 * nb + 1])])
        grad = _kl_grad(q, self.prior) + grad_nll
        return ElboResult(kl + nll, kl, nll, grad)

    def _bad_samples(self):
        return None


class SupervisedObjective(_Objective):
    """-ELBO with a Gaussian likelihood around the labels."""

    def __init__(self, spec, prior, X, Y, mc_samples=1):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if self.X.shape[0] == 0:
            raise ValueError("empty labeled batch")
        super().__init__(spec, prior, mc_samples)

    def _nll(self, weights, log_noise):
        pred = _forward(self.spec, weights, self.X)
        sq = ad.sum(ad.square(pred - self.Y))
        n = self.Y.size
        # sum_i -log N(y_i | f, s2) with s2 = exp(log_noise)
        return 0.5 * n * LOG_2PI + (0.5 * n) * log_noise + 0.5 * sq * ad.exp(-log_noise)


class UnsupervisedObjective(_Objective):
    """-ELBO of the feasibility data: observe ``0`` at ``F(f_w(x), x)``.

    Only weight coordinates receive gradient; biases and the noise latent
    are held fixed.
    """

    def __init__(self, spec, prior, X, problem: ProblemSpec, lambda_e=1.0, lambda_i=1.0,
                 sigma_u2=1e-10, mc_samples=1):
        if sigma_u2 <= 0:
            raise ValueError("sigma_u2 must be positive")
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.X.shape[0] == 0:
            raise ValueError("empty unlabeled batch")
        self.problem = problem
        self.lambda_e, self.lambda_i = lambda_e, lambda_i
        self.sigma_u2 = sigma_u2
        self._F = []
        super().__init__(spec, prior, mc_samples)
        frozen = np.concatenate([spec.bias_mask(), spec.bias_mask(), [True, True]])
        self.trainable = ~frozen

    def _nll(self, weights, log_noise):
        pred = _forward(self.spec, weights, self.X)
        F = feasibility(self.problem, self.X, pred, self.lambda_e, self.lambda_i)
        self._F.append(F)
        n = self.X.shape[0]
        return (0.5 / self.sigma_u2) * ad.sum(ad.square(F)) + 0.5 * n * math.log(2 * math.pi * self.sigma_u2)

    def _bad_samples(self):
        bad = set()
        for F in self._F:
            bad.update(np.flatnonzero(~np.isfinite(F.value)).tolist())
        return sorted(bad)

    def __call__(self, q, noise=None, rng=None):
        res = super().__call__(q, noise, rng)
        res.grad = np.where(self.trainable, res.grad, 0.0)
        return res


def elbo_supervised(q, prior, X, Y, spec, mc_samples=1, seed=None, noise=None) -> ElboResult:
    return SupervisedObjective(spec, prior, X, Y, mc_samples)(q, noise=noise, rng=seed)


def elbo_unsupervised(q, prior, X, spec, problem, lambda_e=1.0, lambda_i=1.0,
                      sigma_u2=1e-10, mc_samples=1, seed=None, noise=None) -> ElboResult:
    obj = UnsupervisedObjective(spec, prior, X, problem, lambda_e, lambda_i, sigma_u2, mc_samples)
    return obj(q, noise=noise, rng=seed)


# --------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr0: float = 1e-3
    decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trainable: np.ndarray | None = None


def adam_init(params, lr0=1e-3, decay=1e-4, trainable=None, **kw) -> AdamState:
    params = np.array(params, dtype=float)
    return AdamState(params, np.zeros_like(params), np.zeros_like(params), 0, lr0, decay,
                     trainable=None if trainable is None else np.asarray(trainable, dtype=bool), **kw)


def learning_rate(state: AdamState, step_index: int) -> float:
    return state.lr0 / (1.0 + state.decay * step_index)


def svi_step(state: AdamState, grad: np.ndarray, step_index: int) -> AdamState:
    """One Adam update at the decayed learning rate; returns a new state."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLossError("non-finite gradient", term="grad")
    if state.trainable is not None:
        grad = np.where(state.trainable, grad, 0.0)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = learning_rate(state, step_index) * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.trainable is not None:
        update = np.where(state.trainable, update, 0.0)
    return AdamState(state.params - update, m, v, t, state.lr0, state.decay,
                     state.beta1, state.beta2, state.eps, state.trainable)
