"""Budgeted training: supervised BNN, sandwich BNN, and the DNN baseline.

Budgets are either wall-clock seconds (``mode="wall"``) or optimizer steps
(``mode="steps"``); both are checked between steps, never mid-step.

A sandwich run alternates supervised (``sup``) and feasibility (``unsup``)
stages and closes with a supervised stage. At every stage boundary the current
posterior becomes the prior of the next stage.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .problems.base import ProblemSpec, feasibility
from .vi import (
    MeanFieldPosterior,
    MLPSpec,
    NonFiniteLossError,
    PriorSpec,
    SupervisedObjective,
    UnsupervisedObjective,
    adam_init,
    default_prior,
    init_posterior,
    mlp_forward,
    mlp_spec_for,
    svi_step,
    _forward,
)

log = logging.getLogger(__name__)

SUP, UNSUP = "sup", "unsup"


@dataclass
class Schedule:
    t_max: float = 600.0
    t_round: float = 200.0
    sup_fraction: float = 0.4
    mode: str = "wall"

    def __post_init__(self):
        if self.mode not in ("wall", "steps"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.t_max < 0 or self.t_round <= 0 or not 0 < self.sup_fraction < 1:
            raise ValueError("invalid schedule")

    @property
    def t_s(self):
        t = self.sup_fraction * self.t_round
        return int(round(t)) if self.mode == "steps" else t

    @property
    def t_u(self):
        return self.t_round - self.t_s

    @property
    def rounds(self) -> int:
        return int(self.t_max // self.t_round)

    def stages(self) -> list[tuple[str, float, int]]:
        """``(kind, budget, round)`` for every sandwich stage.

        ``rounds`` full Sup/UnSup rounds followed by a closing Sup stage that
        takes the leftover budget; if the leftover is shorter than ``t_s`` the
        difference is taken from the last UnSup stage.
        """
        R = self.rounds
        if R < 1:
            raise ValueError("t_round exceeds t_max")
        out = []
        for r in range(R):
            out += [[SUP, self.t_s, r], [UNSUP, self.t_u, r]]
        rest = self.t_max - R * self.t_round
        if rest < self.t_s:
            take = min(self.t_s - rest, out[-1][1])
            out[-1][1] -= take
            rest += take
        out.append([SUP, rest, R - 1])
        return [tuple(s) for s in out]


@dataclass
class TrainConfig:
    lambda_e: float = 1.0
    lambda_i: float = 1.0
    sigma_u2: float = 1e-10
    mc_samples: int = 1
    lr0: float = 1e-3
    decay: float = 1e-4
    round_decay: float = 0.5
    prior_var: float = 1e-2
    var_fraction: float = 0.1
    penalty_weight: float = 1e-2
    dnn_lr: float = 1e-4
    dnn_hidden_from: str = "output"


@dataclass
class StageLog:
    kind: str
    round: int
    budget: float
    steps: int
    initial_loss: float | None
    final_loss: float | None
    lr0: float
    wall_seconds: float = 0.0


@dataclass
class TrainRunReport:
    method: str
    seed: int
    mode: str
    stages: list[StageLog] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    model_id: str = ""

    @property
    def wall_seconds(self) -> float:
        return sum(s.wall_seconds for s in self.stages)

    def to_dict(self) -> dict:
        """Serializable form; in step mode wall times are left out so that
        reruns produce identical documents."""
        stages = []
        for s in self.stages:
            d = asdict(s)
            if self.mode == "steps":
                d.pop("wall_seconds")
            stages.append(d)
        return {"method": self.method, "seed": self.seed, "mode": self.mode,
                "model_id": self.model_id, "stages": stages, "config": self.config}


def chain_prior(q: MeanFieldPosterior) -> PriorSpec:
    """Turn a posterior into the prior of the next stage."""
    return PriorSpec(q.mu.copy(), np.exp(2.0 * q.log_sigma),
                     q.noise_mu, math.exp(2.0 * q.noise_log_sigma))


def _run_stage(objective, q, budget, mode, lr0, decay, rng, trainable=None, kind=SUP, rnd=0):
    state = adam_init(q.to_vector(), lr0, decay, trainable)
    start = time.perf_counter()
    steps = 0
    first = last = None
    while True:
        if mode == "steps":
            if steps >= budget:
                break
        elif time.perf_counter() - start >= budget:
            break
        res = objective(MeanFieldPosterior.from_vector(state.params), rng=rng)
        if first is None:
            first = res.loss
        last = res.loss
        state = svi_step(state, res.grad, steps)
        steps += 1
    wall = time.perf_counter() - start
    q_new = MeanFieldPosterior.from_vector(state.params) if steps else q.copy()
    return q_new, StageLog(kind, rnd, budget, steps, first, last, lr0, wall)


def _as_xy(labeled):
    X, Y = labeled
    return np.atleast_2d(np.asarray(X, dtype=float)), np.atleast_2d(np.asarray(Y, dtype=float))


def run_supervised(problem: ProblemSpec, labeled, spec: MLPSpec, schedule: Schedule,
                   seed: int = 0, config: TrainConfig | None = None, prior: PriorSpec | None = None):
    """Plain SVI on the labeled data for the whole budget ``t_max``."""
    config = config or TrainConfig()
    X, Y = _as_xy(labeled)
    if X.shape[0] == 0:
        raise ValueError("labeled set is empty")
    prior = prior or default_prior(spec, config.prior_var)
    q = init_posterior(spec, prior, seed, config.var_fraction)
    rng = np.random.default_rng([seed, 1])
    obj = SupervisedObjective(spec, prior, X, Y, config.mc_samples)
    q, stage = _run_stage(obj, q, schedule.t_max, schedule.mode, config.lr0, config.decay,
                          rng, kind=SUP)
    report = TrainRunReport("supervised", seed, schedule.mode, [stage], _snapshot(schedule, config))
    return q, report


def run_sandwich(problem: ProblemSpec, labeled, unlabeled, spec: MLPSpec, schedule: Schedule,
                 seed: int = 0, config: TrainConfig | None = None, prior: PriorSpec | None = None):
    """Alternate Sup and UnSup stages with posterior chaining."""
    config = config or TrainConfig()
    X, Y = _as_xy(labeled)
    Xu = np.asarray(unlabeled, dtype=float).reshape(-1, X.shape[1])
    if Xu.shape[0] == 0:
        log.warning("no unlabeled data: falling back to supervised training")
        q, report = run_supervised(problem, labeled, spec, schedule, seed, config, prior)
        return q, report
    if Xu.shape[0] < X.shape[0]:
        raise ValueError("need at least as many unlabeled as labeled samples")

    prior = prior or default_prior(spec, config.prior_var)
    q = init_posterior(spec, prior, seed, config.var_fraction)
    rng = np.random.default_rng([seed, 1])
    report = TrainRunReport("sandwich", seed, schedule.mode, [], _snapshot(schedule, config))
    weights_only = None
    for i, (kind, budget, rnd) in enumerate(schedule.stages()):
        if i > 0:
            prior = chain_prior(q)
        lr0 = config.lr0 * config.round_decay ** rnd
        if kind == SUP:
            obj = SupervisedObjective(spec, prior, X, Y, config.mc_samples)
            trainable = None
        else:
            obj = UnsupervisedObjective(spec, prior, Xu, problem, config.lambda_e,
                                        config.lambda_i, config.sigma_u2, config.mc_samples)
            trainable = weights_only = obj.trainable if weights_only is None else weights_only
        q, stage = _run_stage(obj, q, budget, schedule.mode, lr0, config.decay, rng,
                              trainable, kind, rnd)
        report.stages.append(stage)
    return q, report


# --------------------------------------------------------------------------
# deterministic baseline

class DnnObjective:
    """MSE plus weighted mean feasibility violation for point weights."""

    def __init__(self, problem, spec, X, Y, penalty_weight, lambda_e=1.0, lambda_i=1.0):
        self.spec = spec
        self.tape = ad.Tape()
        self._w = [self.tape.leaf(np.zeros(shape)) for _, shape, _ in spec.blocks]
        pred = _forward(spec, self._w, X)
        mse = ad.sum(ad.square(pred - Y)) * (1.0 / Y.size)
        loss = mse
        if penalty_weight:
            F = feasibility(problem, X, pred, lambda_e, lambda_i)
            loss = loss + ad.sum(F) * (penalty_weight / X.shape[0])
        self.tape.mark_output(loss)

    def __call__(self, w):
        vals = self.spec.unflatten(w)
        loss = float(self.tape.forward(vals)[0])
        grads = self.tape.backward(None, 0)
        return loss, np.concatenate([g.ravel() for g in grads])


def dnn_init(spec: MLPSpec, seed) -> np.ndarray:
    return init_posterior(spec, default_prior(spec), seed).mu


def run_dnn_baseline(problem: ProblemSpec, labeled, spec: MLPSpec, schedule: Schedule,
                     seed: int = 0, penalty_weight: float | None = None,
                     config: TrainConfig | None = None):
    """Adam on MSE + penalty with sigmoid bound repair; returns flat weights."""
    config = config or TrainConfig()
    if spec.bound_repair is None:
        raise ValueError("the DNN baseline needs an MLPSpec with bound repair")
    penalty_weight = config.penalty_weight if penalty_weight is None else penalty_weight
    X, Y = _as_xy(labeled)
    obj = DnnObjective(problem, spec, X, Y, penalty_weight, config.lambda_e, config.lambda_i)
    state = adam_init(dnn_init(spec, seed), config.dnn_lr, 0.0)
    start = time.perf_counter()
    steps, first, last = 0, None, None
    while True:
        if schedule.mode == "steps":
            if steps >= schedule.t_max:
                break
        elif time.perf_counter() - start >= schedule.t_max:
            break
        loss, grad = obj(state.params)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"non-finite DNN loss ({loss})", term="loss")
        first = loss if first is None else first
        last = loss
        state = svi_step(state, grad, steps)
        steps += 1
    stage = StageLog(SUP, 0, schedule.t_max, steps, first, last, config.dnn_lr,
                     time.perf_counter() - start)
    snap = _snapshot(schedule, config)
    snap["penalty_weight"] = penalty_weight
    return state.params, TrainRunReport("dnn-baseline", seed, schedule.mode, [stage], snap)


def dnn_spec_for(problem: ProblemSpec, config: TrainConfig | None = None) -> MLPSpec:
    config = config or TrainConfig()
    return mlp_spec_for(problem, width_from=config.dnn_hidden_from, bound_repair="sigmoid")


# --------------------------------------------------------------------------
# trials and model selection

def _snapshot(schedule, config):
    return {"schedule": asdict(schedule), "train": asdict(config)}


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("PROXYBNN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TrialResult:
    model: object  # MeanFieldPosterior or flat DNN weights
    report: TrainRunReport
    val_loss: float


@dataclass
class Selection:
    best_index: int
    val_losses: list[float]
    val_size: int
    trials: list[TrialResult]

    @property
    def best(self) -> TrialResult:
        return self.trials[self.best_index]

    def to_dict(self) -> dict:
        # a single trial is not validated; its loss is NaN and written as null
        losses = [None if math.isnan(v) else v for v in self.val_losses]
        return {"best_index": self.best_index, "val_losses": losses,
                "val_size": self.val_size, "criterion": "validation MSE of mean-weight prediction"}


def split_validation(n: int, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_val = max(1, int(round(fraction * n))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def run_trials(method: str, problem: ProblemSpec, labeled, spec: MLPSpec, schedule: Schedule,
               seed: int = 0, n_trials: int = 5, unlabeled=None, config: TrainConfig | None = None,
               val_fraction: float = 0.1) -> Selection:
    """Train ``n_trials`` models with distinct seeds and keep the best one.

    With more than one trial, ``val_fraction`` of the labeled data is held
    out and the trial with the lowest validation MSE of the mean-weight
    prediction is selected.
    """
    config = config or TrainConfig()
    X, Y = _as_xy(labeled)
    if n_trials > 1:
        tr, va = split_validation(X.shape[0], val_fraction, seed)
    else:
        tr, va = np.arange(X.shape[0]), np.arange(0)
    train = (X[tr], Y[tr])

    def one(t):
        s = seed * 1000 + t
        if method == "supervised":
            model, rep = run_supervised(problem, train, spec, schedule, s, config)
        elif method == "sandwich":
            model, rep = run_sandwich(problem, train, unlabeled, spec, schedule, s, config)
        elif method == "dnn-baseline":
            model, rep = run_dnn_baseline(problem, train, spec, schedule, s, config=config)
        else:
            raise ValueError(f"unknown method {method!r}")
        w = model.mu if isinstance(model, MeanFieldPosterior) else model
        val = float(np.mean((mlp_forward(spec, w, X[va]) - Y[va]) ** 2)) if va.size else float("nan")
        rep.model_id = f"{method}-seed{s}"
        return TrialResult(model, rep, val)

    workers = min(n_threads(), n_trials)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(one, range(n_trials)))
    else:
        trials = [one(t) for t in range(n_trials)]
    losses = [t.val_loss for t in trials]
    best = int(np.nanargmin(losses)) if va.size else 0
    return Selection(best, losses, int(va.size), trials)
