"""Command-line entry point: ``proxybnn <command> [flags]``.

Commands
--------
gen-data    sample inputs and write labeled / unlabeled / test JSONL files
train       train supervised, sandwich or DNN-baseline models and keep the best trial
eval        optimality and feasibility gaps of the mean and SvP predictions
bounds      per-variable probabilistic confidence bounds
meta-study  convergence sweeps over M and H plus the variance hypothesis table

Every run is fully described by a :class:`RunConfig`. Values come from the
defaults, then ``--config file.json``, then explicit flags. The resolved
config is written into every artifact.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .bounds import (
    METRIC_COLUMNS,
    PCB_COLUMNS,
    UndefinedGapError,
    bound_widths,
    delta_from_confidence,
    hypothesis_csv,
    hypothesis_study,
    instance_metrics,
    metrics,
    pcb_from_arrays,
)
from .posterior import build_ppms, column_scores, svp_select
from .problems import AcopfProblem, acopf_parse_case, qp_make, sample_inputs
from .schemas import EVAL_COLUMNS
from .sandwich import Schedule, TrainConfig, dnn_spec_for, run_trials
from .vi import MeanFieldPosterior, mlp_forward, mlp_spec_for

log = logging.getLogger("proxybnn")

MODES = ("supervised", "sandwich", "dnn-baseline")


class NoSolverError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # problem
    problem: str = "qp"
    qp_n: int = 8
    qp_m: int = 2
    qp_seed: int = 0
    case: str | None = None
    load_interval: list = field(default_factory=lambda: [0.8, 1.2])
    # data
    labeled: str | None = None
    unlabeled: str | None = None
    test: str | None = None
    n_labeled: int = 512
    n_unlabeled: int = 2048
    n_test: int = 1000
    # training
    mode: str = "sandwich"
    seed: int = 0
    budget_mode: str = "wall"
    t_max: float = 600.0
    t_round: float | None = None  # None: a third of t_max
    sup_fraction: float = 0.4
    trials: int = 5
    val_fraction: float = 0.1
    hidden_factor: int = 2
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
    # evaluation and bounds
    samples: int = 500
    confidence: float = 0.95
    r_default: float = 1.0
    alpha: float = 2.0
    emp_bernstein_coef: float = 3.0
    svp_ineq_weight: float | None = None
    m_grid: list = field(default_factory=lambda: [10, 100, 1000])
    h_grid: list = field(default_factory=lambda: [10, 100, 1000])
    # output
    out: str = "runs/default"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.problem not in ("qp", "acopf"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    # resolved paths and objects -------------------------------------------------
    def path(self, name: str) -> Path:
        given = getattr(self, name, None)
        return Path(given) if given else Path(self.out) / f"{name}.jsonl"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.json"

    def schedule(self) -> Schedule:
        t_round = self.t_round if self.t_round is not None else self.t_max / 3.0
        if self.budget_mode == "steps":
            t_round = max(1, int(round(t_round)))
        return Schedule(self.t_max, t_round, self.sup_fraction, self.budget_mode)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def snapshot(self) -> dict:
        return asdict(self)


def load_config(path) -> RunConfig:
    data = io.read_json(path)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def build_problem(cfg: RunConfig):
    if cfg.problem == "qp":
        return qp_make(cfg.qp_n, cfg.qp_m, cfg.qp_seed)
    if not cfg.case:
        raise ValueError("the acopf problem needs --case")
    return AcopfProblem(acopf_parse_case(cfg.case), cfg.load_interval)


def _artifact(cfg: RunConfig, **payload) -> dict:
    return {"format_version": io.FORMAT_VERSION, "config": cfg.snapshot(), **payload}


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


# ------------------------------------------------------------------------------
# gen-data

def _audit(problem, X, Y) -> dict:
    g = np.abs(np.asarray(problem.eq_residuals(X, Y)))
    h = np.asarray(problem.ineq_residuals(X, Y))
    return {"max_abs_eq": float(g.max()) if g.size else 0.0,
            "max_ineq": float(h.max()) if h.size else 0.0}


def cmd_gen_data(cfg: RunConfig) -> dict:
    problem = build_problem(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    audit = {}
    if cfg.problem == "qp":
        for name, n, k in (("labeled", cfg.n_labeled, 1), ("test", cfg.n_test, 3)):
            X = sample_inputs(problem, n, [cfg.seed, k])
            Y = problem.solve(X)
            io.write_dataset(out / f"{name}.jsonl", X, Y, problem.cost(X, Y))
            audit[name] = _audit(problem, X, Y)
            files[name] = out / f"{name}.jsonl"
    else:
        # no solver ships with the package: labels must come from an ingest file
        for name, n in (("labeled", cfg.n_labeled), ("test", cfg.n_test)):
            src = getattr(cfg, name)
            if src is None:
                if name == "labeled" and n > 0:
                    raise NoSolverError(
                        "ACOPF labels need an externally solved JSONL file (--labeled); "
                        "no optimization solver is bundled")
                continue
            X, Y, obj = io.read_dataset(src, problem, require_labels=True)
            io.write_dataset(out / f"{name}.jsonl", X, Y, obj)
            audit[name] = _audit(problem, X, Y)
            files[name] = out / f"{name}.jsonl"
    Xu = sample_inputs(problem, cfg.n_unlabeled, [cfg.seed, 2])
    io.write_dataset(out / "unlabeled.jsonl", Xu)
    files["unlabeled"] = out / "unlabeled.jsonl"
    manifest = _artifact(cfg, problem=problem.to_dict(), audit=audit,
                         files={k: {"path": str(p), "sha256": io.file_digest(p),
                                    "records": sum(1 for _ in open(p))}
                                for k, p in files.items()})
    io.write_json(out / "data_manifest.json", manifest)
    return manifest


# ------------------------------------------------------------------------------
# train

def _spec(cfg, problem):
    if cfg.mode == "dnn-baseline":
        return dnn_spec_for(problem, cfg.train_config())
    return mlp_spec_for(problem, cfg.hidden_factor)


def cmd_train(cfg: RunConfig) -> dict:
    problem = build_problem(cfg)
    X, Y, _ = io.read_dataset(cfg.path("labeled"), problem, require_labels=True)
    Xu = None
    if cfg.mode == "sandwich":
        Xu, _, _ = io.read_dataset(cfg.path("unlabeled"), problem)
    spec = _spec(cfg, problem)
    sel = run_trials(cfg.mode, problem, (X, Y), spec, cfg.schedule(), cfg.seed, cfg.trials,
                     Xu, cfg.train_config(), cfg.val_fraction)
    out = Path(cfg.out)
    snap = cfg.snapshot()
    trial_paths = []
    for t, trial in enumerate(sel.trials):
        p = out / "trials" / f"trial_{t}.json"
        io.save_checkpoint(p, trial.model, spec, problem, cfg.mode, snap,
                           {"report": trial.report.to_dict(), "val_loss": _nan_to_none(trial.val_loss)})
        trial_paths.append(str(p))
    best = sel.best
    io.save_checkpoint(cfg.checkpoint_path(), best.model, spec, problem, cfg.mode, snap,
                       {"report": best.report.to_dict(), "selection": sel.to_dict()})
    # metrics of the selected model on its own training labels, for later
    # self-consistency checks of eval
    preds, _ = _predictions(cfg, best.model, spec, problem, X, with_svp=False)
    train_metrics = {name: dict(zip(METRIC_COLUMNS, map(_nan_to_none, _metrics_row(problem, X, Y, p))))
                     for name, p in preds.items()}
    report = _artifact(cfg, selection=sel.to_dict(), train_metrics=train_metrics,
                       trials=[t.report.to_dict() for t in sel.trials],
                       trial_checkpoints=trial_paths,
                       rounds=cfg.schedule().rounds if cfg.mode == "sandwich" else 0,
                       checkpoint_sha256=io.file_digest(cfg.checkpoint_path()))
    io.write_json(out / "train_report.json", report)
    return report


# ------------------------------------------------------------------------------
# eval

def _predictions(cfg, model, spec, problem, X, with_svp=True):
    """``{row name: predictions}`` plus SvP diagnostics for BNN models."""
    if not isinstance(model, MeanFieldPosterior):
        return {"point": mlp_forward(spec, model, X)}, []
    ppms, _ = build_ppms(model, spec, X, cfg.samples, cfg.seed)
    mean = ppms.mean(axis=2)
    if not with_svp:
        return {"mean": mean}, []
    svp, diag = [], []
    for k in range(X.shape[0]):
        scores = column_scores(ppms[k], problem, X[k], cfg.svp_ineq_weight)
        j, col = svp_select(ppms[k], problem, X[k], cfg.svp_ineq_weight)
        svp.append(col)
        diag.append({"instance": k, "svp_column": j, "svp_score": float(scores[j]),
                     "min_column_score": float(scores.min())})
    return {"mean": mean, "svp": np.stack(svp)}, diag


def _metrics_row(problem, X, Y, pred):
    if Y is None:
        per = instance_metrics(problem, X, None, pred)
        return [float("nan")] + [float(per[k].mean()) for k in METRIC_COLUMNS[1:]]
    try:
        return metrics(problem, X, Y, pred).row()
    except UndefinedGapError:
        per = instance_metrics(problem, X, None, pred)
        return [float("nan")] + [float(per[k].mean()) for k in METRIC_COLUMNS[1:]]


def cmd_eval(cfg: RunConfig) -> dict:
    model, spec, problem, _ = io.load_checkpoint(cfg.checkpoint_path())
    X, Y, _ = io.read_dataset(cfg.path("test"), problem)
    preds, diag = _predictions(cfg, model, spec, problem, X)
    rows = [[name] + _metrics_row(problem, X, Y, p) for name, p in preds.items()]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "eval.csv", EVAL_COLUMNS, rows)
    doc = _artifact(cfg, columns=list(EVAL_COLUMNS),
                    rows=[dict(zip(EVAL_COLUMNS, [r[0]] + [_nan_to_none(v) for v in r[1:]]))
                          for r in rows],
                    n_instances=int(X.shape[0]), diagnostics=diag)
    io.write_json(out / "eval.json", doc)
    return doc


# ------------------------------------------------------------------------------
# bounds and meta-study

def _bnn_checkpoint(path):
    model, spec, problem, doc = io.load_checkpoint(path)
    if not isinstance(model, MeanFieldPosterior):
        raise ValueError(f"{path}: confidence bounds need a Bayesian model")
    return model, spec, problem


def _labeled_test(cfg, problem, M=None):
    X, Y, _ = io.read_dataset(cfg.path("test"), problem, require_labels=True)
    if M is not None:
        if M > X.shape[0]:
            raise ValueError(f"M = {M} exceeds the {X.shape[0]} test points available")
        X, Y = X[:M], Y[:M]
    return X, Y


def cmd_bounds(cfg: RunConfig) -> dict:
    q, spec, problem = _bnn_checkpoint(cfg.checkpoint_path())
    X, Y = _labeled_test(cfg, problem)
    ppms, _ = build_ppms(q, spec, X, cfg.samples, cfg.seed)
    rep = pcb_from_arrays(Y, ppms, bound_widths(problem, cfg.r_default), delta_from_confidence(cfg.confidence),
                          cfg.alpha, cfg.emp_bernstein_coef)
    rep.config = cfg.snapshot()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pcb.csv").write_text(rep.to_csv())
    io.write_json(out / "pcb.json", asdict(rep))
    return asdict(rep)


def cmd_meta_study(cfg: RunConfig) -> dict:
    q, spec, problem = _bnn_checkpoint(cfg.checkpoint_path())
    delta = delta_from_confidence(cfg.confidence)
    R = bound_widths(problem, cfg.r_default)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    m_rows = []
    for M in sorted(cfg.m_grid):
        X, Y = _labeled_test(cfg, problem, M)
        ppms, _ = build_ppms(q, spec, X, cfg.samples, cfg.seed)
        rep = pcb_from_arrays(Y, ppms, R, delta, cfg.alpha, cfg.emp_bernstein_coef)
        for row in rep.rows():
            m_rows.append(row[:-1])
    _write_csv(out / "meta_m.csv", PCB_COLUMNS[:-1], m_rows)

    X, Y = _labeled_test(cfg, problem)
    h_rows = []
    for H in sorted(cfg.h_grid):
        ppms, _ = build_ppms(q, spec, X, H, cfg.seed)
        rep = pcb_from_arrays(Y, ppms, R, delta, cfg.alpha, cfg.emp_bernstein_coef)
        h_rows += [[H, i, rep.mpv[i], rep.mean_abs_err[i], rep.eps_bernstein_mpv[i]]
                   for i in rep.variable_id]
    _write_csv(out / "meta_h.csv", ("H", "variable_id", "mpv", "mean_abs_err", "eps_bernstein_mpv"),
               h_rows)

    paths = sorted((Path(cfg.out) / "trials").glob("trial_*.json"))
    if len(paths) < 2:
        raise ValueError("the hypothesis study needs at least two trained models "
                         f"(found {len(paths)} under {Path(cfg.out) / 'trials'})")
    runs = []
    for p in paths:
        qm, sm, pm = _bnn_checkpoint(p)
        ppms, _ = build_ppms(qm, sm, X, cfg.samples, cfg.seed)
        runs.append((p.stem, cfg.problem, Y, ppms))
    study = hypothesis_study(runs)
    (out / "hypothesis.csv").write_text(hypothesis_csv(study))
    doc = _artifact(cfg, fraction_holds={str(a): v for a, v in study["fraction_holds"].items()},
                    models=[p.stem for p in paths], files=["meta_m.csv", "meta_h.csv", "hypothesis.csv"])
    io.write_json(out / "meta_study.json", doc)
    return doc


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "bounds": cmd_bounds, "meta-study": cmd_meta_study}


# ------------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--problem", choices=["qp", "acopf"])
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--seed", type=int)
    budget = common.add_mutually_exclusive_group()
    budget.add_argument("--budget-secs", type=float, help="wall-clock budget per trial")
    budget.add_argument("--budget-steps", type=int, help="optimizer-step budget per trial")
    common.add_argument("--round", dest="t_round", type=float,
                        help="length of one Sup+UnSup round (default: a third of the budget)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--case", help="ACOPF case file (JSON)")
    common.add_argument("--labeled", help="labeled JSONL (ACOPF: externally solved ingest file)")
    common.add_argument("--unlabeled", help="unlabeled JSONL")
    common.add_argument("--test", help="test JSONL")
    common.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")
    common.add_argument("--samples", type=int, help="posterior samples H")
    common.add_argument("--confidence", type=float, help="1 - delta")
    common.add_argument("--trials", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="proxybnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__ or name)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    data = asdict(cfg)
    for key in ("problem", "mode", "seed", "t_round", "out", "case", "labeled", "unlabeled",
                "test", "checkpoint", "samples", "confidence", "trials"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if args.budget_secs is not None:
        data.update(budget_mode="wall", t_max=args.budget_secs)
    if args.budget_steps is not None:
        data.update(budget_mode="steps", t_max=args.budget_steps)
    if data["case"] and args.problem is None and not args.config:
        data["problem"] = "acopf"
    return RunConfig(**data)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.schedule()  # validate early
        COMMANDS[args.command](cfg)
    except (ValueError, FileNotFoundError, NoSolverError) as exc:
        print(f"proxybnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"proxybnn {args.command}: wrote artifacts to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
