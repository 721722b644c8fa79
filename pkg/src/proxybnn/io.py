"""Datasets, checkpoints and report files.

Datasets are JSON lines. A record has an input ``x`` and, for labeled data,
a decision ``y`` and optionally an ``objective``. For ACOPF both may also be
given by name, which is the format accepted for externally solved data::

    {"x": {"pd": [...], "qd": [...]},
     "y": {"pg": [...], "qg": [...], "vm": [...], "va": [...]},
     "objective": 1234.5}

All values are per unit. Floats are written with ``repr`` precision so that a
write/read cycle is lossless and reruns produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .problems import AcopfProblem, ProblemSpec, problem_from_dict
from .vi import MeanFieldPosterior, MLPSpec

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, no NaN, numpy values converted."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_default, allow_nan=False)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# datasets

def write_dataset(path, X, Y=None, objective=None):
    """Write inputs (and labels) as one JSON object per line."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k, x in enumerate(X):
            rec = {"x": x.tolist()}
            if Y is not None:
                rec["y"] = np.asarray(Y[k], dtype=float).tolist()
            if objective is not None:
                rec["objective"] = float(objective[k])
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")


def _record_x(problem, rec, line):
    x = rec.get("x")
    if isinstance(x, dict):
        if not isinstance(problem, AcopfProblem):
            raise DatasetError(f"line {line}: named inputs are only defined for ACOPF")
        try:
            return problem.inputs_from_demand(x["pd"], x["qd"])
        except KeyError as exc:
            raise DatasetError(f"line {line}: input is missing {exc.args[0]!r}") from None
    return np.asarray(x, dtype=float)


def _record_y(problem, rec, line):
    y = rec["y"]
    if isinstance(y, dict):
        if not isinstance(problem, AcopfProblem):
            raise DatasetError(f"line {line}: named outputs are only defined for ACOPF")
        try:
            return problem.pack(y["pg"], y["qg"], y["vm"], y["va"])[0]
        except KeyError as exc:
            raise DatasetError(f"line {line}: output is missing {exc.args[0]!r}") from None
    return np.asarray(y, dtype=float)


def read_dataset(path, problem: ProblemSpec, require_labels: bool = False):
    """Read a JSONL dataset as ``(X, Y, objective)``.

    ``Y`` and ``objective`` are None when no record carries them. Mixed files
    (some records labeled, some not) are rejected.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    xs, ys, objs = [], [], []
    with open(path) as fh:
        for line, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line}: {exc.msg}") from None
            if "x" not in rec:
                raise DatasetError(f"line {line}: record has no 'x'")
            x = _record_x(problem, rec, line)
            if x.shape != (problem.input_dim,):
                raise DatasetError(f"line {line}: input has shape {x.shape}, "
                                   f"expected ({problem.input_dim},)")
            xs.append(x)
            if "y" in rec:
                y = _record_y(problem, rec, line)
                if y.shape != (problem.output_dim,):
                    raise DatasetError(f"line {line}: output has shape {y.shape}, "
                                       f"expected ({problem.output_dim},)")
                ys.append(y)
            if "objective" in rec:
                objs.append(float(rec["objective"]))
    if not xs:
        raise DatasetError(f"{path} holds no records")
    if ys and len(ys) != len(xs):
        raise DatasetError(f"{path} mixes labeled and unlabeled records")
    if require_labels and not ys:
        raise DatasetError(f"{path} holds no labels")
    X = np.stack(xs)
    Y = np.stack(ys) if ys else None
    obj = np.array(objs) if objs and len(objs) == len(xs) else None
    return X, Y, obj


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, spec: MLPSpec, problem: ProblemSpec, method: str,
                    config: dict | None = None, extra: dict | None = None):
    """Store a trained model with everything needed to evaluate it.

    For a BNN the parameter vector is ``[mu, log_sigma]`` in flat network
    order followed by the noise latent; for the DNN baseline it is the flat
    weight vector.
    """
    if isinstance(model, MeanFieldPosterior):
        params = {"mu": model.mu, "log_sigma": model.log_sigma,
                  "noise_mu": model.noise_mu, "noise_log_sigma": model.noise_log_sigma}
        kind = "bnn"
    else:
        params = {"weights": np.asarray(model, dtype=float)}
        kind = "dnn"
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "method": method,
           "spec": spec.to_dict(), "spec_hash": spec.digest(),
           "problem": problem.to_dict(), "params": params, "config": config or {}}
    if extra:
        doc.update(extra)
    write_json(path, doc)


def load_checkpoint(path):
    """Return ``(model, spec, problem, document)``."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = read_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    spec = MLPSpec.from_dict(doc["spec"])
    if spec.digest() != doc["spec_hash"]:
        raise ValueError("checkpoint architecture does not match its hash")
    p = doc["params"]
    if doc["kind"] == "bnn":
        model = MeanFieldPosterior(np.array(p["mu"], dtype=float),
                                   np.array(p["log_sigma"], dtype=float),
                                   float(p["noise_mu"]), float(p["noise_log_sigma"]))
        n = model.mu.size
    else:
        model = np.array(p["weights"], dtype=float)
        n = model.size
    if n != spec.n_params:
        raise ValueError(f"checkpoint has {n} parameters, architecture needs {spec.n_params}")
    return model, spec, problem_from_dict(doc["problem"]), doc
