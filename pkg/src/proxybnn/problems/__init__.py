from .acopf import (
    AcopfCase,
    AcopfProblem,
    Branch,
    Bus,
    CaseParseError,
    Generator,
    Load,
    Shunt,
    acopf_cost,
    acopf_parse_case,
    acopf_residuals_eq,
    acopf_residuals_ineq,
    acopf_serialize_case,
    case_from_dict,
)
from .base import ProblemSpec, feasibility
from .qp import QuadraticProblem, qp_make, qp_solve_oracle


def sample_inputs(problem: ProblemSpec, n: int, seed):
    if n < 1:
        raise ValueError("n must be >= 1")
    return problem.sample_inputs(n, seed)


def problem_from_dict(d: dict) -> ProblemSpec:
    if d["kind"] == "qp":
        return QuadraticProblem.from_dict(d)
    if d["kind"] == "acopf":
        return AcopfProblem(case_from_dict(d["case"]), d.get("load_interval", (0.8, 1.2)))
    raise ValueError(f"unknown problem kind {d['kind']!r}")
