"""Acceptance criteria, one ``criterion`` marker per item.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section at the end of the report: one PASS/FAIL line per criterion with its
runtime against the limit.
"""

import json
import math
import os

import numpy as np
import pytest

from proxybnn import autodiff as ad
from proxybnn import io
from proxybnn.autodiff import PRIMITIVES, Tape, gradcheck
from proxybnn.bounds import (
    bernstein_eps_mpv,
    empirical_bernstein_eps,
    hoeffding_eps,
    hypothesis_study,
    instance_metrics,
    metrics,
    variance_decomposition,
)
from proxybnn.cli import main
from proxybnn.posterior import build_ppms, svp_select
from proxybnn.problems import AcopfProblem, acopf_parse_case, qp_make
from proxybnn.problems.base import feasibility
from proxybnn.sandwich import Schedule, run_sandwich, run_supervised
from proxybnn.vi import MeanFieldPosterior, PriorSpec, kl_mean_field, mlp_spec_for

from . import cases

criterion = pytest.mark.criterion
TOL_GRAD = 1e-6

# ------------------------------------------------------------------------------
# 1. autodiff gradcheck

# leaf samplers keep every point away from kinks and domain edges
_POS = lambda rng, s: rng.uniform(0.5, 2.0, s)  # noqa: E731
_ANY = lambda rng, s: rng.uniform(-2.0, 2.0, s)  # noqa: E731
_AWAY = lambda rng, s: rng.choice([-1, 1], s) * rng.uniform(0.1, 2.0, s)  # noqa: E731

PRIMITIVE_GRAPHS = {
    "add": ((_ANY, _ANY), lambda a, b: a + b),
    "mul": ((_ANY, _ANY), lambda a, b: a * b),
    "div": ((_ANY, _POS), lambda a, b: a / b),
    "neg": ((_ANY,), lambda a: -a),
    "matmul": (((lambda rng, s: rng.uniform(-2, 2, (2, 3))), (lambda rng, s: rng.uniform(-2, 2, (3, 2)))),
               lambda a, b: a @ b),
    "relu": ((_AWAY,), ad.relu),
    "sigmoid": ((_ANY,), ad.sigmoid),
    "softplus": ((_ANY,), ad.softplus),
    "exp": ((_ANY,), ad.exp),
    "log": ((_POS,), ad.log),
    "sin": ((_ANY,), ad.sin),
    "cos": ((_ANY,), ad.cos),
    "square": ((_ANY,), ad.square),
    "sum": ((_ANY,), lambda a: ad.sum(a, axis=0)),
    "sqrt": ((_POS,), ad.sqrt),
}


def _worst_over_points(build, samplers, points=100, seed=0):
    """Largest gradcheck error over random points, checking every output element."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        vals = [s(rng, (3,)) for s in samplers]
        tape = Tape()
        out = build(*[tape.leaf(v) for v in vals])
        tape.mark_output(out)
        for element in np.ndindex(out.shape):
            worst = max(worst, gradcheck(tape, vals, element=element if out.shape else None))
    return worst


def test_primitive_table_is_complete():
    assert set(PRIMITIVE_GRAPHS) == set(PRIMITIVES)


@criterion(1, "autodiff gradcheck: primitives and composites at 100 points, rel err < 1e-6", 10)
@pytest.mark.parametrize("name", sorted(PRIMITIVE_GRAPHS))
def test_c1_primitive_gradcheck(name):
    samplers, build = PRIMITIVE_GRAPHS[name]
    assert _worst_over_points(build, samplers) < TOL_GRAD


def _mlp(x, W1, b1, W2, b2):
    return ad.sum(ad.relu(x @ W1 + b1) @ W2 + b2)


def _gaussian_log_density(y, mean, log_var):
    var = ad.exp(log_var)
    return ad.sum(-0.5 * (ad.log(var * (2 * math.pi)) + ad.square(y - mean) / var))


@criterion(1, "autodiff gradcheck: primitives and composites at 100 points, rel err < 1e-6", 10)
def test_c1_two_layer_mlp():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        vals = [rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5),
                rng.normal(size=(5, 2)), rng.normal(size=2)]
        tape = Tape()
        tape.mark_output(_mlp(*[tape.leaf(v) for v in vals]))
        worst = max(worst, gradcheck(tape, vals))
    assert worst < TOL_GRAD


@criterion(1, "autodiff gradcheck: primitives and composites at 100 points, rel err < 1e-6", 10)
def test_c1_gaussian_log_density():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        vals = [rng.normal(size=6), rng.normal(size=6), rng.uniform(-2, 1, 6)]
        tape = Tape()
        tape.mark_output(_gaussian_log_density(*[tape.leaf(v) for v in vals]))
        worst = max(worst, gradcheck(tape, vals))
    assert worst < TOL_GRAD


@criterion(1, "autodiff gradcheck: primitives and composites at 100 points, rel err < 1e-6", 10)
def test_c1_qp_feasibility():
    p = qp_make(8, 2, 0)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = p.sample_inputs(2, rng.integers(1 << 30))
        # outputs straddle the +-10 box so some inequality terms are active
        y = rng.uniform(-12.0, 12.0, size=(2, 8))
        tape = Tape()
        tape.mark_output(ad.sum(feasibility(p, x, tape.leaf(y))))
        worst = max(worst, gradcheck(tape, [y]))
    assert worst < TOL_GRAD


# ------------------------------------------------------------------------------
# 2. KL

@criterion(2, "KL golden values within 1e-12 and KL >= 0 on 1e4 random pairs", 5)
def test_c2_kl_golden_values():
    def one(mu, var):
        return MeanFieldPosterior(np.array([mu]), np.array([0.5 * math.log(var)]))

    unit = PriorSpec(np.zeros(1), np.ones(1))
    assert kl_mean_field(one(0.4, 0.3), PriorSpec([0.4], [0.3]), include_noise=False) == 0.0
    assert abs(kl_mean_field(one(1.0, 1.0), unit, include_noise=False) - 0.5) < 1e-12
    expected = math.log(2.0) + 0.125 - 0.5
    assert abs(kl_mean_field(one(0.0, 0.25), unit, include_noise=False) - expected) < 1e-12


@criterion(2, "KL golden values within 1e-12 and KL >= 0 on 1e4 random pairs", 5)
def test_c2_kl_nonnegative():
    rng = np.random.default_rng(0)
    worst = math.inf
    for _ in range(10_000):
        d = rng.integers(1, 6)
        q = MeanFieldPosterior(rng.normal(0, 3, d), rng.uniform(-4, 2, d),
                               rng.normal(), rng.uniform(-3, 1))
        p = PriorSpec(rng.normal(0, 3, d), np.exp(rng.uniform(-6, 3, d)),
                      rng.normal(), math.exp(rng.uniform(-3, 2)))
        worst = min(worst, kl_mean_field(q, p))
    assert worst >= 0.0


# ------------------------------------------------------------------------------
# 3. concentration bounds

@criterion(3, "bound golden values and eps ordering on the (M, delta, mpv) grid", 5)
def test_c3_golden_values():
    assert abs(hoeffding_eps(1, 1000, 0.05) - 0.042947) <= 1e-5
    assert abs(empirical_bernstein_eps(0.01, 1, 1000, 0.05) - 0.021332) <= 1e-5
    assert abs(bernstein_eps_mpv(0.005, 1, 1000, 0.05) - 0.009738) <= 1e-5


MPV_GRID = (0.0, 1e-4, 1e-3, 1e-2, 0.025)  # v_hat = 2 mpv <= 0.05 R^2 with R = 1


@criterion(3, "bound golden values and eps ordering on the (M, delta, mpv) grid", 5)
@pytest.mark.parametrize("M", [100, 1000, 10_000, 100_000])
@pytest.mark.parametrize("delta", [0.01, 0.05, 0.1])
def test_c3_ordering(M, delta):
    R = 1.0
    violations = []
    for m in MPV_GRID:
        eb = bernstein_eps_mpv(m, R, M, delta)
        ee = empirical_bernstein_eps(2 * m, R, M, delta)
        eh = hoeffding_eps(R, M, delta)
        if not eb < ee < eh:
            violations.append(f"mpv={m}: bernstein={eb:.4f} emp={ee:.4f} hoeffding={eh:.4f}")
    assert not violations, "; ".join(violations)


# ------------------------------------------------------------------------------
# 4. variance decomposition

@criterion(4, "law of total variance within 1e-10 on 100 random 100x100 matrices", 5)
def test_c4_total_variance_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        e = rng.normal(size=(100, 100)) * rng.uniform(0.01, 5) + rng.normal(size=(100, 1)) * rng.uniform(0, 3)
        d = variance_decomposition(e)
        worst = max(worst, abs(d.component_sum - e.var()))
    assert worst < 1e-10


# ------------------------------------------------------------------------------
# 5. SvP

@criterion(5, "SvP equals exhaustive argmin on 200 random QP PPMs", 10)
def test_c5_svp_oracle():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 21))
        p = qp_make(n, int(rng.integers(1, n)), trial)
        H = int(rng.integers(1, 129))
        x = p.sample_inputs(1, trial)[0]
        ppm = p.solve(x)[:, None] + rng.normal(scale=rng.uniform(0.01, 1.0), size=(n, H))
        if H > 3:  # exercise tie-breaking with duplicated columns
            ppm[:, H - 1] = ppm[:, 1]
        scores = [float(np.max(np.abs(p.eq_residuals(x, ppm[:, j])))) for j in range(H)]
        best = min(range(H), key=lambda j: (scores[j], j))
        j, col = svp_select(ppm, p, x)
        assert j == best
        np.testing.assert_array_equal(col, ppm[:, best])
        assert all(scores[j] <= s for s in scores)


# ------------------------------------------------------------------------------
# 6. ACOPF residuals

@criterion(6, "ACOPF residual oracle on hand-built cases", 5)
def test_c6_two_bus_flows():
    case = cases.two_bus()
    p = AcopfProblem(case)
    g, b = cases.Y_LINE.real, cases.Y_LINE.imag
    for theta in (0.05, 0.1, 0.3):
        y = p.pack([[0.0, 0.0]], [[0.0, 0.0]], [[1.0, 1.0]], [[0.0, -theta]])
        p_fr, q_fr, p_to, q_to = (f[0, 0] for f in p.branch_flows(y))
        assert abs(p_fr - (g * (1 - math.cos(theta)) - b * math.sin(theta))) < 1e-10
        assert abs(q_fr - (-b * (1 - math.cos(theta)) - g * math.sin(theta))) < 1e-10
        sf, st = cases.complex_flows(case, [1.0, 1.0], [0.0, -theta])[0]
        assert max(abs(p_fr - sf.real), abs(q_fr - sf.imag), abs(p_to - st.real), abs(q_to - st.imag)) < 1e-10


@criterion(6, "ACOPF residual oracle on hand-built cases", 5)
def test_c6_flat_voltage_zero_residuals():
    p = AcopfProblem(cases.two_bus())
    y = p.pack([[0.0, 0.0]], [[0.0, 0.0]], [[1.0, 1.0]], [[0.0, 0.0]])
    assert np.all(p.eq_residuals(np.zeros((1, 0)), y) == 0.0)


@criterion(6, "ACOPF residual oracle on hand-built cases", 5)
def test_c6_lossless_antisymmetry():
    p = AcopfProblem(cases.two_bus(y=1 / complex(0.0, 0.1)))
    rng = np.random.default_rng(0)
    for _ in range(200):
        y = p.pack([[0, 0]], [[0, 0]], [rng.uniform(0.9, 1.1, 2)], [rng.uniform(-0.5, 0.5, 2)])
        p_fr, _, p_to, _ = p.branch_flows(y)
        assert abs(p_fr[0, 0] + p_to[0, 0]) < 1e-12


@criterion(6, "ACOPF residual oracle on hand-built cases", 5)
def test_c6_solved_instance_file():
    """Checks an externally solved file when one is supplied.

    Set PROXYBNN_SOLVED_CASE (case JSON) and PROXYBNN_SOLVED_DATA (JSONL of
    solved instances) to run it.
    """
    case_path = os.environ.get("PROXYBNN_SOLVED_CASE")
    data_path = os.environ.get("PROXYBNN_SOLVED_DATA")
    if not (case_path and data_path):
        pytest.skip("no externally solved instance file supplied")
    p = AcopfProblem(acopf_parse_case(case_path))
    X, Y, _ = io.read_dataset(data_path, p, require_labels=True)
    assert np.max(np.abs(p.eq_residuals(X, Y))) <= 1e-4
    assert np.max(p.ineq_residuals(X, Y)) <= 1e-6


# ------------------------------------------------------------------------------
# 7-9. training trends on QP(8, 2)

QP = qp_make(8, 2, 0)
SPEC = mlp_spec_for(QP)
X_TEST = QP.sample_inputs(500, 99)
Y_TEST = QP.solve(X_TEST)
STEPS = Schedule(3000, 1000, mode="steps")  # equal step budget for both methods
H = 100


def _data(seed):
    X = QP.sample_inputs(64, [seed, 1])
    return (X, QP.solve(X)), QP.sample_inputs(256, [seed, 2])


def _ppms(q, seed):
    return build_ppms(q, SPEC, X_TEST, H, seed)[0]


@pytest.fixture(scope="module")
def trend_models():
    out = {"supervised": [], "sandwich": []}
    for seed in range(5):
        lab, unl = _data(seed)
        out["supervised"].append(run_supervised(QP, lab, SPEC, STEPS, seed=seed)[0])
        out["sandwich"].append(run_sandwich(QP, lab, unl, SPEC, STEPS, seed=seed)[0])
    return out


@criterion(7, "sandwich mean Max-Eq <= supervised over 5 seeds (QP 8x2, 64/256, equal steps)", 300)
def test_c7_sandwich_beats_supervised(trend_models):
    max_eq = {name: [metrics(QP, X_TEST, Y_TEST, _ppms(q, s).mean(axis=2)).max_eq
                     for s, q in enumerate(models)]
              for name, models in trend_models.items()}
    sw, sup = np.mean(max_eq["sandwich"]), np.mean(max_eq["supervised"])
    assert sw <= sup, f"sandwich {sw:.4f} vs supervised {sup:.4f}"


@criterion(8, "SvP Max-Eq <= mean-prediction Max-Eq on >= 80% of test points", 60)
def test_c8_svp_improves(trend_models):
    fractions = []
    for models in trend_models.values():
        for s, q in enumerate(models):
            ppms = _ppms(q, s)
            svp = np.stack([svp_select(ppms[k], QP, X_TEST[k])[1] for k in range(len(X_TEST))])
            a = instance_metrics(QP, X_TEST, Y_TEST, svp)["max_eq"]
            b = instance_metrics(QP, X_TEST, Y_TEST, ppms.mean(axis=2))["max_eq"]
            fractions.append(float(np.mean(a <= b)))
    assert min(fractions) >= 0.8, fractions


@criterion(9, "2*MPV >= V_e for >= 90% of output variables over 10 QP runs", 600)
def test_c9_variance_hypothesis():
    runs = []
    for seed in range(10):
        lab, unl = _data(seed)
        q, _ = run_sandwich(QP, lab, unl, SPEC, STEPS, seed=seed)
        runs.append((f"seed{seed}", "qp", Y_TEST, _ppms(q, seed)))
    study = hypothesis_study(runs)
    ratio = np.median([r.total_variance / r.mpv for r in study["rows"]])
    assert study["fraction_holds"][2.0] >= 0.9, (
        f"fraction {study['fraction_holds'][2.0]:.3f}; median V_e / MPV = {ratio:.1f}")


# ------------------------------------------------------------------------------
# 10. determinism

@criterion(10, "gen-data / train (steps) / eval reruns are bit-identical", 120)
def test_c10_cli_determinism(tmp_path):
    cfg = dict(qp_n=8, qp_m=2, n_labeled=128, n_unlabeled=512, n_test=200, budget_mode="steps",
               t_max=300, trials=3, samples=50, seed=11, out=str(tmp_path))
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    names = ("labeled.jsonl", "unlabeled.jsonl", "test.jsonl", "data_manifest.json",
             "checkpoint.json", "train_report.json", "eval.csv", "eval.json")
    snapshots = []
    for _ in range(2):
        for command in ("gen-data", "train", "eval"):
            assert main([command, "--config", str(path)]) == 0
        snapshots.append({n: (tmp_path / n).read_bytes() for n in names})
    differing = [n for n in names if snapshots[0][n] != snapshots[1][n]]
    assert not differing
