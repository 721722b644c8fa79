# %% [markdown]
# # Learning a QP proxy with a Bayesian network
#
# A random equality-constrained quadratic program maps a right-hand side `x`
# to an optimal decision `y*`. We learn that map from only 64 solved
# instances, once with labels alone and once with the sandwich schedule that
# interleaves feasibility-only stages on 256 unsolved inputs. Both runs get
# the same optimizer-step budget.

# %%
import numpy as np

from proxybnn import Schedule, metrics, mlp_spec_for, predict, qp_make, run_sandwich, run_supervised

problem = qp_make(n=8, m=2, seed=0)
spec = mlp_spec_for(problem)
X = problem.sample_inputs(64, [0, 1])
Y = problem.solve(X)
X_unlabeled = problem.sample_inputs(256, [0, 2])
X_test = problem.sample_inputs(500, 99)
Y_test = problem.solve(X_test)
print(f"{problem.input_dim} inputs, {problem.output_dim} outputs, {spec.n_params} weights")

# %% [markdown]
# Budgets are counted in optimizer steps so that the run is reproducible;
# `Schedule(600, 200)` without `mode="steps"` would use seconds instead.

# %%
schedule = Schedule(3000, 1000, mode="steps")
q_sup, _ = run_supervised(problem, (X, Y), spec, schedule, seed=0)
q_sw, report = run_sandwich(problem, (X, Y), X_unlabeled, spec, schedule, seed=0)
for stage in report.stages:
    print(f"{stage.kind:6s} steps={stage.steps:5d} lr0={stage.lr0:.2e}")

# %% [markdown]
# ## Mean prediction against selection via the posterior
#
# Each test input gets a matrix of 100 posterior predictions. The mean row
# averages them; the SvP row keeps the single column with the smallest
# equality violation.

# %%
header = ("model", "prediction", "Gap%", "Max Eq.", "Mean Eq.", "Max Ineq.", "Mean Ineq.")
print(" | ".join(header))
for name, q in (("supervised", q_sup), ("sandwich", q_sw)):
    mean, svp, _ = predict(q, spec, problem, X_test, H=100, seed=0)
    for label, pred in (("mean", mean), ("svp", svp)):
        row = metrics(problem, X_test, Y_test, pred).row()
        print(" | ".join([name, label] + [f"{v:.4f}" for v in row]))

# %% [markdown]
# The optimal QP cost sits near zero for many inputs, so the relative gap is
# large even for accurate predictions; the equality columns are the
# informative ones here.
