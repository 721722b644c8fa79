# %% [markdown]
# # Confidence bounds on proxy error
#
# Given a trained posterior and M labeled test points, three bounds cap the
# deviation of the mean error from its expectation. Hoeffding needs only
# the error range R, empirical Bernstein adds the sample variance, and the
# third one replaces the sample variance with twice the mean predictive
# variance (MPV), which needs no labels.

# %%
import numpy as np

from proxybnn import Schedule, mlp_spec_for, pcb_report, qp_make, run_sandwich, variance_decomposition
from proxybnn.bounds import bernstein_eps_mpv, empirical_bernstein_eps, hoeffding_eps
from proxybnn.posterior import build_ppms

# %% [markdown]
# ## The closed forms
#
# With R = 1, M = 1000 and 95% confidence:

# %%
print(f"Hoeffding               {hoeffding_eps(1, 1000, 0.05):.6f}")
print(f"empirical Bernstein     {empirical_bernstein_eps(0.01, 1, 1000, 0.05):.6f}  (v_hat = 0.01)")
print(f"Bernstein with 2 x MPV  {bernstein_eps_mpv(0.005, 1, 1000, 0.05):.6f}  (MPV = 0.005)")

# %% [markdown]
# The empirical Bernstein range term, 3R ln(3/delta)/M, decays as 1/M and
# only undercuts Hoeffding once M is large enough:

# %%
for M in (100, 1000, 10_000):
    print(M, [round(empirical_bernstein_eps(0.0, 1, M, d) / hoeffding_eps(1, M, d), 3)
              for d in (0.01, 0.05, 0.1)])

# %% [markdown]
# ## A report for a trained model

# %%
problem = qp_make(8, 2, 0)
spec = mlp_spec_for(problem)
X = problem.sample_inputs(64, [0, 1])
q, _ = run_sandwich(problem, (X, problem.solve(X)), problem.sample_inputs(256, [0, 2]), spec,
                    Schedule(3000, 1000, mode="steps"), seed=0)
X_test = problem.sample_inputs(1000, 7)
Y_test = problem.solve(X_test)
report = pcb_report(problem, q, spec, X_test, Y_test, H=100)
print(report.to_csv())

# %% [markdown]
# ## Where the error variance comes from
#
# Splitting the signed errors of one output variable into the spread across
# posterior samples and the spread of the posterior-mean error across inputs
# shows why the MPV substitute is optimistic for this model: the second part
# dominates.

# %%
ppms, _ = build_ppms(q, spec, X_test, 100, 0)
errors = Y_test[:, 0, None] - ppms[:, 0, :]
d = variance_decomposition(errors)
print(f"total {d.total:.5f} = within {d.within_posterior:.5f} + between {d.between_inputs:.5f}")
print(f"2 x MPV = {2 * d.mpv:.5f}")
