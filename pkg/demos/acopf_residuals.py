# %% [markdown]
# # AC power flow residuals on a small case
#
# No optimization solver ships with the package, so ACOPF labels come from
# elsewhere. The residual code is still fully usable: here we write a
# three-bus case, pick a voltage profile, balance it with generator set
# points, and confirm that every power-balance residual vanishes.

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from proxybnn import AcopfProblem, acopf_parse_case

case_doc = {
    "name": "demo3",
    "buses": [
        {"id": 1, "v_l": 0.94, "v_u": 1.06, "ref": True},
        {"id": 2, "v_l": 0.94, "v_u": 1.06},
        {"id": 3, "v_l": 0.94, "v_u": 1.06},
    ],
    "generators": [
        {"bus": b, "pg_l": -10.0, "pg_u": 10.0, "qg_l": -10.0, "qg_u": 10.0,
         "c2": 0.11, "c1": 5.0, "c0": 150.0} for b in (1, 2, 3)
    ],
    "loads": [{"bus": 2, "pd": 0.9, "qd": 0.3}, {"bus": 3, "pd": 1.2, "qd": 0.4}],
    "shunts": [],
    "branches": [
        {"from_bus": 1, "to_bus": 2, "g": 5.0, "b": -15.0, "s_u": 5.0},
        {"from_bus": 1, "to_bus": 3, "g": 1.25, "b": -3.75, "s_u": 5.0},
        {"from_bus": 2, "to_bus": 3, "g": 1.67, "b": -5.0},
    ],
}
path = Path(tempfile.mkdtemp()) / "demo3.json"
path.write_text(json.dumps(case_doc))
problem = AcopfProblem(acopf_parse_case(path))
print(problem.input_dim, "inputs,", problem.output_dim, "outputs,", problem.n_eq, "equalities")

# %% [markdown]
# Injections needed at each bus follow from the branch flows. With one
# generator per bus, setting each generator to its bus's net outflow plus
# demand balances the system exactly.

# %%
vm = np.array([[1.02, 0.99, 0.98]])
va = np.array([[0.0, -0.03, -0.05]])
x = problem.sample_inputs(1, 0)
zeros = np.zeros((1, 3))
p_fr, q_fr, p_to, q_to = problem.branch_flows(problem.pack(zeros, zeros, vm, va))
pd, qd = problem.demand(x)
pg, qg = pd.copy(), qd.copy()
for e, br in enumerate(case_doc["branches"]):
    i, j = br["from_bus"] - 1, br["to_bus"] - 1
    pg[0, i] += p_fr[0, e]
    qg[0, i] += q_fr[0, e]
    pg[0, j] += p_to[0, e]
    qg[0, j] += q_to[0, e]
y = problem.pack(pg, qg, vm, va)
print("max |equality residual|:", np.abs(problem.eq_residuals(x, y)).max())
print("largest inequality residual:", problem.ineq_residuals(x, y).max())
print("generation cost:", problem.cost(x, y)[0])
