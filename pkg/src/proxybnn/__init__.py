"""Bayesian neural network optimization proxies.

Mean-field variational BNNs that map problem inputs to near-optimal
decisions, trained with labeled data and with unlabeled feasibility
stages, plus posterior-based selection and confidence bounds on the error.
"""

from .bounds import (
    MetricsTable,
    PCBReport,
    bernstein_eps_mpv,
    empirical_bernstein_eps,
    hoeffding_eps,
    hypothesis_study,
    metrics,
    mpv,
    pcb_report,
    variance_decomposition,
)
from .posterior import PPM, build_ppm, build_ppms, ppm_mean, ppm_variance, predict, svp_select
from .problems import AcopfProblem, QuadraticProblem, acopf_parse_case, qp_make, qp_solve_oracle
from .sandwich import Schedule, TrainConfig, run_dnn_baseline, run_sandwich, run_supervised, run_trials
from .vi import (
    MeanFieldPosterior,
    MLPSpec,
    PriorSpec,
    default_prior,
    elbo_supervised,
    elbo_unsupervised,
    init_posterior,
    kl_mean_field,
    mlp_forward,
    mlp_spec_for,
)

__version__ = "0.1.0"
