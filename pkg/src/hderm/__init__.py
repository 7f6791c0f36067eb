"""Exact asymptotics for convex ERM in high-dimensional multi-index models.

Solves the coupled overlap/effective-noise fixed-point system of regularized
multinomial regression (and general exponential families), computes the
predicted Hessian spectral density through a matrix-valued Stieltjes
transform, and validates both against finite-n Monte Carlo experiments.
"""

__version__ = "0.1.0"

from .linmodel import (EffectiveNoise, ExpFamilySpec, MultinomialLoss,
                       OverlapMatrix, QuadraticLoss, build_theta0,
                       gaussian_family, sample_label)
from .prox import (ProxResult, moreau, moreau_grad, moreau_grad_check, prox,
                   prox_batch, prox_jacobian)
from .quadrature import QuadratureRule, gaussian_rule, hermite_rule
from .spectrum import (CurvatureMeasure, MatrixStieltjes, SpectralDensity,
                       f_map, log_potential, marchenko_pastur_density,
                       min_log_potential, solve_stieltjes, spectral_density)
from .asymptotics import (AsymptoticSolution, PredictedObservables, law_nu_opt,
                          m_functional, predicted_observables,
                          predicted_spectrum, s_opt_closed_form, saddle_solve,
                          solve_critical_point)
from .simulator import (ExperimentConfig, TrialMetrics, aggregate,
                        hessian_esd, ingest_features, run_experiment, run_trial)

__all__ = [
    "EffectiveNoise", "ExpFamilySpec", "MultinomialLoss", "OverlapMatrix",
    "QuadraticLoss", "build_theta0", "gaussian_family", "sample_label",
    "ProxResult", "moreau", "moreau_grad", "moreau_grad_check", "prox",
    "prox_batch", "prox_jacobian",
    "QuadratureRule", "gaussian_rule", "hermite_rule",
    "CurvatureMeasure", "MatrixStieltjes", "SpectralDensity", "f_map",
    "log_potential", "marchenko_pastur_density", "min_log_potential",
    "solve_stieltjes", "spectral_density",
    "AsymptoticSolution", "PredictedObservables", "law_nu_opt", "m_functional",
    "predicted_observables", "predicted_spectrum", "s_opt_closed_form",
    "saddle_solve", "solve_critical_point",
    "ExperimentConfig", "TrialMetrics", "aggregate", "hessian_esd",
    "ingest_features", "run_experiment", "run_trial",
]
