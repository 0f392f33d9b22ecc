"""Subspace-perturbation scoring toolkit for out-of-distribution detection.

Fits a principal subspace on in-distribution features, confines
stochastic perturbation dynamics to the orthogonal complement, and
scores samples by their accumulated displacement; ships the standard
post-hoc baselines (MSP, energy, Mahalanobis, ReAct variants), detector
metrics (AUROC, AUPR, FPR@95), and a synthetic-data harness.
"""

__version__ = "0.1.0"

from .evaluation import EvalReport, aupr, auroc, fpr_at_tpr, make_report, write_report
from .features import (
    FeatureMatrix,
    LinearHead,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_features,
    save_dataset,
    save_features,
)
from .perturbation import (
    PER_SAMPLE,
    SHARED_SEQUENCE,
    OrthoPerturbation,
    PerturbationConfig,
    ocd_step,
    perturbation_sequence,
    sample_haar_orthogonal,
    sample_perturbation,
)
from .scoring import (
    MahalanobisStats,
    ScoreRecord,
    complement_norm_score,
    energy_score,
    fit_mahalanobis,
    mahalanobis_score,
    msp_score,
    pocs_score,
    pocs_score_with_sequence,
    react_rectify,
    react_threshold,
    score_batch,
)
from .subspace import (
    DEFAULT_POLICY,
    RankPolicy,
    SubspaceModel,
    VarianceDiagnostics,
    explained_variance_at,
    export_diagnostics_csv,
    fit,
    load_model,
    project_complement,
    project_principal,
    save_model,
    variance_diagnostics,
)

__all__ = [
    "EvalReport",
    "FeatureMatrix",
    "LinearHead",
    "MahalanobisStats",
    "OrthoPerturbation",
    "PER_SAMPLE",
    "PerturbationConfig",
    "RankPolicy",
    "DEFAULT_POLICY",
    "SHARED_SEQUENCE",
    "ScoreRecord",
    "SubspaceModel",
    "SyntheticSpec",
    "VarianceDiagnostics",
    "aupr",
    "auroc",
    "complement_norm_score",
    "energy_score",
    "explained_variance_at",
    "export_diagnostics_csv",
    "fit",
    "fit_mahalanobis",
    "fpr_at_tpr",
    "generate_synthetic",
    "load_dataset",
    "load_features",
    "load_model",
    "mahalanobis_score",
    "make_report",
    "msp_score",
    "ocd_step",
    "perturbation_sequence",
    "pocs_score",
    "pocs_score_with_sequence",
    "project_complement",
    "project_principal",
    "react_rectify",
    "react_threshold",
    "sample_haar_orthogonal",
    "sample_perturbation",
    "save_dataset",
    "save_features",
    "save_model",
    "score_batch",
    "variance_diagnostics",
    "write_report",
]
