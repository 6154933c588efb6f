"""Membership detectors and the boosted (interrogate-then-detect) attack."""

from ..defense import Obfuscation, obfuscate_trace
from .attack import TEST, VALIDATION, ScoreTable, ScoreTableError, leakboost_attack, leakboost_scores
from .base import Detector, grad_feature, per_sample_param_grads
from .glir import GlirDetector, GlirModel, SingularCovariance, glir_fit, glir_fit_features, glir_score, glir_score_chi2
from .ia import IaDetector, MetaClassifier, MetaConfig, ShadowData, ia_component, ia_features, ia_fit, ia_score
from .sif import SIF_SENTINEL, SifDetector, SifSpec, lissa_cg_solve, sif_score, sif_scores
from .simple import LaeqDetector, LaeqSpec, LossDetector, laeq_score, laeq_scores, laeq_sentinel, loss_score

DETECTOR_NAMES = ("GLiR", "loss", "LAEQ", "SIF", "IA")

__all__ = [
    "DETECTOR_NAMES", "Detector", "GlirDetector", "GlirModel", "IaDetector", "LaeqDetector", "LaeqSpec",
    "LossDetector", "MetaClassifier", "MetaConfig", "Obfuscation", "SIF_SENTINEL", "ScoreTable",
    "ScoreTableError", "ShadowData", "SifDetector", "SifSpec", "SingularCovariance", "TEST", "VALIDATION",
    "glir_fit", "glir_fit_features", "glir_score", "glir_score_chi2", "grad_feature", "ia_component",
    "ia_features", "ia_fit", "ia_score", "laeq_score", "laeq_scores", "laeq_sentinel", "leakboost_attack",
    "leakboost_scores", "lissa_cg_solve", "loss_score", "obfuscate_trace", "per_sample_param_grads",
    "sif_score", "sif_scores",
]
