"""Selective gradient encryption guided by significance metrics, and the
gradient-inversion attack used to evaluate it."""

from .attack import AttackConfig, AttackInfeasible, ReconstructionResult, invert
from .encryption import AttackerView, EncryptionMask, attacker_view, top_s_mask
from .evalmetrics import QualityReport, quality
from .models import FlatGradient, ModelSpec, ParamVector, build, get_spec, loss_and_grad
from .significance import SignificanceScores, compute

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackInfeasible",
    "AttackerView",
    "EncryptionMask",
    "FlatGradient",
    "ModelSpec",
    "ParamVector",
    "QualityReport",
    "ReconstructionResult",
    "SignificanceScores",
    "attacker_view",
    "build",
    "compute",
    "get_spec",
    "invert",
    "loss_and_grad",
    "quality",
    "top_s_mask",
]
