"""Federated learning simulator with coded (Gold / constant-weight) dropout masks."""

from .codegen import CodeStrategy, MaskMatrix, build_mask_matrix, cwc_generate, gold_family, preferred_pair
from .fedcore import FederatedSession, Mode, RoundConfig, ServerOptimizerState
from .lradapt import AdaptationConfig, run_adaptation
from .nn import ModelSpec

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "CodeStrategy", "FederatedSession", "MaskMatrix", "Mode", "ModelSpec", "RoundConfig",
    "ServerOptimizerState", "build_mask_matrix", "cwc_generate", "gold_family", "preferred_pair", "run_adaptation",
]
