"""
Weight decay as an explicit shrink applied after each optimizer step.

Scale/shift parameters decay toward (gamma_target, 0); ordinary weights decay
toward 0 by the factor (1 - delta).
"""

from typing import Dict

import numpy as np

from layers import NormParams
from models import WeightDecayConfig


def decay_step(params: NormParams, cfg: WeightDecayConfig) -> NormParams:
    """gamma <- gamma - delta*(gamma - target); beta <- (1 - delta)*beta."""
    if not cfg.apply_to_norm_params:
        return params
    gamma = params.gamma - cfg.delta * (params.gamma - cfg.gamma_target)
    beta = (1.0 - cfg.delta) * params.beta
    return NormParams(gamma, beta, params.epsilon)


def decay_weights(weights: Dict[str, np.ndarray], cfg: WeightDecayConfig) -> Dict[str, np.ndarray]:
    """Multiply every weight array by (1 - delta)."""
    if not cfg.apply_to_weights:
        return weights
    return {name: (1.0 - cfg.delta) * w for name, w in weights.items()}


def distance_to_target(params: NormParams, cfg: WeightDecayConfig) -> float:
    """Euclidean distance of (gamma, beta) from (gamma_target, 0)."""
    return float(np.sqrt(np.sum((params.gamma - cfg.gamma_target) ** 2) + np.sum(params.beta ** 2)))
