"""Task-conditioned residual feature modulation."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoder import uniform_init
from .numerics import ShapeError, Tensor


def init_modulator(d_h: int, d_task: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "modulate.gamma_w": uniform_init(rng, d_h, d_task),
        "modulate.gamma_b": uniform_init(rng, d_h),
        "modulate.beta_w": uniform_init(rng, d_h, d_task),
        "modulate.beta_b": uniform_init(rng, d_h),
    }


def gamma_beta(P: Mapping[str, Tensor], g_T) -> tuple[Tensor, Tensor]:
    gamma = nx.relu(nx.affine(P["modulate.gamma_w"], g_T, P["modulate.gamma_b"]))
    beta = nx.relu(nx.affine(P["modulate.beta_w"], g_T, P["modulate.beta_b"]))
    return gamma, beta


def transform(h, gamma, beta) -> Tensor:
    """``relu((1 + gamma) * h + beta) + h``; ``h`` may be (d,) or (B, d)."""
    h, gamma, beta = nx.as_tensor(h), nx.as_tensor(gamma), nx.as_tensor(beta)
    if gamma.shape != beta.shape or h.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"transform: h{h.shape}, gamma{gamma.shape}, beta{beta.shape}")
    return nx.relu((1.0 + gamma) * h + beta) + h
