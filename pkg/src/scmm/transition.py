"""Token-wise transition head: one dense layer from token embeddings to
row-stochastic L x L matrices."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor
from .nn import DenseLayer, dense_apply


def predict_transition(e_tokens: Tensor | np.ndarray, layer: DenseLayer,
                       n_labels: int) -> Tensor:
    """Map token embeddings (..., d) to transition matrices (..., L, L).

    Each token's L*L scores are reshaped and softmaxed row-wise, so every
    output row is a distribution regardless of parameter values.
    """
    e_tokens = as_tensor(e_tokens)
    lead = e_tokens.shape[:-1]
    flat = e_tokens.reshape(-1, e_tokens.shape[-1])
    scores = dense_apply(layer, flat)
    if scores.shape[-1] != n_labels * n_labels:
        raise ValueError(
            f"transition head emits {scores.shape[-1]} values, need {n_labels ** 2}")
    mats = scores.reshape(*lead, n_labels, n_labels)
    return mats.softmax(axis=-1)


def initial_distribution(n_labels: int, kind: str = "delta") -> np.ndarray:
    """Distribution of the pre-sentence latent state."""
    if kind == "delta":
        p0 = np.zeros(n_labels)
        p0[0] = 1.0
        return p0
    if kind == "uniform":
        return np.full(n_labels, 1.0 / n_labels)
    raise ValueError(f"unknown initial distribution {kind!r}")
