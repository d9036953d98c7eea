"""Bag-of-embeddings sentence encoder with a masked-LM output head.

``encode(tokens) = tanh(W_proj @ mean(E[t] for non-PAD t) + b_proj)``. The
encoder is order-invariant, so every masked position in a sequence shares
one context vector and therefore one row of MLM logits.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import MASK, PAD
from .numerics import Tensor

INIT_SCALE = 0.01


def uniform_init(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def init_encoder(vocab_size: int, d_emb: int, d_h: int, rng: np.random.Generator,
                 tie_mlm: bool = False) -> dict[str, np.ndarray]:
    params = {
        "encoder.embedding": uniform_init(rng, vocab_size, d_emb),
        "encoder.proj_w": uniform_init(rng, d_h, d_emb),
        "encoder.proj_b": uniform_init(rng, d_h),
        "encoder.mlm_b": uniform_init(rng, vocab_size),
    }
    if tie_mlm:
        if d_emb != d_h:
            raise ValueError("tied MLM head needs d_emb == d_h")
    else:
        params["encoder.mlm_w"] = uniform_init(rng, vocab_size, d_h)
    return params


def bag_matrix(seqs: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row b holds 1/count_b at every non-PAD token of sequence b."""
    A = np.zeros((len(seqs), vocab_size))
    for b, seq in enumerate(seqs):
        ids = [t for t in seq if t != PAD]
        if not ids:
            raise ValueError(f"sequence {b} has no non-PAD tokens")
        if min(ids) < 0 or max(ids) >= vocab_size:
            raise IndexError(f"sequence {b} has a token id outside [0, {vocab_size})")
        np.add.at(A[b], ids, 1.0 / len(ids))
    return A


def encode_batch(P: Mapping[str, Tensor], seqs: Sequence[Sequence[int]]) -> Tensor:
    """Encode each sequence; returns a (len(seqs), d_h) tensor."""
    E = nx.as_tensor(P["encoder.embedding"])
    pooled = nx.matmul(bag_matrix(seqs, E.shape[0]), E)
    return nx.tanh(nx.affine(P["encoder.proj_w"], pooled, P["encoder.proj_b"]))


def encode(P: Mapping[str, Tensor], tokens: Sequence[int]) -> Tensor:
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty sequence")
    return encode_batch(P, [tokens])[0]


def mlm_head(P: Mapping[str, Tensor], ctx: Tensor) -> Tensor:
    """Vocabulary logits for context vectors ``ctx`` of shape (d_h,) or (B, d_h)."""
    W = P["encoder.mlm_w"] if "encoder.mlm_w" in P else P["encoder.embedding"]
    return nx.affine(W, ctx, P["encoder.mlm_b"])


def mlm_logits(P: Mapping[str, Tensor], tokens: Sequence[int]) -> Tensor:
    """(|P|, |V|) logits, one row per MASK position in ``tokens``."""
    positions = [i for i, t in enumerate(tokens) if t == MASK]
    if not positions:
        raise ValueError("no MASK token in sequence")
    row = mlm_head(P, encode(P, tokens))
    return nx.stack([row] * len(positions))
