"""Prototypical classification by softmax over negative distances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

DISTANCE_MODES = ("plain", "squared")


@dataclass
class PrototypeSet:
    prototypes: Tensor  # (N, d)
    class_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.prototypes.shape[0]


def prototypes(support_embs, class_ids: Sequence[str] = ()) -> PrototypeSet:
    """Class means of an (N, K, d) array, or of a list of N lists of K vectors."""
    if isinstance(support_embs, Tensor) or isinstance(support_embs, np.ndarray):
        embs = nx.as_tensor(support_embs)
        if embs.ndim != 3:
            raise ShapeError(f"expected (N, K, d) support embeddings, got {embs.shape}")
    else:
        lengths = {len(row) for row in support_embs}
        if len(lengths) != 1 or 0 in lengths:
            raise ShapeError("ragged support embeddings")
        embs = nx.stack([nx.stack(list(row)) for row in support_embs])
    return PrototypeSet(nx.tmean(embs, axis=1), tuple(class_ids))


def distances(queries, protos: PrototypeSet, distance_mode: str = "plain") -> Tensor:
    """(Q, N) distances from each query row to each prototype."""
    if distance_mode not in DISTANCE_MODES:
        raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")
    q = nx.as_tensor(queries)
    if q.ndim == 1:
        q = nx.reshape(q, (1, q.shape[0]))
    if q.shape[1] != protos.prototypes.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != prototype width {protos.prototypes.shape[1]}")
    sq = nx.pairwise_sq_dist(q, protos.prototypes)
    return sq if distance_mode == "squared" else nx.safe_sqrt(sq)


def classify(query_emb, protos: PrototypeSet, distance_mode: str = "plain") -> Tensor:
    """Class distribution(s) for a (d,) query or a (Q, d) batch."""
    probs = nx.softmax(-distances(query_emb, protos, distance_mode), axis=-1)
    return probs[0] if nx.as_tensor(query_emb).ndim == 1 else probs


def cls_loss(query_embs, labels: Sequence[int], protos: PrototypeSet,
             distance_mode: str = "plain", reduction: str = "sum") -> Tensor:
    """Cross-entropy of the query batch against class positions ``labels``."""
    labels = np.asarray(labels, dtype=int)
    n = len(protos)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"query label outside 0..{n - 1}")
    logp = nx.log_softmax(-distances(query_embs, protos, distance_mode), axis=-1)
    nll = -nx.tsum(logp[np.arange(len(labels)), labels])
    if reduction == "mean":
        return nll / len(labels)
    if reduction != "sum":
        raise ValueError("reduction must be 'sum' or 'mean'")
    return nll
