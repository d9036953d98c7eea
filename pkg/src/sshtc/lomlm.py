"""Label-oriented masked language modeling over support samples.

Each support text is extended with its class's label-name tokens; all label
tokens are masked and must be recovered from the rest. The same augmented
(unmasked) samples, pooled, give the task embedding. Nothing here accepts
query documents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import MASK, MAX_LEN, Document
from .encoder import encode_batch, mlm_head
from .numerics import Tensor


@dataclass(frozen=True)
class AugmentedSample:
    tokens: tuple[int, ...]  # [x ; label tokens], unmasked
    mask_positions: tuple[int, ...]
    target_ids: tuple[int, ...]

    def masked(self) -> tuple[int, ...]:
        toks = list(self.tokens)
        for p in self.mask_positions:
            toks[p] = MASK
        return tuple(toks)


def augment(doc: Document, max_len: int = MAX_LEN) -> AugmentedSample:
    """Append label tokens, truncating the text (never the label) to fit ``max_len``."""
    label = tuple(doc.label_name_tokens)
    if len(label) >= max_len:
        raise ValueError(f"label of {len(label)} tokens leaves no room for text under max_len={max_len}")
    text = tuple(doc.tokens[: max_len - len(label)])
    start = len(text)
    return AugmentedSample(text + label, tuple(range(start, start + len(label))), label)


def _flatten(support: Sequence[Sequence[Document]]) -> list[Document]:
    return [d for row in support for d in row]


def lomlm_loss(P: Mapping[str, Tensor], support: Sequence[Sequence[Document]]) -> Tensor:
    """Summed negative log-likelihood of every masked label token."""
    samples = [augment(d) for d in _flatten(support)]
    ctx = encode_batch(P, [s.masked() for s in samples])
    logp = nx.log_softmax(mlm_head(P, ctx), axis=-1)
    rows = np.repeat(np.arange(len(samples)), [len(s.target_ids) for s in samples])
    cols = np.concatenate([s.target_ids for s in samples]).astype(int)
    return -nx.tsum(logp[rows, cols])


def augmented_embeddings(P: Mapping[str, Tensor], support: Sequence[Sequence[Document]]) -> Tensor:
    """(N*K, d_h) encodings of the unmasked augmented support samples, class-major."""
    return encode_batch(P, [augment(d).tokens for d in _flatten(support)])


def task_embedding(P: Mapping[str, Tensor], support: Sequence[Sequence[Document]],
                   embeddings: Tensor | None = None) -> Tensor:
    """Mean of the augmented support embeddings (pass ``embeddings`` to reuse them)."""
    if embeddings is None:
        embeddings = augmented_embeddings(P, support)
    return nx.tmean(embeddings, axis=0)
