"""N-way K-shot episode sampling where every task comes from one source."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusRegistry, Document
from .rng import make_rng


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    source_id: str
    class_ids: tuple[str, ...]
    label_names: tuple[tuple[int, ...], ...]
    support: tuple[tuple[Document, ...], ...]  # N x K
    query: tuple[tuple[Document, ...], ...]  # N x Q

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    def query_docs(self) -> list[tuple[Document, int]]:
        """Flattened (document, class position) pairs in class-major order."""
        return [(d, i) for i, row in enumerate(self.query) for d in row]

    def validate(self) -> None:
        if len(set(self.class_ids)) != len(self.class_ids):
            raise SamplingError("duplicate classes in episode")
        seen_support = {id(d) for row in self.support for d in row}
        for i, cid in enumerate(self.class_ids):
            for d in (*self.support[i], *self.query[i]):
                if d.source_id != self.source_id or d.class_id != cid:
                    raise SamplingError("document does not belong to its episode slot")
        if any(id(d) in seen_support for row in self.query for d in row):
            raise SamplingError("document in both support and query")


def eligible_classes(reg: CorpusRegistry, split: str, source_id: str, per_class: int) -> list[str]:
    ds = reg.sources[source_id]
    return [c for c in ds.classes_in(split) if len(ds.classes[c]) >= per_class]


def eligible_sources(reg: CorpusRegistry, split: str, n_way: int, per_class: int) -> list[str]:
    return [s for s in reg.sources if len(eligible_classes(reg, split, s, per_class)) >= n_way]


def sample_episode(reg: CorpusRegistry, split: str, n_way: int, k_shot: int, q_query: int,
                   rng: np.random.Generator, source_id: str | None = None) -> Episode:
    """Pick a source uniformly, then ``n_way`` classes, then ``k_shot + q_query`` docs each.

    All draws are without replacement. Passing ``source_id`` pins the source.
    """
    if n_way < 1 or k_shot < 1 or q_query < 1:
        raise SamplingError("n_way, k_shot and q_query must be positive")
    per_class = k_shot + q_query
    if source_id is None:
        sources = eligible_sources(reg, split, n_way, per_class)
        if not sources:
            raise SamplingError(
                f"no source has {n_way} {split} classes with at least {per_class} documents each"
            )
        source_id = sources[int(rng.integers(len(sources)))]
    classes = eligible_classes(reg, split, source_id, per_class)
    if len(classes) < n_way:
        raise SamplingError(f"source {source_id!r} has only {len(classes)} eligible {split} classes")
    picked = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    ds = reg.sources[source_id]
    support, query, labels = [], [], []
    for cid in picked:
        docs = ds.classes[cid]
        idx = rng.choice(len(docs), size=per_class, replace=False)
        support.append(tuple(docs[i] for i in idx[:k_shot]))
        query.append(tuple(docs[i] for i in idx[k_shot:]))
        labels.append(docs[0].label_name_tokens)
    return Episode(source_id, tuple(picked), tuple(labels), tuple(support), tuple(query))


def episode_stream(reg: CorpusRegistry, split: str, n_way: int, k_shot: int, q_query: int,
                   count: int, seed: int, source_id: str | None = None) -> list[Episode]:
    rng = make_rng(seed)
    return [sample_episode(reg, split, n_way, k_shot, q_query, rng, source_id) for _ in range(count)]
