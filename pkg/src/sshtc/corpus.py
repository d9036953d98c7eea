"""Multi-source labeled text: vocabulary, documents, class-disjoint splits.

Corpus files are UTF-8 JSON-lines with string fields ``text``, ``label`` and
``source``. A split manifest is a JSON object mapping each source id to
``{"train": [...], "val": [...], "test": [...]}`` class-id lists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rng import make_rng

PAD, MASK, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[MASK]", "[UNK]")
SPLITS = ("train", "val", "test")
MAX_LEN = 450


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Dense token <-> id map with PAD=0, MASK=1, UNK=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._stoi:
            return self._stoi[token]
        self._stoi[token] = len(self._itos)
        self._itos.append(token)
        return self._stoi[token]

    def lookup(self, token: str, grow: bool = False) -> int:
        if grow:
            return self.add(token)
        return self._stoi.get(token, UNK)

    def encode(self, words: Sequence[str], grow: bool = False) -> tuple[int, ...]:
        return tuple(self.lookup(w, grow) for w in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    def tokens(self) -> list[str]:
        return list(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __len__(self) -> int:
        return len(self._itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        return cls(tokens[len(RESERVED):])


@dataclass(frozen=True)
class Document:
    tokens: tuple[int, ...]
    label_name_tokens: tuple[int, ...]
    source_id: str
    class_id: str

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError("document has no tokens")
        if not self.label_name_tokens:
            raise CorpusError(f"class {self.class_id!r} has an empty label name")
        if len(self.tokens) > MAX_LEN:
            raise CorpusError(f"document longer than {MAX_LEN} tokens")


@dataclass
class SourceDataset:
    source_id: str
    classes: dict[str, list[Document]]
    split: dict[str, str] = field(default_factory=dict)

    def classes_in(self, split: str) -> list[str]:
        return [c for c in self.classes if self.split.get(c) == split]

    def num_documents(self) -> int:
        return sum(len(d) for d in self.classes.values())


@dataclass
class CorpusRegistry:
    sources: dict[str, SourceDataset]
    vocab: Vocab

    def __post_init__(self):
        if not self.sources:
            raise CorpusError("registry needs at least one source")

    def source_ids(self) -> list[str]:
        return list(self.sources)

    def num_documents(self) -> int:
        return sum(s.num_documents() for s in self.sources.values())

    def num_classes(self) -> int:
        return sum(len(s.classes) for s in self.sources.values())

    def manifest(self) -> dict[str, dict[str, list[str]]]:
        return {
            sid: {sp: ds.classes_in(sp) for sp in SPLITS}
            for sid, ds in self.sources.items()
        }


# JSON-lines ------------------------------------------------------------------


def load_jsonl(path, vocab: Vocab, vocab_policy: str = "build", max_len: int = MAX_LEN) -> SourceDataset:
    """Read one source's documents, tokenizing text and label by whitespace.

    ``vocab_policy="build"`` grows ``vocab`` with unseen tokens; ``"reuse"``
    maps them to UNK. Text longer than ``max_len`` is truncated.
    """
    if vocab_policy not in ("build", "reuse"):
        raise ValueError(f"unknown vocab policy {vocab_policy!r}")
    grow = vocab_policy == "build"
    path = Path(path)
    classes: dict[str, list[Document]] = {}
    source_id = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            for key in ("text", "label", "source"):
                if not isinstance(rec.get(key), str) or not rec[key].strip():
                    raise CorpusError(f"{path}:{lineno}: field {key!r} missing or empty")
            if source_id is None:
                source_id = rec["source"]
            elif rec["source"] != source_id:
                raise CorpusError(
                    f"{path}:{lineno}: source {rec['source']!r} differs from {source_id!r}; "
                    "use one file per source"
                )
            label = rec["label"].strip()
            words = tokenize(rec["text"])
            if not words:
                raise CorpusError(f"{path}:{lineno}: field 'text' has no tokens")
            label_words = tokenize(label)
            if len(label_words) >= max_len:
                raise CorpusError(f"{path}:{lineno}: label longer than max_len")
            doc = Document(
                tokens=vocab.encode(words[:max_len], grow),
                label_name_tokens=vocab.encode(label_words, grow),
                source_id=source_id,
                class_id=label,
            )
            classes.setdefault(label, []).append(doc)
    if source_id is None:
        raise CorpusError(f"{path}: empty corpus file")
    return SourceDataset(source_id=source_id, classes=classes)


def dump_jsonl(ds: SourceDataset, vocab: Vocab, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for class_id, docs in ds.classes.items():
            for doc in docs:
                rec = {"text": " ".join(vocab.decode(doc.tokens)), "label": class_id, "source": ds.source_id}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def save_manifest(reg: CorpusRegistry, path) -> None:
    Path(path).write_text(json.dumps(reg.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def apply_manifest(ds: SourceDataset, entry: Mapping[str, Sequence[str]]) -> SourceDataset:
    split: dict[str, str] = {}
    for sp in SPLITS:
        for cid in entry.get(sp, []):
            if cid not in ds.classes:
                raise CorpusError(f"manifest names unknown class {cid!r} in source {ds.source_id!r}")
            if cid in split:
                raise CorpusError(f"class {cid!r} assigned to both {split[cid]} and {sp}")
            split[cid] = sp
    return SourceDataset(ds.source_id, ds.classes, split)


def load_registry(paths: Sequence, manifest_path=None, split_seed: int = 0,
                  fractions=(0.6, 0.2, 0.2), min_classes: int | None = None) -> CorpusRegistry:
    """Load one JSONL file per source into a registry sharing one vocabulary."""
    vocab = Vocab()
    sources: dict[str, SourceDataset] = {}
    for p in paths:
        ds = load_jsonl(p, vocab, "build")
        if ds.source_id in sources:
            raise CorpusError(f"source {ds.source_id!r} appears in more than one file")
        sources[ds.source_id] = ds
    if manifest_path is not None:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        for sid in sources:
            if sid not in manifest:
                raise CorpusError(f"manifest has no entry for source {sid!r}")
            sources[sid] = apply_manifest(sources[sid], manifest[sid])
    else:
        for sid in sources:
            sources[sid] = split_by_class(sources[sid], fractions, split_seed, min_classes)
    return CorpusRegistry(sources, vocab)


# splits ----------------------------------------------------------------------


def split_by_class(ds: SourceDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0,
                   min_classes: int | None = None) -> SourceDataset:
    """Shuffle class ids with ``seed`` and assign contiguous runs to train/val/test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise CorpusError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    ids = sorted(ds.classes)
    n = len(ids)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    counts = (n_train, n_val, n - n_train - n_val)
    if min_classes is not None:
        for sp, c in zip(SPLITS, counts):
            if c < min_classes:
                raise CorpusError(
                    f"source {ds.source_id!r}: {sp} split gets {c} classes, need at least {min_classes}"
                )
    order = make_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    split = {}
    start = 0
    for sp, c in zip(SPLITS, counts):
        for cid in shuffled[start:start + c]:
            split[cid] = sp
        start += c
    return SourceDataset(ds.source_id, ds.classes, split)


# synthetic corpus ------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Block-structured multi-source corpus.

    Each source owns ``vocab_per_source`` topic tokens, partitioned into one
    contiguous sub-block per class. A token of a class document comes from the
    class sub-block with probability ``divergence`` and from the whole source
    block otherwise. Label names are two tokens: a per-source topic word and
    a per-class word, so the pair is unique per class.
    """

    num_sources: int = 3
    classes_per_source: int = 10
    docs_per_class: int = 20
    doc_length: int = 20
    vocab_per_source: int = 60
    divergence: float = 0.8
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        for name in ("num_sources", "classes_per_source", "docs_per_class", "doc_length", "vocab_per_source"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise CorpusError(f"synth.{name} must be a positive integer")
        if not 0.0 <= self.divergence <= 1.0:
            raise CorpusError("synth.divergence must lie in [0, 1]")
        if self.vocab_per_source < self.classes_per_source:
            raise CorpusError("synth.vocab_per_source must be at least synth.classes_per_source")
        if self.doc_length > MAX_LEN:
            raise CorpusError(f"synth.doc_length exceeds {MAX_LEN}")


def synth_source_id(m: int) -> str:
    return f"source{m}"


def synth_generate(spec: SynthSpec, seed: int) -> CorpusRegistry:
    spec.validate()
    rng = make_rng(seed)
    vocab = Vocab()
    M, C, V = spec.num_sources, spec.classes_per_source, spec.vocab_per_source
    sub = V // C
    sources = {}
    for m in range(M):
        block = np.array(vocab.encode([f"s{m}w{k}" for k in range(V)], grow=True))
        topic = vocab.add(f"topic{m}")
        classes: dict[str, list[Document]] = {}
        for c in range(C):
            word = vocab.add(f"s{m}c{c}")
            label_tokens = (topic, word)
            class_id = f"topic{m} s{m}c{c}"
            sub_block = block[c * sub:(c + 1) * sub]
            shape = (spec.docs_per_class, spec.doc_length)
            from_class = rng.random(shape) < spec.divergence
            ids = np.where(
                from_class,
                sub_block[rng.integers(0, len(sub_block), shape)],
                block[rng.integers(0, V, shape)],
            )
            classes[class_id] = [
                Document(tuple(int(t) for t in row), label_tokens, synth_source_id(m), class_id) for row in ids
            ]
        sources[synth_source_id(m)] = SourceDataset(synth_source_id(m), classes)
    for k, sid in enumerate(sources):
        sources[sid] = split_by_class(sources[sid], spec.split, seed * 1000 + k)
    return CorpusRegistry(sources, vocab)
