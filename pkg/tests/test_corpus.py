import json

import numpy as np
import pytest

from sshtc.corpus import (
    MASK,
    MAX_LEN,
    PAD,
    UNK,
    CorpusError,
    SourceDataset,
    SynthSpec,
    Vocab,
    apply_manifest,
    dump_jsonl,
    load_jsonl,
    load_registry,
    save_manifest,
    split_by_class,
    synth_generate,
)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_reserved_ids():
    v = Vocab(["hello"])
    assert (PAD, MASK, UNK) == (0, 1, 2)
    assert v.lookup("hello") == 3
    assert v.lookup("unseen") == UNK
    assert len(v) == 4


def test_load_jsonl_multiword_label(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [
        {"text": "great acoustic guitar", "label": "musical instruments", "source": "amazon"}])
    vocab = Vocab()
    ds = load_jsonl(p, vocab)
    (doc,) = ds.classes["musical instruments"]
    assert len(doc.tokens) == 3 and len(doc.label_name_tokens) == 2
    assert vocab.decode(doc.label_name_tokens) == ["musical", "instruments"]
    assert ds.source_id == "amazon"


def test_load_jsonl_rejects_empty_text_with_line_number(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [
        {"text": "ok text", "label": "x", "source": "s"},
        {"text": "", "label": "x", "source": "s"}])
    with pytest.raises(CorpusError, match=r":2:"):
        load_jsonl(p, Vocab())


def test_load_jsonl_malformed_and_empty(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"text": "a", "label": "b", "source": "c"}\nnot json\n')
    with pytest.raises(CorpusError, match=r":2:"):
        load_jsonl(bad, Vocab())
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(CorpusError, match="empty"):
        load_jsonl(empty, Vocab())


def test_shared_label_groups_documents(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [
        {"text": "one", "label": "books", "source": "s"},
        {"text": "two", "label": "books", "source": "s"}])
    ds = load_jsonl(p, Vocab())
    assert list(ds.classes) == ["books"]
    assert len(ds.classes["books"]) == 2


def test_reuse_policy_maps_unknown_to_unk(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [{"text": "brand new words", "label": "fresh", "source": "s"}])
    vocab = Vocab(["words"])
    ds = load_jsonl(p, vocab, "reuse")
    doc = ds.classes["fresh"][0]
    assert doc.tokens == (UNK, UNK, vocab.lookup("words"))
    assert doc.label_name_tokens == (UNK,)
    assert len(vocab) == 4


def test_long_text_truncated(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", [{"text": " ".join(["w"] * 500), "label": "l", "source": "s"}])
    assert len(load_jsonl(p, Vocab()).classes["l"][0].tokens) == MAX_LEN


def _ds(n_classes):
    from sshtc.corpus import Document
    return SourceDataset("s", {f"c{i}": [Document((3,), (4,), "s", f"c{i}")] for i in range(n_classes)})


def test_split_by_class_counts_and_determinism():
    a = split_by_class(_ds(10), (0.6, 0.2, 0.2), seed=3)
    assert [len(a.classes_in(s)) for s in ("train", "val", "test")] == [6, 2, 2]
    b = split_by_class(_ds(10), (0.6, 0.2, 0.2), seed=3)
    assert a.split == b.split
    assert set(a.classes_in("train")).isdisjoint(a.classes_in("test"))


def test_split_by_class_too_few_classes():
    with pytest.raises(CorpusError, match="need at least 5"):
        split_by_class(_ds(4), (0.6, 0.2, 0.2), seed=0, min_classes=5)


def test_split_fractions_validated():
    with pytest.raises(CorpusError):
        split_by_class(_ds(4), (0.5, 0.2, 0.2), seed=0)


def test_synth_counts_and_determinism():
    spec = SynthSpec(num_sources=3, classes_per_source=10, docs_per_class=20)
    reg = synth_generate(spec, 7)
    assert reg.num_documents() == 600
    assert reg.num_classes() == 30
    again = synth_generate(spec, 7)
    for sid in reg.sources:
        assert reg.sources[sid] == again.sources[sid]
    assert reg.vocab == again.vocab


def test_synth_zero_divergence_uses_only_source_block():
    reg = synth_generate(SynthSpec(num_sources=2, classes_per_source=4, docs_per_class=30,
                                   doc_length=30, vocab_per_source=8, divergence=0.0), 1)
    for sid, ds in reg.sources.items():
        counts = []
        for docs in ds.classes.values():
            toks = np.concatenate([d.tokens for d in docs])
            counts.append(np.bincount(toks, minlength=len(reg.vocab)))
        counts = np.array(counts, dtype=float)
        # with delta=0 every class is a draw from the same source-block distribution
        freqs = counts / counts.sum(axis=1, keepdims=True)
        support = freqs.sum(axis=0) > 0
        assert support.sum() == 8
        assert np.max(np.abs(freqs - freqs.mean(axis=0))) < 0.08


def test_synth_sources_use_disjoint_token_blocks():
    reg = synth_generate(SynthSpec(num_sources=3, classes_per_source=5, docs_per_class=5), 2)
    used = {sid: {t for docs in ds.classes.values() for d in docs for t in d.tokens}
            for sid, ds in reg.sources.items()}
    ids = list(used)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            assert used[ids[i]].isdisjoint(used[ids[j]])


def test_synth_labels_unique_per_class_and_in_vocab():
    reg = synth_generate(SynthSpec(num_sources=2, classes_per_source=6, docs_per_class=3), 0)
    labels = [docs[0].label_name_tokens for ds in reg.sources.values() for docs in ds.classes.values()]
    assert len(set(labels)) == len(labels)
    assert all(len(l) == 2 and all(0 <= t < len(reg.vocab) for t in l) for l in labels)


def test_synth_spec_validation():
    with pytest.raises(CorpusError):
        synth_generate(SynthSpec(divergence=1.5), 0)
    with pytest.raises(CorpusError):
        synth_generate(SynthSpec(classes_per_source=10, vocab_per_source=5), 0)


def test_class_disjoint_splits_in_synth():
    reg = synth_generate(SynthSpec(num_sources=3, classes_per_source=10), 4)
    for ds in reg.sources.values():
        parts = [set(ds.classes_in(s)) for s in ("train", "val", "test")]
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
        assert set().union(*parts) == set(ds.classes)


def test_dump_reload_round_trip(tmp_path):
    reg = synth_generate(SynthSpec(num_sources=2, classes_per_source=5, docs_per_class=4), 3)
    paths = []
    for sid, ds in reg.sources.items():
        p = tmp_path / f"{sid}.jsonl"
        dump_jsonl(ds, reg.vocab, p)
        paths.append(p)
        again = load_jsonl(p, reg.vocab, "reuse")
        assert again.classes == ds.classes
    save_manifest(reg, tmp_path / "manifest.json")
    reloaded = load_registry(paths, tmp_path / "manifest.json")
    for sid, ds in reg.sources.items():
        assert reloaded.sources[sid].split == ds.split
        assert {c: [reloaded.vocab.decode(d.tokens) for d in docs] for c, docs in reloaded.sources[sid].classes.items()} \
            == {c: [reg.vocab.decode(d.tokens) for d in docs] for c, docs in ds.classes.items()}


def test_manifest_rejects_overlap():
    ds = _ds(3)
    with pytest.raises(CorpusError, match="both"):
        apply_manifest(ds, {"train": ["c0", "c1"], "test": ["c1"]})
    with pytest.raises(CorpusError, match="unknown"):
        apply_manifest(ds, {"train": ["zzz"]})
