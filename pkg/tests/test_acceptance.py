"""Acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line (printed in the pytest terminal summary
and to stdout) and then asserts the same condition.
"""

import math
import time
from dataclasses import replace as dc_replace

import numpy as np
import pytest

from sshtc import numerics as nx
from sshtc.corpus import SynthSpec, synth_generate
from sshtc.episodes import Episode, sample_episode
from sshtc.evalkit import heatmap, meta_test, variant_configs
from sshtc.htc import assign, init_tree, run_tree, tree_levels, TreeConfig
from sshtc.modulate import transform
from sshtc.numerics import ParameterStore, Tensor
from sshtc.protonet import PrototypeSet, classify
from sshtc.rng import make_rng
from sshtc.trainer import Checkpoint, TrainConfig, init_params, joint_loss, train


def record(verdicts, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    verdicts.append(line)
    print(line)


def learnability_registry():
    return synth_generate(SynthSpec(num_sources=2, classes_per_source=10, docs_per_class=20, divergence=0.8), 0)


# 1 ---------------------------------------------------------------------------------


def test_c1_full_episode_gradient_check(verdicts):
    start = time.perf_counter()
    reg = synth_generate(SynthSpec(num_sources=2, classes_per_source=10, docs_per_class=6,
                                   doc_length=8, vocab_per_source=20), 0)
    cfg = TrainConfig(n_way=2, k_shot=1, q_query=2, dim=4, branching=(2, 1), lambda_=0.1)
    # O(1) parameters so that no gradient is vanishingly small relative to rounding
    rng = np.random.default_rng(0)
    shapes = init_params(cfg, len(reg.vocab)).params
    store = ParameterStore({k: rng.normal(scale=0.5, size=v.shape) for k, v in shapes.items()})
    worst = 0.0
    for s in range(2):
        ep = sample_episode(reg, "train", 2, 1, 2, make_rng(s), source_id=f"source{s}")
        worst = max(worst, nx.finite_diff_check(lambda P: joint_loss(ep, P, cfg).total, store, eps=1e-5))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    record(verdicts, 1, ok, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


# 2 ---------------------------------------------------------------------------------


def test_c2_distributions_and_nearest_prototype(verdicts):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        n, d = int(rng.integers(2, 8)), int(rng.integers(1, 9))
        P = rng.normal(size=(n, d)) * rng.uniform(0.1, 5)
        q = rng.normal(size=d) * rng.uniform(0.1, 5)
        probs = classify(q, PrototypeSet(Tensor(P))).value
        nearest = min(range(n), key=lambda i: math.fsum((q[j] - P[i, j]) ** 2 for j in range(d)))
        bad += not (abs(probs.sum() - 1) <= 1e-9 and np.all(probs >= 0) and int(np.argmax(probs)) == nearest)

        o, o2 = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        G = rng.normal(size=(o, d)) * rng.uniform(0.1, 5)
        C = rng.normal(size=(o2, d)) * rng.uniform(0.1, 5)
        A = assign(G, C, float(rng.uniform(0.1, 4))).value
        bad += not (np.all(np.abs(A.sum(axis=1) - 1) <= 1e-9) and np.all(A >= 0))
    record(verdicts, 2, bad == 0, f"{bad} violations over 1000 classify + 1000 assignment instances")
    assert bad == 0


# 3 ---------------------------------------------------------------------------------


def test_c3_closed_form_values(verdicts):
    checks = {
        "softmax(1,0)": np.max(np.abs(nx.softmax([1.0, 0.0]).value - [0.73106, 0.26894])) <= 1e-5,
        "assign": np.max(np.abs(assign([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 2.0).value
                                - [0.62246, 0.37754])) <= 1e-5,
        "transform": transform([-1.0, 2.0], [0.5, 0.5], [1.0, -3.0]).value.tolist() == [-1.0, 2.0],
        "CE uniform 5": abs(nx.cross_entropy(nx.softmax(np.zeros(5)), 0).item() - math.log(5)) <= 1e-9,
    }
    failed = [k for k, v in checks.items() if not v]
    record(verdicts, 3, not failed, "all four closed-form values match" if not failed else f"mismatch: {failed}")
    assert not failed


# 4 ---------------------------------------------------------------------------------


def test_c4_query_text_cannot_leak(verdicts):
    reg = learnability_registry()
    cfg = TrainConfig(n_way=2, k_shot=1, q_query=5, dim=16, branching=(5, 3, 1))
    rng = np.random.default_rng(4)
    P = {k: rng.normal(size=v.shape) for k, v in init_params(cfg, len(reg.vocab)).params.items()}
    sentinel = reg.vocab.lookup("s0w0")
    changed = 0
    for t in range(50):
        ep = sample_episode(reg, "train", 2, 1, 5, make_rng(4, t))
        swapped = Episode(ep.source_id, ep.class_ids, ep.label_names, ep.support,
                          tuple(tuple(dc_replace(d, tokens=(sentinel,) * (1 + i)) for i, d in enumerate(row))
                                for row in ep.query))
        a, b = joint_loss(ep, P, cfg), joint_loss(swapped, P, cfg)
        same_lm = np.float64(a.lomlm_loss).tobytes() == np.float64(b.lomlm_loss).tobytes()
        same_g = a.trace.g_in.value.tobytes() == b.trace.g_in.value.tobytes()
        changed += not (same_lm and same_g)
    record(verdicts, 4, changed == 0, f"L_lomlm and g_in bitwise identical in {50 - changed}/50 episodes")
    assert changed == 0


# 5 and 9 ---------------------------------------------------------------------------


def _learnability(branching, seeds=range(5)):
    reg = learnability_registry()
    finals, times = [], []
    for seed in seeds:
        start = time.perf_counter()
        res = train(reg, TrainConfig(n_way=2, k_shot=1, max_episodes=500, branching=branching, seed=seed))
        times.append(time.perf_counter() - start)
        finals.append(float(np.mean([r["query_acc"] for r in res.log[-50:]])))
    return finals, times


def test_c5_learnability(verdicts):
    finals, times = _learnability((5, 3, 1))
    passing = sum(f > 0.8 for f in finals)
    ok = passing >= 4 and max(times) < 120
    record(verdicts, 5, ok, f"final-50 train acc {np.round(finals, 3).tolist()}: {passing}/5 > 0.8, "
                            f"slowest seed {max(times):.1f}s (< 120s)")
    assert ok


def test_c9_degenerate_tree(verdicts):
    cfg = TreeConfig((1, 1, 1))
    rng = np.random.default_rng(9)
    exact = True
    for _ in range(100):
        P = {k: rng.normal(size=v.shape) * 3 for k, v in init_tree(cfg, 8, make_rng(0)).items()}
        tr = run_tree(rng.normal(size=8) * 3, tree_levels(P, cfg), cfg)
        exact &= all(a.value.tolist() == [[1.0]] for a in tr.assignments)
    finals, times = _learnability((1, 1, 1))
    passing = sum(f > 0.7 for f in finals)
    ok = exact and passing >= 4 and max(times) < 120
    record(verdicts, 9, ok, f"assignments exactly 1: {exact}; final-50 train acc {np.round(finals, 3).tolist()}, "
                            f"{passing}/5 > 0.7")
    assert ok


# 6 and 7 ---------------------------------------------------------------------------

ABLATION_SEEDS = range(5)
EVAL_SEED = 12345
TEST_TASKS = 200


@pytest.fixture(scope="module")
def ablation():
    """Train the three variants on five shared seeds and meta-test every best checkpoint."""
    reg = synth_generate(SynthSpec(num_sources=3, classes_per_source=20, docs_per_class=20,
                                   vocab_per_source=60, divergence=0.7, split=(0.5, 0.25, 0.25)), 0)
    base = TrainConfig(n_way=5, k_shot=1, q_query=5, max_episodes=1000, val_every=50, val_tasks=100,
                       patience=100, branching=(5, 3, 1), lambda_=0.1)
    start = time.perf_counter()
    accs: dict[str, list[float]] = {}
    ckpts: list[Checkpoint] = []
    for seed in ABLATION_SEEDS:
        for name, cfg in variant_configs(base.replace(seed=seed)).items():
            best = train(reg, cfg).best
            accs.setdefault(name, []).append(meta_test(best, reg, 5, 1, 5, TEST_TASKS, EVAL_SEED).overall)
            if name == "SS-HTC":
                ckpts.append(best)
    return reg, accs, ckpts, time.perf_counter() - start


def test_c6_directional_ablation(verdicts, ablation):
    _, accs, _, elapsed = ablation
    med = {k: float(np.median(v)) for k, v in accs.items()}
    ss, htc, pn = med["SS-HTC"], med["ProtoNet+HTC"], med["ProtoNet"]
    ok = ss >= htc >= pn and (ss - pn) * 100 >= 2 and elapsed < 15 * 60
    record(verdicts, 6, ok, f"median acc SS-HTC {ss:.3f} / ProtoNet+HTC {htc:.3f} / ProtoNet {pn:.3f}, "
                            f"gap {100 * (ss - pn):.1f} pts, {elapsed / 60:.1f} min")
    assert ok


def test_c7_sources_use_distinct_clusters(verdicts, ablation):
    reg, _, ckpts, _ = ablation
    distinct, spread = [], []
    for ckpt in ckpts:
        hm = heatmap(ckpt, reg, tasks_per_source=TEST_TASKS, seed=EVAL_SEED)
        np.testing.assert_allclose(hm.matrix.sum(axis=1), 1.0, atol=1e-9)
        distinct.append(len(set(hm.argmax_columns().values())))
        spread.append(float(np.max(np.abs(hm.matrix - 1.0 / hm.matrix.shape[1]))))
    ok = distinct[0] >= 2
    record(verdicts, 7, ok, f"distinct argmax columns over 3 sources: seed 0 -> {distinct[0]} "
                            f"(all seeds {distinct}); max deviation from uniform {max(spread):.4f}")
    assert ok


# 8 ---------------------------------------------------------------------------------


def test_c8_determinism_and_resume(verdicts, tmp_path):
    reg = learnability_registry()
    cfg = TrainConfig(n_way=2, k_shot=1, max_episodes=100, val_every=20, val_tasks=20, patience=100, seed=8)
    cols = ("step", "L", "L_cls", "L_lomlm", "query_acc", "val_acc")

    def trace(log):
        return [[np.float64(r[c]).tobytes() if r[c] is not None else None for c in cols] for r in log]

    a, b = train(reg, cfg), train(reg, cfg)
    same = trace(a.log) == trace(b.log)
    half = train(reg, cfg.replace(max_episodes=50))
    half.last.save(tmp_path / "mid.npz")
    rest = train(reg, cfg, resume=Checkpoint.load(tmp_path / "mid.npz"))
    resumed = trace(half.log + rest.log) == trace(a.log)
    params = all(a.last.params[k].tobytes() == rest.last.params[k].tobytes() for k in a.last.params)
    ok = same and resumed and params
    record(verdicts, 8, ok, f"repeat run identical: {same}; resumed trace identical: {resumed}; "
                            f"final params identical: {params}")
    assert ok
