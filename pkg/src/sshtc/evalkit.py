"""Meta-testing, ablations, structure and N-way sweeps, assignment heatmaps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import CorpusRegistry
from .episodes import SamplingError, eligible_classes, eligible_sources, sample_episode
from .rng import make_rng
from .trainer import Checkpoint, TrainConfig, episode_accuracy, joint_loss, train

DEFAULT_BRANCHINGS = [(5, 1), (15, 1), (2, 2, 1), (3, 2, 1), (5, 3, 1), (5, 4, 1), (5, 5, 1)]

VARIANTS = ("ProtoNet", "ProtoNet+HTC", "SS-HTC")


@dataclass
class EvalReport:
    per_source: dict[str, float]
    overall: float
    tasks_per_source: int
    n_way: int
    k_shot: int
    q_query: int
    seed: int

    def row(self) -> dict:
        out = {"overall": self.overall, "tasks_per_source": self.tasks_per_source,
               "n_way": self.n_way, "k_shot": self.k_shot, "q_query": self.q_query, "seed": self.seed}
        out.update({f"acc[{s}]": a for s, a in self.per_source.items()})
        return out


def summarize(per_source_task_accs: dict[str, Sequence[float]]) -> tuple[dict[str, float], float]:
    """Per-source mean task accuracy, then the unweighted mean across sources."""
    per_source = {s: math.fsum(a) / len(a) for s, a in per_source_task_accs.items() if len(a)}
    overall = math.fsum(per_source.values()) / len(per_source) if per_source else float("nan")
    return per_source, overall


def _source_streams(reg: CorpusRegistry, seed: int):
    return {sid: make_rng(seed, k) for k, sid in enumerate(reg.source_ids())}


def meta_test(ckpt: Checkpoint, reg: CorpusRegistry, n_way: int, k_shot: int, q_query: int,
              tasks_per_source: int = 1000, seed: int = 0, split: str = "test") -> EvalReport:
    """Mean query accuracy over ``tasks_per_source`` tasks drawn from each eligible source."""
    ckpt.check_vocab(reg.vocab)
    sources = eligible_sources(reg, split, n_way, k_shot + q_query)
    if not sources:
        raise SamplingError(f"no source supports {n_way}-way {k_shot}-shot {split} tasks")
    streams = _source_streams(reg, seed)
    accs: dict[str, list[float]] = {}
    for sid in sources:
        rng = streams[sid]
        accs[sid] = [
            episode_accuracy(ckpt.params, sample_episode(reg, split, n_way, k_shot, q_query, rng, sid), ckpt.config)
            for _ in range(tasks_per_source)
        ]
    per_source, overall = summarize(accs)
    return EvalReport(per_source, overall, tasks_per_source, n_way, k_shot, q_query, seed)


@dataclass
class AssignmentHeatmap:
    source_ids: list[str]
    cluster_ids: list[str]
    matrix: np.ndarray  # (sources, level-1 clusters)

    def argmax_columns(self) -> dict[str, int]:
        return {s: int(np.argmax(row)) for s, row in zip(self.source_ids, self.matrix)}

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", *self.cluster_ids])
            for sid, row in zip(self.source_ids, self.matrix):
                w.writerow([sid, *(repr(float(x)) for x in row)])


def heatmap(ckpt: Checkpoint, reg: CorpusRegistry, tasks_per_source: int = 1000, seed: int = 0,
            n_way: int | None = None, k_shot: int | None = None, q_query: int | None = None,
            split: str = "test", trace_path=None) -> AssignmentHeatmap:
    """Average root-to-first-level soft assignment per source.

    Task shape defaults to the checkpoint's N, K, Q. With ``trace_path`` every
    sampled task's full trace is appended there as one JSON line.
    """
    cfg = ckpt.config
    if cfg.branching is None:
        raise ValueError("checkpoint has no clustering tree")
    ckpt.check_vocab(reg.vocab)
    n_way = n_way or cfg.n_way
    k_shot = k_shot or cfg.k_shot
    q_query = q_query or cfg.q_query
    sources = eligible_sources(reg, split, n_way, k_shot + q_query)
    if not sources:
        raise SamplingError(f"no source supports {n_way}-way {k_shot}-shot {split} tasks")
    streams = _source_streams(reg, seed)
    fh = None
    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        fh = Path(trace_path).open("w", encoding="utf-8")
    rows = []
    try:
        for sid in sources:
            total = np.zeros(cfg.branching[0])
            for t in range(tasks_per_source):
                ep = sample_episode(reg, split, n_way, k_shot, q_query, streams[sid], sid)
                with nx.no_grad():
                    rep = joint_loss(ep, ckpt.params, cfg, with_lomlm=False)
                total += rep.trace.assignments[0].value[0]
                if fh is not None:
                    rec = {"source": sid, "task": t, "class_ids": list(ep.class_ids), **rep.trace.to_record(),
                           "gamma": rep.gamma.value.tolist(), "beta": rep.beta.value.tolist()}
                    fh.write(json.dumps(rec) + "\n")
            rows.append(total / tasks_per_source)
    finally:
        if fh is not None:
            fh.close()
    return AssignmentHeatmap(sources, [f"C{i + 1}" for i in range(cfg.branching[0])], np.array(rows))


# experiment tables -----------------------------------------------------------


def variant_configs(base: TrainConfig, branching: tuple[int, ...] | None = None) -> dict[str, TrainConfig]:
    """The three ablation variants sharing every other setting with ``base``."""
    branching = branching or base.branching or (5, 3, 1)
    lam = base.lambda_ if base.lambda_ > 0 else 0.1
    return {
        "ProtoNet": base.replace(branching=None, lambda_=0.0),
        "ProtoNet+HTC": base.replace(branching=branching, lambda_=0.0),
        "SS-HTC": base.replace(branching=branching, lambda_=lam),
    }


def _train_and_test(reg, cfg, tasks_per_source, eval_seed) -> tuple[dict, Checkpoint | None]:
    """Train then meta-test; failures are recorded in the row rather than dropped."""
    row = {}
    try:
        result = train(reg, cfg)
        ckpt = result.best
        rep = meta_test(ckpt, reg, cfg.n_way, cfg.k_shot, cfg.q_query, tasks_per_source, eval_seed)
        row.update(rep.row())
        row["steps"] = result.last.step
        diverged = bool(result.log) and not math.isfinite(result.log[-1]["L"])
        row["status"] = "diverged" if diverged else "ok"
        return row, ckpt
    except (FloatingPointError, ValueError, ArithmeticError) as exc:
        row.update({"overall": float("nan"), "status": f"error: {exc}"})
        return row, None


def ablate(reg: CorpusRegistry, base_cfg: TrainConfig, seeds: Iterable[int] = (0,),
           tasks_per_source: int = 1000, eval_seed: int = 12345) -> list[dict]:
    rows = []
    for seed in seeds:
        for name, cfg in variant_configs(base_cfg.replace(seed=seed)).items():
            row, _ = _train_and_test(reg, cfg, tasks_per_source, eval_seed)
            rows.append({"variant": name, "train_seed": seed, "lambda": cfg.lambda_,
                         "branching": _fmt_branching(cfg.branching), **row})
    return rows


def structure_sweep(reg: CorpusRegistry, cfg: TrainConfig, branchings=None, seeds: Iterable[int] = (0,),
                    tasks_per_source: int = 1000, eval_seed: int = 12345) -> list[dict]:
    rows = []
    for seed in seeds:
        for br in branchings if branchings is not None else DEFAULT_BRANCHINGS:
            run_cfg = cfg.replace(branching=tuple(br), seed=seed)
            row, _ = _train_and_test(reg, run_cfg, tasks_per_source, eval_seed)
            rows.append({"branching": _fmt_branching(run_cfg.branching), "train_seed": seed, **row})
    return rows


def nway_sweep(ckpt: Checkpoint, reg: CorpusRegistry, ways: Sequence[int], k_shot: int | None = None,
               q_query: int | None = None, tasks_per_source: int = 1000, seed: int = 0) -> list[dict]:
    k_shot = k_shot or ckpt.config.k_shot
    q_query = q_query or ckpt.config.q_query
    if ways:
        most = max(len(eligible_classes(reg, "test", s, k_shot + q_query)) for s in reg.source_ids())
        if max(ways) > most:
            raise SamplingError(f"{max(ways)}-way evaluation needs {max(ways)} test classes; the largest source has {most}")
    rows = []
    for n in ways:
        rep = meta_test(ckpt, reg, n, k_shot, q_query, tasks_per_source, seed)
        rows.append({"n_way": n, **rep.row()})
    return rows


def _fmt_branching(b) -> str:
    return "" if b is None else "(" + ",".join(str(x) for x in b) + ")"


def write_table(rows: list[dict], path) -> None:
    """CSV with the union of row keys as columns, in first-seen order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def median_by(rows: list[dict], key: str, value: str = "overall") -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in groups.items()}
