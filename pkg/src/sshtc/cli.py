"""``sshtc`` command line: synth, train, eval, heatmap, ablate, sweep.

Every command reads one JSON config, applies ``--seed``/``--out``/``--override``
on top, validates, and writes its artifacts plus ``run_manifest.json`` into
the output directory. Exit codes: 0 success, 1 usage or config error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import __version__
from .corpus import CorpusError, CorpusRegistry, SynthSpec, dump_jsonl, load_registry, save_manifest, synth_generate
from .episodes import SamplingError
from .evalkit import DEFAULT_BRANCHINGS, ablate, heatmap, meta_test, nway_sweep, structure_sweep, write_table
from .trainer import Checkpoint, ConfigError, TrainConfig, train

log = logging.getLogger("sshtc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

TOP_KEYS = {"seed", "out", "synth", "corpus", "train", "eval"}
CORPUS_KEYS = {"paths", "manifest", "split", "split_seed"}


@dataclass
class EvalSettings:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    tasks_per_source: int = 1000
    seed: int = 0
    ways: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    branchings: list[list[int]] = field(default_factory=lambda: [list(b) for b in DEFAULT_BRANCHINGS])
    seeds: list[int] = field(default_factory=lambda: [0])
    heatmap_k_shot: int | None = None
    dump_traces: bool = False


@dataclass
class RunConfig:
    seed: int
    out: str
    train: TrainConfig
    eval: EvalSettings
    synth: SynthSpec | None = None
    synth_seed: int | None = None
    corpus: dict | None = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"seed": self.seed, "out": self.out}
        if self.synth is not None:
            d["synth"] = {**asdict(self.synth), "split": list(self.synth.split), "seed": self.synth_seed}
        if self.corpus is not None:
            d["corpus"] = self.corpus
        train_d = self.train.to_dict()
        train_d.pop("seed")
        d["train"] = train_d
        d["eval"] = asdict(self.eval)
        return d


def _reject_unknown(section: str, got: dict, allowed) -> None:
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw config document before any work is done."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("", raw, TOP_KEYS)
    if "seed" not in raw:
        raise ConfigError("missing required field 'seed'")
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("'seed' must be a nonnegative integer")
    seed = raw["seed"]
    if ("synth" in raw) == ("corpus" in raw):
        raise ConfigError("config needs exactly one of 'synth' or 'corpus'")

    synth = synth_seed = corpus = None
    if "synth" in raw:
        s = dict(raw["synth"])
        _reject_unknown("synth", s, {f.name for f in fields(SynthSpec)} | {"seed"})
        synth_seed = s.pop("seed", None)
        synth_seed = seed if synth_seed is None else synth_seed
        if "split" in s:
            s["split"] = tuple(s["split"])
        try:
            synth = SynthSpec(**s)
            synth.validate()
        except TypeError as exc:
            raise ConfigError(f"synth: {exc}") from None
        except CorpusError as exc:
            raise ConfigError(str(exc)) from None
    else:
        corpus = dict(raw["corpus"])
        _reject_unknown("corpus", corpus, CORPUS_KEYS)
        if not corpus.get("paths"):
            raise ConfigError("missing required field 'corpus.paths'")

    train_raw = dict(raw.get("train", {}))
    if "seed" in train_raw:
        raise ConfigError("train.seed is not allowed; set the top-level 'seed'")
    try:
        train_cfg = TrainConfig.from_dict({**train_raw, "seed": seed})
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None

    eval_raw = dict(raw.get("eval", {}))
    _reject_unknown("eval", eval_raw, {f.name for f in fields(EvalSettings)})
    ev = EvalSettings(**eval_raw)
    for br in ev.branchings:
        TrainConfig(branching=tuple(br))  # raises ConfigError on malformed entries

    return RunConfig(seed=seed, out=str(raw.get("out", "runs/default")), train=train_cfg, eval=ev,
                     synth=synth, synth_seed=synth_seed, corpus=corpus)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set dotted ``KEY=VALUE`` pairs; values are parsed as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return raw


def load_config(args) -> tuple[RunConfig, dict]:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    cfg = parse_config(apply_overrides(raw, overrides))
    return cfg, {"config_path": str(path), "overrides": overrides}


def build_registry(cfg: RunConfig) -> CorpusRegistry:
    if cfg.synth is not None:
        return synth_generate(cfg.synth, cfg.synth_seed)
    c = cfg.corpus
    return load_registry(
        c["paths"],
        c.get("manifest"),
        split_seed=c.get("split_seed", cfg.seed),
        fractions=tuple(c.get("split", (0.6, 0.2, 0.2))),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, meta: dict, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        **meta,
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_checkpoint(args, cfg: RunConfig, default: Path) -> Checkpoint:
    path = Path(args.checkpoint) if args.checkpoint else default
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = Checkpoint.load(path)
    ckpt.check_compatible(cfg.train)
    return ckpt


# commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, meta = load_config(args)
    if cfg.synth is None:
        raise ConfigError("synth command needs a 'synth' section")
    out = Path(cfg.out)
    reg = synth_generate(cfg.synth, cfg.synth_seed)
    corpus_dir = out / "corpus"
    artifacts = []
    for sid, ds in reg.sources.items():
        p = corpus_dir / f"{sid}.jsonl"
        dump_jsonl(ds, reg.vocab, p)
        artifacts.append(p)
    mp = corpus_dir / "manifest.json"
    save_manifest(reg, mp)
    artifacts.append(mp)
    write_manifest(out, "synth", cfg, meta, artifacts)
    log.info("wrote %d sources, %d documents to %s", len(reg.sources), reg.num_documents(), corpus_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, meta = load_config(args)
    out = Path(cfg.out)
    reg = build_registry(cfg)
    resume = None
    if args.resume:
        resume = _load_checkpoint(args, cfg, out / "checkpoint_last.npz")
        log.info("resuming from step %d", resume.step)
    log_path = out / "train_log.csv"
    result = train(reg, cfg.train, resume=resume, log_path=log_path)
    best_p, last_p = out / "checkpoint_best.npz", out / "checkpoint_last.npz"
    result.best.save(best_p)
    result.last.save(last_p)
    write_manifest(out, "train", cfg, {**meta, "resumed": bool(args.resume)}, [log_path, best_p, last_p])
    log.info("trained to step %d (best val acc %s)", result.last.step, result.last.best_val_acc)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, meta = load_config(args)
    out = Path(cfg.out)
    reg = build_registry(cfg)
    ckpt = _load_checkpoint(args, cfg, out / "checkpoint_best.npz")
    ev = cfg.eval
    rep = meta_test(ckpt, reg, ev.n_way, ev.k_shot, ev.q_query, ev.tasks_per_source, ev.seed)
    path = out / "eval_report.csv"
    write_table([rep.row()], path)
    write_manifest(out, "eval", cfg, meta, [path])
    log.info("overall accuracy %.4f", rep.overall)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg, meta = load_config(args)
    out = Path(cfg.out)
    reg = build_registry(cfg)
    ckpt = _load_checkpoint(args, cfg, out / "checkpoint_best.npz")
    ev = cfg.eval
    trace_path = out / "task_traces.jsonl" if ev.dump_traces else None
    hm = heatmap(ckpt, reg, ev.tasks_per_source, ev.seed, k_shot=ev.heatmap_k_shot, trace_path=trace_path)
    path = out / "heatmap.csv"
    hm.write_csv(path)
    write_manifest(out, "heatmap", cfg, meta, [path] + ([trace_path] if trace_path else []))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, meta = load_config(args)
    out = Path(cfg.out)
    reg = build_registry(cfg)
    ev = cfg.eval
    rows = ablate(reg, cfg.train, ev.seeds, ev.tasks_per_source, ev.seed)
    path = out / "ablation.csv"
    write_table(rows, path)
    write_manifest(out, "ablate", cfg, meta, [path])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, meta = load_config(args)
    out = Path(cfg.out)
    reg = build_registry(cfg)
    ev = cfg.eval
    if args.kind == "structure":
        rows = structure_sweep(reg, cfg.train, [tuple(b) for b in ev.branchings], ev.seeds,
                               ev.tasks_per_source, ev.seed)
        path = out / "structure_sweep.csv"
    else:
        ckpt = _load_checkpoint(args, cfg, out / "checkpoint_best.npz")
        rows = nway_sweep(ckpt, reg, ev.ways, ev.k_shot, ev.q_query, ev.tasks_per_source, ev.seed)
        path = out / "nway_sweep.csv"
    write_table(rows, path)
    write_manifest(out, f"sweep-{args.kind}", cfg, meta, [path])
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sshtc", description="Hierarchical task clustering for multi-source few-shot text classification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path (defaults inside --out)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        if name == "sweep":
            p.add_argument("--kind", choices=("structure", "nway"), default="structure")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CorpusError) as exc:
        print(f"sshtc {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplingError, OSError, ValueError, ArithmeticError) as exc:
        print(f"sshtc {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
