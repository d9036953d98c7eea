"""Joint episodic training: one task per step, Adam, global-norm clipping,
early stopping on meta-validation accuracy, resumable checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .corpus import CorpusRegistry, Vocab
from .encoder import encode_batch, init_encoder
from .episodes import Episode, eligible_sources, sample_episode
from .htc import TaskTrace, TreeConfig, init_tree, run_tree, tree_levels
from .lomlm import augmented_embeddings, lomlm_loss, task_embedding
from .modulate import gamma_beta, init_modulator, transform
from .numerics import ParameterStore, Tensor
from .protonet import DISTANCE_MODES, cls_loss, distances, prototypes
from .rng import from_state, get_state, make_rng

CHECKPOINT_FORMAT = "sshtc-checkpoint/1"

# random streams derived from the run seed
_INIT, _TRAIN, _VAL = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 0.1
    learning_rate: float = 1e-3
    clip_norm: float = 40.0
    max_episodes: int = 1000
    patience: int = 5
    val_every: int = 100
    val_tasks: int = 50
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    branching: tuple[int, ...] | None = (5, 3, 1)
    sigma_sq: float = 2.0
    distance_mode: str = "plain"
    reduction: str = "sum"
    dim: int = 32
    tie_mlm: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.branching is not None:
            object.__setattr__(self, "branching", tuple(int(b) for b in self.branching))
        self.validate()

    def validate(self) -> None:
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        for name in ("val_every", "val_tasks", "n_way", "k_shot", "q_query", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if self.max_episodes < 0:
            raise ConfigError("max_episodes must be >= 0")
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {DISTANCE_MODES}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        if self.branching is not None:
            try:
                TreeConfig(self.branching, self.sigma_sq)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @property
    def tree(self) -> TreeConfig | None:
        return None if self.branching is None else TreeConfig(self.branching, self.sigma_sq)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        if d["branching"] is not None:
            d["branching"] = list(d["branching"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        if d.get("branching") is not None:
            d["branching"] = tuple(d["branching"])
        return cls(**d)


def model_signature(cfg: TrainConfig) -> dict:
    """Config fields that determine parameter shapes and forward semantics."""
    return {
        "dim": cfg.dim,
        "branching": None if cfg.branching is None else list(cfg.branching),
        "tie_mlm": cfg.tie_mlm,
    }


def init_params(cfg: TrainConfig, vocab_size: int) -> ParameterStore:
    rng = make_rng(cfg.seed, _INIT)
    params = init_encoder(vocab_size, cfg.dim, cfg.dim, rng, cfg.tie_mlm)
    if cfg.branching is not None:
        params.update(init_tree(cfg.tree, cfg.dim, rng))
        params.update(init_modulator(cfg.dim, 2 * cfg.dim, rng))
    return ParameterStore(params)


# forward pass ----------------------------------------------------------------


@dataclass
class LossReport:
    loss: float
    cls_loss: float
    lomlm_loss: float
    lambda_: float
    query_acc: float
    total: Tensor = field(repr=False, compare=False)
    trace: TaskTrace | None = field(default=None, repr=False, compare=False)
    gamma: Tensor | None = field(default=None, repr=False, compare=False)
    beta: Tensor | None = field(default=None, repr=False, compare=False)


def combine(cls_value, lomlm_value, lambda_: float):
    """``L_cls + lambda * L_lomlm``; with lambda 0 the LOMLM term is dropped entirely."""
    return cls_value if lambda_ == 0 else cls_value + lambda_ * lomlm_value


def joint_loss(episode: Episode, P: Mapping[str, Tensor], cfg: TrainConfig,
               with_lomlm: bool = True) -> LossReport:
    """Run the whole pipeline on one episode.

    Only ``episode.support`` reaches the LOMLM objective and the task
    embedding; query documents are encoded solely for classification.
    """
    n, k = episode.n_way, episode.k_shot
    support = episode.support
    l_lomlm = lomlm_loss(P, support) if with_lomlm and (cfg.lambda_ > 0 or cfg.branching is not None) else None
    trace = gamma = beta = None
    if cfg.branching is not None:
        h_support = augmented_embeddings(P, support)
        g_in = task_embedding(P, support, h_support)
        trace = run_tree(g_in, tree_levels(P, cfg.tree), cfg.tree)
        gamma, beta = gamma_beta(P, trace.g_T)
        v_support = transform(h_support, gamma, beta)
    else:
        v_support = encode_batch(P, [d.tokens for row in support for d in row])
    queries = episode.query_docs()
    h_query = encode_batch(P, [d.tokens for d, _ in queries])
    v_query = h_query if cfg.branching is None else transform(h_query, gamma, beta)
    protos = prototypes(nx.reshape(v_support, (n, k, v_support.shape[1])), episode.class_ids)
    labels = np.array([i for _, i in queries])
    l_cls = cls_loss(v_query, labels, protos, cfg.distance_mode, cfg.reduction)
    pred = np.argmin(distances(v_query.value, protos, cfg.distance_mode).value, axis=1)
    acc = float(np.mean(pred == labels))
    if l_lomlm is not None and cfg.lambda_ > 0:
        total = combine(l_cls, l_lomlm, cfg.lambda_)
    else:
        total = l_cls
    lomlm_value = l_lomlm.item() if l_lomlm is not None else 0.0
    return LossReport(total.item(), l_cls.item(), lomlm_value, cfg.lambda_, acc, total, trace, gamma, beta)


def episode_accuracy(params: Mapping[str, np.ndarray], episode: Episode, cfg: TrainConfig) -> float:
    with nx.no_grad():
        return joint_loss(episode, params, cfg, with_lomlm=False).query_acc


# optimization ----------------------------------------------------------------


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients by ``clip_norm / norm`` when their global l2 norm exceeds ``clip_norm``."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


class Adam:
    def __init__(self, params: ParameterStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.params.items()}

    def step(self, params: ParameterStore, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to evaluate a model or resume its training run.

    File layout (``.npz``): arrays under ``param/<name>``, ``adam_m/<name>``,
    ``adam_v/<name>`` and optionally ``best/<name>``, plus a ``meta`` entry
    holding a JSON document with the format tag, config, vocabulary, step
    counter, Adam step, RNG states and early-stopping bookkeeping.
    """

    params: dict[str, np.ndarray]
    config: TrainConfig
    vocab: list[str]
    step: int = 0
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    best_val_acc: float | None = None
    best_step: int | None = None
    bad_evals: int = 0
    best_params: dict[str, np.ndarray] | None = None

    def store(self) -> ParameterStore:
        return ParameterStore(self.params)

    def check_compatible(self, cfg: TrainConfig) -> None:
        mine, theirs = model_signature(self.config), model_signature(cfg)
        diffs = [f"{k}: checkpoint={mine[k]} config={theirs[k]}" for k in mine if mine[k] != theirs[k]]
        if diffs:
            raise ConfigError("checkpoint does not match config (" + "; ".join(diffs) + ")")

    def check_vocab(self, vocab: Vocab) -> None:
        if self.vocab != vocab.tokens():
            raise ConfigError(
                f"checkpoint vocabulary ({len(self.vocab)} tokens) does not match corpus vocabulary "
                f"({len(vocab)} tokens)"
            )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "vocab": self.vocab,
            "step": self.step,
            "adam_t": self.adam_t,
            "rng_state": self.rng_state,
            "best_val_acc": self.best_val_acc,
            "best_step": self.best_step,
            "bad_evals": self.bad_evals,
            "param_names": list(self.params),
            "has_best": self.best_params is not None,
        }
        arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
        for prefix, group in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v),
                              ("best", self.best_params or {})):
            for name, arr in group.items():
                arrays[f"{prefix}/{name}"] = arr
        with path.open("wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            names = meta["param_names"]

            def group(prefix):
                return {n: z[f"{prefix}/{n}"].copy() for n in names if f"{prefix}/{n}" in z}

            return cls(
                params=group("param"),
                config=TrainConfig.from_dict(meta["config"]),
                vocab=meta["vocab"],
                step=meta["step"],
                adam_t=meta["adam_t"],
                adam_m=group("adam_m"),
                adam_v=group("adam_v"),
                rng_state=meta["rng_state"],
                best_val_acc=meta["best_val_acc"],
                best_step=meta["best_step"],
                bad_evals=meta["bad_evals"],
                best_params=group("best") if meta["has_best"] else None,
            )

    def as_best(self) -> "Checkpoint":
        """Evaluation checkpoint holding the best parameters seen so far."""
        params = self.best_params if self.best_params is not None else self.params
        return Checkpoint(
            params={k: v.copy() for k, v in params.items()},
            config=self.config,
            vocab=self.vocab,
            step=self.best_step if self.best_step is not None else self.step,
            best_val_acc=self.best_val_acc,
            best_step=self.best_step,
        )


def fresh_checkpoint(reg: CorpusRegistry, cfg: TrainConfig) -> Checkpoint:
    """Untrained checkpoint with freshly initialized parameters."""
    store = init_params(cfg, len(reg.vocab))
    return Checkpoint(params=store.params, config=cfg, vocab=reg.vocab.tokens())


# training loop ---------------------------------------------------------------


LOG_COLUMNS = ("step", "L", "L_cls", "L_lomlm", "query_acc", "val_acc", "wall_ms")


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[dict]
    stopped_early: bool


def validate_registry(reg: CorpusRegistry, cfg: TrainConfig) -> None:
    per_class = cfg.k_shot + cfg.q_query
    for split in ("train", "val"):
        if not eligible_sources(reg, split, cfg.n_way, per_class):
            raise ConfigError(
                f"no source offers {cfg.n_way} {split} classes with {per_class} documents each"
            )


def evaluate_val(params: Mapping[str, np.ndarray], reg: CorpusRegistry, cfg: TrainConfig,
                 rng: np.random.Generator) -> float:
    accs = [
        episode_accuracy(params, sample_episode(reg, "val", cfg.n_way, cfg.k_shot, cfg.q_query, rng), cfg)
        for _ in range(cfg.val_tasks)
    ]
    return float(np.mean(accs))


def train(reg: CorpusRegistry, cfg: TrainConfig, resume: Checkpoint | None = None,
          log_path=None) -> TrainResult:
    """Train until ``cfg.max_episodes`` steps or ``cfg.patience`` non-improving validations.

    With ``resume``, parameters, optimizer moments, RNG streams and
    early-stopping state are restored and the step counter continues; only
    the stopping fields of ``cfg`` may differ from the checkpoint's config.
    """
    validate_registry(reg, cfg)
    if resume is None:
        store = init_params(cfg, len(reg.vocab))
        adam = Adam(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        train_rng, val_rng = make_rng(cfg.seed, _TRAIN), make_rng(cfg.seed, _VAL)
        step, best_val, best_step, bad, best_params = 0, None, None, 0, None
    else:
        resume.check_compatible(cfg)
        resume.check_vocab(reg.vocab)
        store = ParameterStore({k: v.copy() for k, v in resume.params.items()})
        adam = Adam(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam.t = resume.adam_t
        adam.m = {k: v.copy() for k, v in resume.adam_m.items()}
        adam.v = {k: v.copy() for k, v in resume.adam_v.items()}
        train_rng, val_rng = from_state(resume.rng_state["train"]), from_state(resume.rng_state["val"])
        step, best_val, best_step, bad = resume.step, resume.best_val_acc, resume.best_step, resume.bad_evals
        best_params = None if resume.best_params is None else {k: v.copy() for k, v in resume.best_params.items()}

    log: list[dict] = []
    stopped = False
    while step < cfg.max_episodes:
        t0 = time.perf_counter()
        episode = sample_episode(reg, "train", cfg.n_way, cfg.k_shot, cfg.q_query, train_rng)
        leaves = store.tensors()
        report = joint_loss(episode, leaves, cfg)
        grads = nx.backward(report.total, leaves)
        grads, _ = clip_gradients(grads, cfg.clip_norm)
        store.set_grads(grads)
        adam.step(store, grads)
        step += 1
        row = {"step": step, "L": report.loss, "L_cls": report.cls_loss, "L_lomlm": report.lomlm_loss,
               "query_acc": report.query_acc, "val_acc": None}
        if step % cfg.val_every == 0:
            val_acc = evaluate_val(store.params, reg, cfg, val_rng)
            row["val_acc"] = val_acc
            if best_val is None or val_acc > best_val:
                best_val, best_step, bad = val_acc, step, 0
                best_params = {k: v.copy() for k, v in store.params.items()}
            else:
                bad += 1
        row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        log.append(row)
        if bad >= cfg.patience:
            stopped = True
            break

    last = Checkpoint(
        params={k: v.copy() for k, v in store.params.items()},
        config=cfg,
        vocab=reg.vocab.tokens(),
        step=step,
        adam_t=adam.t,
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        rng_state={"train": get_state(train_rng), "val": get_state(val_rng)},
        best_val_acc=best_val,
        best_step=best_step,
        bad_evals=bad,
        best_params=best_params,
    )
    if log_path is not None:
        write_log(log, log_path, append=resume is not None)
    return TrainResult(best=last.as_best(), last=last, log=log, stopped_early=stopped)


def write_log(rows: list[dict], path, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with path.open("a" if not new_file else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in LOG_COLUMNS})
