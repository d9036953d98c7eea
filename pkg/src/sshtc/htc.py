"""Hierarchical task clustering tree.

A task embedding enters as the single root node. At each level it is softly
assigned to that level's learnable centers with a Gaussian-kernel softmax,
and each child embedding is the assignment-weighted sum of per-child
``tanh(W g + b)`` transforms of the parents. The last level has one node,
whose embedding is ``g_out``; ``g_T`` concatenates ``g_in`` and ``g_out``.

Branching tuples list cluster counts bottom (nearest the root) to top and
must end in 1, e.g. ``(5, 3, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoder import uniform_init
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class TreeConfig:
    branching: tuple[int, ...] = (5, 3, 1)
    sigma_sq: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(b) for b in self.branching))
        if not self.branching:
            raise ValueError("branching must be nonempty")
        if any(b < 1 for b in self.branching):
            raise ValueError(f"every branching entry must be >= 1, got {self.branching}")
        if self.branching[-1] != 1:
            raise ValueError(f"branching must end in 1, got {self.branching}")
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")


@dataclass
class TreeLevel:
    centers: Tensor  # (O', d)
    weights: Tensor  # (O', d, d)
    biases: Tensor  # (O', d)

    @property
    def size(self) -> int:
        return self.centers.shape[0]


@dataclass
class TaskTrace:
    g_in: Tensor
    assignments: list[Tensor] = field(default_factory=list)  # level l: (O_l, O_{l+1})
    level_embeddings: list[Tensor] = field(default_factory=list)  # level l: (O_l, d), l = 0..L
    g_out: Tensor | None = None
    g_T: Tensor | None = None

    def to_record(self) -> dict:
        return {
            "g_in": self.g_in.value.tolist(),
            "assignments": [a.value.tolist() for a in self.assignments],
            "level_embeddings": [e.value.tolist() for e in self.level_embeddings],
            "g_out": self.g_out.value.tolist(),
            "g_T": self.g_T.value.tolist(),
        }


def param_names(level: int) -> tuple[str, str, str]:
    return f"htc.{level}.centers", f"htc.{level}.weights", f"htc.{level}.biases"


def init_tree(config: TreeConfig, dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for level, size in enumerate(config.branching):
        c, w, b = param_names(level)
        params[c] = uniform_init(rng, size, dim)
        params[w] = uniform_init(rng, size, dim, dim)
        params[b] = uniform_init(rng, size, dim)
    return params


def tree_levels(P: Mapping[str, Tensor], config: TreeConfig) -> list[TreeLevel]:
    levels = []
    for level, size in enumerate(config.branching):
        names = param_names(level)
        missing = [n for n in names if n not in P]
        if missing:
            raise ShapeError(f"tree parameters missing for level {level}: {missing}")
        lv = TreeLevel(*(nx.as_tensor(P[n]) for n in names))
        if lv.size != size or lv.weights.shape[0] != size or lv.biases.shape[0] != size:
            raise ShapeError(
                f"level {level} has {lv.size} clusters but branching {config.branching} expects {size}"
            )
        levels.append(lv)
    extra = param_names(len(config.branching))[0]
    if extra in P:
        raise ShapeError(f"parameters define more levels than branching {config.branching}")
    return levels


def assign(g, centers, sigma_sq: float = 2.0) -> Tensor:
    """Soft assignment of embedding(s) ``g`` to ``centers``.

    ``p_o' = softmax_o'(-||g - c_o'||^2 / (2 sigma_sq))``. Accepts a (d,)
    vector or an (O, d) matrix of parent embeddings.
    """
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    g = nx.as_tensor(g)
    centers = nx.as_tensor(centers)
    single = g.ndim == 1
    G = nx.reshape(g, (1, g.shape[0])) if single else g
    if G.shape[1] != centers.shape[1]:
        raise ShapeError(f"embedding width {G.shape[1]} != center width {centers.shape[1]}")
    p = nx.softmax(nx.pairwise_sq_dist(G, centers) * (-1.0 / (2.0 * sigma_sq)), axis=-1)
    return p[0] if single else p


def propagate(level_embs, assignments, level: TreeLevel) -> Tensor:
    """Child embeddings ``sum_o p[o, o'] * tanh(W_o' g_o + b_o')``, shape (O', d)."""
    G = nx.as_tensor(level_embs)
    A = nx.as_tensor(assignments)
    if A.shape != (G.shape[0], level.size):
        raise ShapeError(f"assignments {A.shape} do not match parents {G.shape[0]} x children {level.size}")
    children = []
    for o in range(level.size):
        t = nx.tanh(nx.affine(level.weights[o], G, level.biases[o]))  # (O, d)
        children.append(nx.matmul(A[:, o], t))
    return nx.stack(children)


def run_tree(g_in, levels: Sequence[TreeLevel], config: TreeConfig) -> TaskTrace:
    if len(levels) != len(config.branching):
        raise ShapeError(f"{len(levels)} tree levels for branching {config.branching}")
    g_in = nx.as_tensor(g_in)
    current = nx.reshape(g_in, (1, g_in.shape[0]))
    trace = TaskTrace(g_in=g_in, level_embeddings=[current])
    for level, size in zip(levels, config.branching):
        if level.size != size:
            raise ShapeError(f"level has {level.size} clusters, branching expects {size}")
        p = assign(current, level.centers, config.sigma_sq)
        current = propagate(current, p, level)
        trace.assignments.append(p)
        trace.level_embeddings.append(current)
    trace.g_out = current[0]
    trace.g_T = nx.concat([g_in, trace.g_out])
    return trace
