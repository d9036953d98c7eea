"""Seeded counter-based random streams."""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by one or more integers; equal keys give equal streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def get_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of the generator state."""
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {k: [int(x) for x in v] for k, v in st["state"].items()},
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": state["bit_generator"],
        "state": {k: np.array(v, dtype=np.uint64) for k, v in state["state"].items()},
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)
