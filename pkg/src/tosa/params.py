"""Parameter containers: walking, copying, and seeded initialization."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .numerics import Tensor


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor reachable through dataclass fields and lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from named_tensors(obj[k], f"{prefix}.{k}" if prefix else str(k))


def set_requires_grad(obj, flag: bool) -> None:
    for _, t in named_tensors(obj):
        t.requires_grad = flag


def snapshot(obj) -> dict[str, bytes]:
    """Raw bytes of every tensor, for bit-level freeze checks."""
    return {name: t.data.tobytes() for name, t in named_tensors(obj)}


def make_rng(seed: int) -> np.random.Generator:
    """All initialization draws from PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    # truncated at two standard deviations, resampling out-of-range draws
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return Tensor(out)


def fan_in(rng: np.random.Generator, shape, fan: int) -> Tensor:
    return normal(rng, shape, 1.0 / np.sqrt(fan))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))
