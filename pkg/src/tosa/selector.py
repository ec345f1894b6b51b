"""Token selector: predict next-layer attention from pre-softmax maps and pick top-K tokens per head."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_FLOOR, Decimal
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, InputError, ShapeError, Tensor
from .params import fan_in, normal, zeros


@dataclass
class SelectorParams:
    """Two width-``k`` convolutions along the key axis: ``H -> C -> H`` channels."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    def __post_init__(self):
        c, h, k = self.conv1_w.shape
        if k % 2 == 0:
            raise ConfigError(f"selector kernel width must be odd, got {k}")
        if c < 1:
            raise ConfigError("selector needs at least one hidden channel")
        if self.conv2_w.shape != (h, c, k):
            raise ShapeError(f"conv2 kernels must have shape {(h, c, k)}, got {self.conv2_w.shape}")

    @property
    def heads(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def width(self) -> int:
        return self.conv1_w.shape[2]


def init_selector(rng: np.random.Generator, heads: int, hidden: int | None = None,
                  width: int = 3) -> SelectorParams:
    # second conv starts small so the initial prediction is close to uniform
    hidden = 4 * heads if hidden is None else hidden
    if width % 2 == 0:
        raise ConfigError(f"selector kernel width must be odd, got {width}")
    return SelectorParams(
        conv1_w=fan_in(rng, (hidden, heads, width), heads * width),
        conv1_b=zeros(hidden),
        conv2_w=normal(rng, (heads, hidden, width), 0.02),
        conv2_b=zeros(heads),
    )


@dataclass
class SelectionPlan:
    """Per-head partition of token indices for one ToSA layer.

    ``attended`` is ``(..., H, K)`` and ``skipped`` ``(..., H, L-K)``, each
    sorted ascending along the last axis. ``scores`` is ``(..., H, L)``.
    """

    attended: np.ndarray
    skipped: np.ndarray
    scores: np.ndarray
    ratio: float
    k: int

    @property
    def length(self) -> int:
        return self.attended.shape[-1] + self.skipped.shape[-1]

    @property
    def heads(self) -> int:
        return self.attended.shape[-2]

    def attended_mask(self) -> np.ndarray:
        """Boolean ``(..., H, L)``: True where the head attends the token."""
        mask = np.zeros(self.attended.shape[:-1] + (self.length,), dtype=bool)
        np.put_along_axis(mask, self.attended, True, axis=-1)
        return mask

    def validate(self, forced: Sequence[int] = ()) -> None:
        if self.attended.shape[-1] != self.k:
            raise ValueError(f"plan attends {self.attended.shape[-1]} tokens, expected K={self.k}")
        full = np.concatenate([self.attended, self.skipped], axis=-1)
        if not np.array_equal(np.sort(full, axis=-1),
                              np.broadcast_to(np.arange(self.length), full.shape)):
            raise ValueError("plan indices do not partition range(L)")
        for part in (self.attended, self.skipped):
            if part.shape[-1] > 1 and np.any(np.diff(part, axis=-1) <= 0):
                raise ValueError("plan indices must be strictly ascending")
        if len(forced) and not self.attended_mask()[..., list(forced)].all():
            raise ValueError("forced tokens missing from the attended set")


def selection_k(length: int, ratio: float, n_forced: int = 0) -> int:
    """``max(1, round_half_up(ratio * length), n_forced)``.

    The product is taken on the ratio's shortest decimal form, so ``0.7 * 65``
    is 45.5 and rounds to 46 rather than falling to 45 through binary error.
    """
    check_ratio(ratio)
    exact = Decimal(repr(float(ratio))) * length
    return max(1, int((exact + Decimal("0.5")).to_integral_value(rounding=ROUND_FLOOR)), n_forced)


def check_ratio(ratio: float) -> None:
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"attention ratio must be in (0, 1], got {ratio}")


def predict_attention(b_maps: Tensor, params: SelectorParams) -> Tensor:
    """Log-probability attention maps ``(..., H, L, L)`` predicted from pre-softmax maps.

    Each query row is a length-L sequence with one channel per head; the two
    convolutions run along the key axis, then a log-softmax normalizes it.
    """
    if b_maps.ndim < 3 or b_maps.shape[-1] != b_maps.shape[-2]:
        raise ShapeError(f"expected (..., H, L, L) maps, got {b_maps.shape}")
    if b_maps.shape[-3] != params.heads:
        raise ShapeError(f"selector built for {params.heads} heads, got {b_maps.shape[-3]}")
    lead = tuple(range(b_maps.ndim - 3))
    n = len(lead)
    rows = nx.transpose(b_maps, lead + (n + 1, n, n + 2))  # (..., Lq, H, Lk)
    hidden = nx.relu(nx.conv1d(rows, params.conv1_w, params.conv1_b))
    logits = nx.conv1d(hidden, params.conv2_w, params.conv2_b)
    logits = nx.transpose(logits, lead + (n + 1, n, n + 2))  # back to (..., H, Lq, Lk)
    return nx.log_softmax(logits, axis=-1)


def importance_scores(log_maps) -> np.ndarray:
    """Attention mass each token receives: column sums of ``exp(log_maps)``, shape ``(..., H, L)``."""
    data = log_maps.data if isinstance(log_maps, Tensor) else np.asarray(log_maps)
    return np.exp(data).sum(axis=-2)


def select_tokens(scores: np.ndarray, ratio: float, forced: Sequence[int] = ()) -> SelectionPlan:
    """Top-K tokens per head by score, with ``forced`` tokens always included.

    Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    length = scores.shape[-1]
    forced = sorted(set(int(i) for i in forced))
    if forced and (forced[0] < 0 or forced[-1] >= length):
        raise IndexError(f"forced index out of range for {length} tokens")
    k = selection_k(length, ratio, len(forced))
    ranked = -scores
    if forced:
        ranked = ranked.copy()
        ranked[..., forced] = -np.inf
    order = np.argsort(ranked, axis=-1, kind="stable")
    attended = np.sort(order[..., :k], axis=-1)
    skipped = np.sort(order[..., k:], axis=-1)
    return SelectionPlan(attended, skipped, scores, float(ratio), k)


def selector_loss(log_pred: Tensor, a_true) -> Tensor:
    """Sum over heads of KL(true || predicted), each head averaged over query rows (and batch)."""
    target = a_true.data if isinstance(a_true, Tensor) else np.asarray(a_true, dtype=np.float64)
    if target.shape != log_pred.shape:
        raise ShapeError(f"prediction {log_pred.shape} and target {target.shape} differ")
    if np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-6):
        raise InputError("target attention maps are not row-stochastic")
    total = None
    for h in range(log_pred.shape[-3]):
        term = nx.kl_divergence(log_pred[..., h, :, :], target[..., h, :, :], axis=-1)
        total = term if total is None else nx.add(total, term)
    return total
