"""Token-selective transformer layer.

Each head runs self-attention over its own attended subset; skipped tokens
carry that head's slice of the normalized input through unchanged. Head
outputs are put back in original token order before the heads are
concatenated, so heads with different selections line up positionally.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionArtifacts,
    BlockParams,
    attend,
    block_forward,
    head_qkv,
    merge_heads,
    mhsa_forward,
    mlp,
    output_projection,
    split_heads,
)
from .numerics import Tensor
from .selector import SelectionPlan, SelectorParams, check_ratio, importance_scores, predict_attention, select_tokens


class SkipScope(str, enum.Enum):
    """How much of the layer a skipped token bypasses.

    ATTENTION_ONLY: skipped slices rejoin before ``W_O``; projections and MLP see every token.
    ATTENTION_AND_PROJ: tokens skipped by every head also skip ``W_O``/``F`` (the attention
    sublayer leaves them unchanged).
    FULL_LAYER: tokens skipped by every head also skip the MLP, so they leave the layer untouched.
    """

    ATTENTION_ONLY = "attention_only"
    ATTENTION_AND_PROJ = "attention_and_proj"
    FULL_LAYER = "full_layer"


@dataclass
class ToSALayerParams:
    block: BlockParams
    selector: SelectorParams
    ratio: float = 0.8
    scope: SkipScope = SkipScope.ATTENTION_ONLY

    def __post_init__(self):
        check_ratio(self.ratio)
        self.scope = SkipScope(self.scope)


@dataclass
class PairDiagnostics:
    plan: SelectionPlan
    predicted: Tensor               # selector log-maps, (..., H, L, L)
    source: AttentionArtifacts      # maps of the preceding standard layer
    attended: AttentionArtifacts    # maps over each head's attended subset, (..., H, K, K)
    teacher: AttentionArtifacts | None = field(default=None)


def _check_ascending(indices: np.ndarray, length: int) -> None:
    if indices.size == 0:
        return
    if indices.min() < 0 or indices.max() >= length:
        raise IndexError(f"token index out of range for {length} tokens")
    if indices.shape[-1] > 1 and np.any(np.diff(indices, axis=-1) <= 0):
        raise ValueError("token indices must be strictly ascending")


def gather_tokens(x: Tensor, indices) -> Tensor:
    """Rows of ``x`` (``(..., L, d)``) at ascending ``indices`` (``(..., K)``)."""
    indices = np.asarray(indices, dtype=np.intp)
    _check_ascending(indices, x.shape[-2])
    return nx.gather(x, indices[..., None], axis=-2)


def scatter_merge(attended_out: Tensor, skipped: Tensor, attended_idx, skipped_idx) -> Tensor:
    """Re-form all L rows in original order from attended outputs and bypassed rows."""
    attended_idx = np.asarray(attended_idx, dtype=np.intp)
    skipped_idx = np.asarray(skipped_idx, dtype=np.intp)
    length = attended_idx.shape[-1] + skipped_idx.shape[-1]
    _check_ascending(attended_idx, length)
    _check_ascending(skipped_idx, length)
    lead = np.broadcast_shapes(attended_idx.shape[:-1], skipped_idx.shape[:-1])
    both = np.concatenate([np.broadcast_to(attended_idx, lead + attended_idx.shape[-1:]),
                           np.broadcast_to(skipped_idx, lead + skipped_idx.shape[-1:])], axis=-1)
    if not np.array_equal(np.sort(both, axis=-1), np.broadcast_to(np.arange(length), both.shape)):
        raise ValueError("attended and skipped indices do not partition the tokens")
    return nx.scatter_rows(attended_out, skipped, attended_idx[..., None], skipped_idx[..., None], axis=-2)


def tosa_attention(x: Tensor, params: ToSALayerParams,
                   plan: SelectionPlan) -> tuple[Tensor, AttentionArtifacts]:
    """Forward one ToSA layer under a fixed selection plan."""
    block = params.block
    attn = block.attn
    if plan.length != x.shape[-2] or plan.heads != attn.heads:
        raise ValueError(f"plan is for {plan.heads} heads x {plan.length} tokens, "
                         f"layer has {attn.heads} heads and input has {x.shape[-2]} tokens")
    h = nx.layer_norm(x, block.ln1_g, block.ln1_b)
    h_tokens = nx.reshape(h, h.shape[:-2] + (1,) + h.shape[-2:])
    att_idx = plan.attended[..., None]
    selected = nx.gather(h_tokens, att_idx, axis=-2)           # (..., H, K, D)
    q, k, v = head_qkv(selected, attn)
    out, b, a = attend(q, k, v)
    bypass = nx.gather(split_heads(h, attn.heads), plan.skipped[..., None], axis=-2)
    per_head = nx.scatter_rows(out, bypass, att_idx, plan.skipped[..., None], axis=-2)
    delta = output_projection(merge_heads(per_head), attn)

    keep = None
    if params.scope is not SkipScope.ATTENTION_ONLY:
        keep = plan.attended_mask().any(axis=-2)[..., None].astype(np.float64)  # (..., L, 1)
        delta = nx.mul(delta, keep)
    x1 = nx.add(x, delta)
    m = mlp(nx.layer_norm(x1, block.ln2_g, block.ln2_b), block)
    if params.scope is SkipScope.FULL_LAYER:
        m = nx.mul(m, keep)
    return nx.add(x1, m), AttentionArtifacts(b, a)


def plan_from_maps(b_maps: Tensor, selector: SelectorParams, ratio: float,
                   forced=(0,)) -> tuple[SelectionPlan, Tensor]:
    """Run the (frozen) selector on pre-softmax maps and choose tokens."""
    with nx.no_grad():
        predicted = predict_attention(b_maps.detach(), selector)
    return select_tokens(importance_scores(predicted), ratio, forced), predicted


def tosa_pair_forward(x: Tensor, standard: BlockParams, tosa: ToSALayerParams, forced=(0,),
                      with_teacher: bool = False) -> tuple[Tensor, PairDiagnostics]:
    """Standard block followed by a ToSA block fed by the first block's pre-softmax maps."""
    y1, source = block_forward(x, standard)
    plan, predicted = plan_from_maps(source.B, tosa.selector, tosa.ratio, forced)
    y2, attended = tosa_attention(y1, tosa, plan)
    teacher = None
    if with_teacher:
        with nx.no_grad():
            _, teacher = mhsa_forward(nx.layer_norm(y1, tosa.block.ln1_g, tosa.block.ln1_b), tosa.block.attn)
    return y2, PairDiagnostics(plan, predicted, source, attended, teacher)
