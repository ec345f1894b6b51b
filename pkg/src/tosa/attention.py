"""Multi-head self-attention and the pre-norm transformer block.

Inputs are ``(L, D)`` or batched ``(N, L, D)``; per-head tensors carry a head
axis just before the token axis, e.g. ``(N, H, L, d_h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .params import fan_in, ones, zeros


@dataclass
class AttentionParams:
    """Per-head Q/K/V projections stacked as ``(H, D, D/H)``, then ``W_O`` and the affine map ``F``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    f_w: Tensor
    f_b: Tensor

    def __post_init__(self):
        h, d, dh = self.w_q.shape
        if d != h * dh:
            raise ShapeError(f"model dim {d} must equal heads {h} x head dim {dh}")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != (h, d, dh):
                raise ShapeError(f"{name} must have shape {(h, d, dh)}")
        if self.w_o.shape != (d, d) or self.f_w.shape != (d, d) or self.f_b.shape != (d,):
            raise ShapeError("output projection / F shapes must be (D, D), (D, D), (D,)")

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def __post_init__(self):
        d = self.attn.dim
        if self.mlp_w1.shape != (d, 4 * d) or self.mlp_w2.shape != (4 * d, d):
            raise ShapeError(f"MLP must map {d} -> {4 * d} -> {d}")


@dataclass
class AttentionArtifacts:
    """Pre-softmax maps ``B`` (Q K^T / sqrt(d_h)) and softmax maps ``A``, both ``(..., H, n, n)``."""

    B: Tensor
    A: Tensor


def init_attention(rng: np.random.Generator, dim: int, heads: int) -> AttentionParams:
    if dim % heads:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    dh = dim // heads
    return AttentionParams(
        w_q=fan_in(rng, (heads, dim, dh), dim),
        w_k=fan_in(rng, (heads, dim, dh), dim),
        w_v=fan_in(rng, (heads, dim, dh), dim),
        w_o=fan_in(rng, (dim, dim), dim),
        f_w=fan_in(rng, (dim, dim), dim),
        f_b=zeros(dim),
    )


def init_block(rng: np.random.Generator, dim: int, heads: int) -> BlockParams:
    return BlockParams(
        attn=init_attention(rng, dim, heads),
        ln1_g=ones(dim), ln1_b=zeros(dim),
        ln2_g=ones(dim), ln2_b=zeros(dim),
        mlp_w1=fan_in(rng, (dim, 4 * dim), dim), mlp_b1=zeros(4 * dim),
        mlp_w2=fan_in(rng, (4 * dim, dim), 4 * dim), mlp_b2=zeros(dim),
    )


def project_qkv(x: Tensor, params: AttentionParams, head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Q, K, V of one head for tokens ``x`` of shape ``(..., L, D)``."""
    if x.shape[-1] != params.dim:
        raise ShapeError(f"expected {params.dim} features, got {x.shape[-1]}")
    if not 0 <= head < params.heads:
        raise IndexError(f"head {head} out of range for {params.heads} heads")
    return (x @ params.w_q[head], x @ params.w_k[head], x @ params.w_v[head])


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Scaled dot-product attention; returns ``(A V, B, A)``."""
    b = nx.scale(q @ nx.swapaxes(k), 1.0 / math.sqrt(q.shape[-1]))
    a = nx.softmax(b, axis=-1)
    return a @ v, b, a


def head_qkv(x_heads: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Project ``(..., H or 1, n, D)`` token sets through every head's Q/K/V at once."""
    return x_heads @ params.w_q, x_heads @ params.w_k, x_heads @ params.w_v


def merge_heads(per_head: Tensor) -> Tensor:
    """``(..., H, L, d_h)`` -> ``(..., L, H*d_h)``, heads in order along features."""
    lead = per_head.shape[:-3]
    h, n, dh = per_head.shape[-3:]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return nx.reshape(nx.transpose(per_head, axes), lead + (n, h * dh))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., L, D)`` -> ``(..., H, L, D/H)``: head ``h`` gets feature columns ``h*D/H:(h+1)*D/H``."""
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    r = nx.reshape(x, lead + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return nx.transpose(r, axes)


def output_projection(merged: Tensor, params: AttentionParams) -> Tensor:
    """``F(W_O . concat)``; the two maps stay separate."""
    return nx.add((merged @ params.w_o) @ params.f_w, params.f_b)


def mhsa_forward(x: Tensor, params: AttentionParams) -> tuple[Tensor, AttentionArtifacts]:
    if x.shape[-1] != params.dim:
        raise ShapeError(f"expected {params.dim} features, got {x.shape[-1]}")
    x_heads = nx.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    q, k, v = head_qkv(x_heads, params)
    out, b, a = attend(q, k, v)
    return output_projection(merge_heads(out), params), AttentionArtifacts(b, a)


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    h = nx.gelu(nx.add(x @ p.mlp_w1, p.mlp_b1))
    return nx.add(h @ p.mlp_w2, p.mlp_b2)


def block_forward(x: Tensor, params: BlockParams) -> tuple[Tensor, AttentionArtifacts]:
    """Pre-norm block: ``x' = x + MHSA(LN1 x)``, ``y = x' + MLP(LN2 x')``."""
    attn_out, artifacts = mhsa_forward(nx.layer_norm(x, params.ln1_g, params.ln1_b), params.attn)
    x1 = nx.add(x, attn_out)
    y = nx.add(x1, mlp(nx.layer_norm(x1, params.ln2_g, params.ln2_b), params))
    return y, artifacts
