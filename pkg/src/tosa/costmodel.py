"""Analytic FLOP and activation-memory accounting for standard and ToSA layers.

Two counting conventions are supported:

``"flop"``
    A multiply-add counts as 2. Non-matmul work is charged per element:
    softmax 5 (max, subtract, exp, sum, divide), attention scaling 1,
    layer norm 7, GELU 8, bias or residual add 1, ReLU 1, log 1, exp 1.
``"mac"``
    Only matmul/convolution multiply-adds, each counted once; elementwise
    work is ignored. This is the convention of most published ViT GFLOP
    figures (e.g. 1.3 G for DeiT-Tiny).

For a ToSA layer, ``K = max(1, round_half_up(r*L))`` tokens per head take part in
attention (the class token is always one of them). Q/K/V projections and the
two attention matmuls scale with K. Which other components shrink depends on
the skip scope; the number of tokens that skip *every* head is taken to be
``L - K`` (all heads choose the same set), which is the most favourable case.
Pass ``union_tokens`` to use a measured count instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .model import ModelConfig
from .selector import selection_k
from .tosa_layer import SkipScope

SOFTMAX = 5
LAYERNORM = 7
GELU = 8

COMPONENTS = ("qkv_proj", "attn_matmuls", "out_proj", "mlp", "selector", "elementwise", "other")


@dataclass
class LayerCost:
    index: int
    kind: str                       # "embed" | "standard" | "tosa" | "head"
    tokens: int                     # L
    attended: int                   # K (== L for standard layers)
    components: dict[str, int]
    activation_bytes: int

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def to_dict(self) -> dict:
        return {"index": self.index, "kind": self.kind, "tokens": self.tokens, "attended": self.attended,
                "components": {k: self.components[k] for k in COMPONENTS}, "total": self.total,
                "activation_bytes": self.activation_bytes}


@dataclass
class CostReport:
    convention: str
    ratio: float
    scope: SkipScope
    include_selector: bool
    layers: list[LayerCost] = field(default_factory=list)
    baseline_total: int = 0

    @property
    def components(self) -> dict[str, int]:
        return {k: sum(layer.components[k] for layer in self.layers) for k in COMPONENTS}

    @property
    def total(self) -> int:
        return sum(layer.total for layer in self.layers)

    @property
    def reduction(self) -> float:
        return 1.0 - self.total / self.baseline_total

    @property
    def peak_activation_bytes(self) -> int:
        return max(layer.activation_bytes for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "ratio": self.ratio,
            "scope": self.scope.value,
            "include_selector": self.include_selector,
            "layers": [layer.to_dict() for layer in self.layers],
            "components": self.components,
            "total": self.total,
            "baseline_total": self.baseline_total,
            "reduction": self.reduction,
            "peak_activation_bytes": self.peak_activation_bytes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_convention(convention: str) -> int:
    if convention not in ("flop", "mac"):
        raise ValueError(f"unknown counting convention {convention!r}")
    return 2 if convention == "flop" else 1


def selector_cost(length: int, heads: int, hidden: int, width: int, convention: str = "flop") -> int:
    """Two convolutions over L query rows of length L, log-softmax, column sums and top-K."""
    per_mac = _check_convention(convention)
    macs = length * length * hidden * heads * width + length * length * heads * hidden * width
    if convention == "mac":
        return macs
    elementwise = (length * length * (hidden + heads)          # conv biases
                   + length * length * hidden                 # ReLU
                   + (SOFTMAX + 1) * heads * length * length  # log-softmax
                   + 2 * heads * length * length              # exp + column sum
                   + heads * length * math.ceil(math.log2(max(length, 2))))  # top-K comparisons
    return per_mac * macs + elementwise


def layer_flops(length: int, dim: int, heads: int, kind: str = "standard", ratio: float = 1.0,
                scope: SkipScope = SkipScope.ATTENTION_ONLY, selector_hidden: int | None = None,
                selector_width: int = 3, include_selector: bool = True, convention: str = "flop",
                union_tokens: int | None = None) -> dict[str, int]:
    """Component breakdown for one transformer layer.

    Matmul counts (multiply-adds): Q/K/V ``3*n*D^2``, attention ``2*n^2*D``,
    ``W_O`` and ``F`` ``2*m*D^2``, MLP ``8*m'*D^2``, where ``n`` is K for ToSA
    layers, ``m``/``m'`` are L or the number of tokens attended by some head,
    depending on the scope.
    """
    per_mac = _check_convention(convention)
    scope = SkipScope(scope)
    if kind not in ("standard", "tosa"):
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "standard":
        n = proj = mlp_tokens = length
    else:
        n = selection_k(length, ratio, 1)
        union = n if union_tokens is None else union_tokens
        proj = length if scope is SkipScope.ATTENTION_ONLY else union
        mlp_tokens = union if scope is SkipScope.FULL_LAYER else length
    d2 = dim * dim
    comp = {k: 0 for k in COMPONENTS}
    comp["qkv_proj"] = per_mac * 3 * n * d2
    comp["attn_matmuls"] = per_mac * 2 * n * n * dim
    comp["out_proj"] = per_mac * 2 * proj * d2
    comp["mlp"] = per_mac * 8 * mlp_tokens * d2
    if convention == "flop":
        comp["elementwise"] = (
            LAYERNORM * length * dim                  # LN1 (skipped slices come from its output)
            + (1 + SOFTMAX) * heads * n * n           # scaling + softmax
            + 2 * proj * dim                          # F bias + residual
            + LAYERNORM * mlp_tokens * dim            # LN2
            + 4 * mlp_tokens * dim * (1 + GELU)       # hidden bias + GELU
            + 2 * mlp_tokens * dim                    # output bias + residual
        )
    if kind == "tosa" and include_selector:
        hidden = 4 * heads if selector_hidden is None else selector_hidden
        comp["selector"] = selector_cost(length, heads, hidden, selector_width, convention)
    return comp


def _activation_bytes(length, dim, heads, n, proj, mlp_tokens, kind, hidden):
    elems = 3 * n * dim + 2 * heads * n * n + 2 * proj * dim + 2 * 4 * mlp_tokens * dim + 2 * length * dim
    if kind == "tosa":
        elems += (hidden + 2 * heads) * length * length
    return 8 * elems


def model_cost(config: ModelConfig, convention: str = "flop", include_selector: bool = True,
               ratio: float | None = None, scope: SkipScope | None = None,
               all_standard: bool = False) -> CostReport:
    """Per-layer and total cost of ``config``'s schedule, with the all-standard total as baseline."""
    ratio = config.ratio if ratio is None else ratio
    scope = config.scope if scope is None else SkipScope(scope)
    per_mac = _check_convention(convention)
    length, dim, heads = config.tokens, config.dim, config.heads
    pdim = config.channels * config.patch_size ** 2

    def edge_layers():
        embed = {k: 0 for k in COMPONENTS}
        embed["other"] = per_mac * config.num_patches * pdim * dim
        head = {k: 0 for k in COMPONENTS}
        head["other"] = per_mac * dim * config.num_classes
        if convention == "flop":
            embed["elementwise"] = config.num_patches * dim + length * dim        # bias + positions
            head["elementwise"] = LAYERNORM * length * dim + config.num_classes  # final norm + bias
        return (LayerCost(0, "embed", length, length, embed, 8 * length * dim),
                LayerCost(config.depth + 1, "head", length, length, head, 8 * length * dim))

    def build(standard_only: bool) -> list[LayerCost]:
        embed, head = edge_layers()
        layers = [embed]
        for i in range(1, config.depth + 1):
            kind = "tosa" if (i in config.tosa_layers and not standard_only) else "standard"
            comp = layer_flops(length, dim, heads, kind, ratio, scope, config.hidden, config.selector_width,
                               include_selector, convention)
            n = selection_k(length, ratio, 1) if kind == "tosa" else length
            proj = length if kind == "standard" or scope is SkipScope.ATTENTION_ONLY else n
            mlp_tokens = n if kind == "tosa" and scope is SkipScope.FULL_LAYER else length
            layers.append(LayerCost(i, kind, length, n, comp,
                                    _activation_bytes(length, dim, heads, n, proj, mlp_tokens, kind, config.hidden)))
        layers.append(head)
        return layers

    report = CostReport(convention, ratio, scope, include_selector, build(all_standard))
    report.baseline_total = sum(layer.total for layer in build(True))
    return report


def deit_tiny_config(ratio: float = 0.8, scope: SkipScope = SkipScope.ATTENTION_ONLY,
                     tosa_layers=(2, 4, 6, 8, 10)) -> ModelConfig:
    """DeiT-Tiny shape: 224px, patch 16, D=192, 3 heads, 12 layers, 1000 classes."""
    return ModelConfig(image_size=224, patch_size=16, channels=3, dim=192, heads=3, depth=12,
                       num_classes=1000, tosa_layers=tosa_layers, ratio=ratio, scope=scope)


def scope_reductions(config: ModelConfig, convention: str = "mac",
                     include_selector: bool = True) -> dict[str, float]:
    """Reduction vs. the all-standard model under every skip scope."""
    return {s.value: model_cost(config, convention, include_selector, scope=s).reduction for s in SkipScope}
