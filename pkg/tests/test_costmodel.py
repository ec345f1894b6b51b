import json

import numpy as np
import pytest

from tosa.costmodel import (
    COMPONENTS, GELU, LAYERNORM, SOFTMAX, deit_tiny_config, layer_flops, model_cost, scope_reductions,
    selector_cost,
)
from tosa.model import ModelConfig
from tosa.selector import selection_k
from tosa.tosa_layer import SkipScope


def standard_layer_flops(L, D, H):
    """Closed form for one pre-norm block, multiply-add = 2."""
    matmuls = 2 * (3 * L * D * D + 2 * L * L * D + 2 * L * D * D + 8 * L * D * D)
    norms = 2 * LAYERNORM * L * D
    attention = (SOFTMAX + 1) * H * L * L
    adds = 2 * L * D + 2 * L * D                 # F bias + residual, MLP output bias + residual
    hidden = 4 * L * D * (1 + GELU)
    return matmuls + norms + attention + adds + hidden


@pytest.mark.parametrize("L,D,H", [(65, 64, 4), (197, 192, 3), (10, 8, 2)])
def test_standard_layer_closed_form(L, D, H):
    assert sum(layer_flops(L, D, H).values()) == standard_layer_flops(L, D, H)


@pytest.mark.parametrize("scope", list(SkipScope))
def test_full_ratio_tosa_matches_standard(scope):
    std = layer_flops(65, 64, 4)
    tosa = layer_flops(65, 64, 4, "tosa", 1.0, scope)
    assert {k: v for k, v in tosa.items() if k != "selector"} == {k: v for k, v in std.items() if k != "selector"}
    assert tosa["selector"] > 0
    assert layer_flops(65, 64, 4, "tosa", 1.0, scope, include_selector=False) == std


@pytest.mark.parametrize("convention", ["flop", "mac"])
@pytest.mark.parametrize("ratio", [0.5, 0.7, 0.8])
def test_attention_matmuls_shrink_quadratically(convention, ratio):
    L = 65
    k = selection_k(L, ratio, 1)
    std = layer_flops(L, 64, 4, convention=convention)["attn_matmuls"]
    tosa = layer_flops(L, 64, 4, "tosa", ratio, convention=convention)["attn_matmuls"]
    assert tosa * L * L == std * k * k


def test_scope_ordering():
    by_scope = [sum(layer_flops(65, 64, 4, "tosa", 0.8, s).values()) for s in SkipScope]
    assert by_scope[0] > by_scope[1] > by_scope[2]


def test_components_are_additive():
    report = model_cost(ModelConfig())
    assert sum(report.components.values()) == report.total
    assert sum(layer.total for layer in report.layers) == report.total
    for layer in report.layers:
        assert set(layer.components) == set(COMPONENTS)


def test_reduction_zero_at_full_ratio():
    cfg = deit_tiny_config(ratio=1.0)
    assert model_cost(cfg, include_selector=False).reduction == 0.0
    assert model_cost(cfg, all_standard=True).reduction == 0.0


@pytest.mark.parametrize("scope", list(SkipScope))
@pytest.mark.parametrize("include_selector", [True, False])
def test_reduction_monotone_in_ratio(scope, include_selector):
    ratios = np.linspace(0.05, 1.0, 40)
    red = [model_cost(deit_tiny_config(r, scope), "mac", include_selector).reduction for r in ratios]
    assert all(a >= b for a, b in zip(red, red[1:]))


def test_deit_tiny_macs_near_published_total():
    total = model_cost(deit_tiny_config(), "mac", all_standard=True).total
    assert abs(total / 1.3e9 - 1.0) < 0.15


def test_selector_cost_mac_formula():
    assert selector_cost(10, 2, 8, 3, "mac") == 2 * 10 * 10 * 8 * 2 * 3
    assert selector_cost(10, 2, 8, 3, "flop") > 2 * selector_cost(10, 2, 8, 3, "mac")


def test_bad_arguments():
    with pytest.raises(ValueError):
        layer_flops(10, 8, 2, kind="sparse")
    with pytest.raises(ValueError):
        model_cost(ModelConfig(), convention="bytes")


def test_report_json_is_stable():
    a = model_cost(ModelConfig()).to_json()
    assert a == model_cost(ModelConfig()).to_json()
    data = json.loads(a)
    assert [layer["kind"] for layer in data["layers"]] == ["embed", "standard", "tosa", "standard", "tosa",
                                                           "standard", "tosa", "head"]


def test_scope_reductions_keys():
    red = scope_reductions(deit_tiny_config())
    assert set(red) == {s.value for s in SkipScope}
    assert red["full_layer"] > red["attention_and_proj"] > red["attention_only"]


def test_activation_memory_shrinks_with_ratio():
    full = model_cost(deit_tiny_config(ratio=1.0, scope=SkipScope.FULL_LAYER))
    half = model_cost(deit_tiny_config(ratio=0.5, scope=SkipScope.FULL_LAYER))
    for a, b in zip(full.layers, half.layers):
        if a.kind == "tosa":
            assert b.activation_bytes < a.activation_bytes
        else:
            assert b.activation_bytes == a.activation_bytes
