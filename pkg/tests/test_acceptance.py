"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records a single PASS/FAIL line (shown in the terminal summary and
printed to stdout). Criteria 4, 5, 7 and 8 share one trained toy pipeline per
seed; the pipelines run once per session through the CLI runner.
"""

import dataclasses
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from tosa import numerics as nx
from tosa.attention import block_forward, init_block
from tosa.cli import main, run_pipeline
from tosa.config import load_run_config, with_overrides
from tosa.costmodel import deit_tiny_config, model_cost
from tosa.data import load_dataset
from tosa.model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from tosa.numerics import Tensor, check_gradients
from tosa.params import named_tensors, set_requires_grad, snapshot
from tosa.selector import init_selector, predict_attention, select_tokens, selection_k, selector_loss
from tosa.tosa_layer import SkipScope, ToSALayerParams, tosa_attention
from tosa.visualize import read_pgm

TOY_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy.cfg"
SEEDS = (0, 1, 2)


def half_up(ratio, length):
    """Round ``ratio * length`` half up, exactly on the ratio as written (0.7 * 65 -> 46)."""
    return math.floor(Fraction(str(ratio)) * length + Fraction(1, 2))


def record(log, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    log.append(line)
    print(line)
    return ok


@pytest.fixture(scope="session")
def pipelines(tmp_path_factory):
    """Full toy pipeline (pretrain, selector, finetune, eval, dense) for each seed, with wall times."""
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in SEEDS:
        cfg = with_overrides(load_run_config(TOY_CONFIG), seed=seed, out=str(root / f"seed{seed}"))
        start = time.perf_counter()
        run_pipeline(cfg)
        runs[seed] = (cfg, Path(cfg.out), time.perf_counter() - start)
    return runs


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_full_ratio_bit_identical(acceptance_log, rng):
    start = time.perf_counter()
    cfg = ModelConfig(ratio=1.0)
    state = init_model(cfg, seed=11)
    images = rng.standard_normal((100, cfg.channels, cfg.image_size, cfg.image_size))
    with nx.no_grad():
        ref = forward(images, state, use_tosa=False).data
        same = all(np.array_equal(forward(images, state, scope=s).data, ref) for s in SkipScope)
    elapsed = time.perf_counter() - start
    ok = same and elapsed < 60
    assert record(acceptance_log, 1, ok, f"100 inputs, 3 scopes, bit-identical={same}, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------- criterion 2


def _block_case(r):
    p = init_block(r, 4, 2)
    set_requires_grad(p, True)
    x = Tensor(r.standard_normal((2, 3, 4)), requires_grad=True)
    w = Tensor(r.standard_normal((2, 3, 4)))
    return lambda: nx.sum(nx.mul(block_forward(x, p)[0], w)), [x] + [t for _, t in named_tensors(p)]


def _selector_case(r):
    sel = init_selector(r, heads=2, hidden=3)
    for _, t in named_tensors(sel):
        t.data[...] = r.standard_normal(t.shape) * 0.5
    set_requires_grad(sel, True)
    b = Tensor(r.standard_normal((2, 5, 5)), requires_grad=True)
    target = r.dirichlet(np.ones(5), size=(2, 5))
    return lambda: selector_loss(predict_attention(b, sel), target), [b] + [t for _, t in named_tensors(sel)]


def _tosa_case(r):
    scope = list(SkipScope)[int(r.integers(3))]
    p = ToSALayerParams(init_block(r, 4, 2), init_selector(r, 2), 0.6, scope)
    set_requires_grad(p.block, True)
    x = Tensor(r.standard_normal((5, 4)), requires_grad=True)
    plan = select_tokens(r.standard_normal((2, 5)), 0.6, forced=(0,))
    w = Tensor(r.standard_normal((5, 4)))
    return lambda: nx.sum(nx.mul(tosa_attention(x, p, plan)[0], w)), [x] + [t for _, t in named_tensors(p.block)]


def _kld_case(r):
    logits = Tensor(r.standard_normal((3, 6, 6)), requires_grad=True)
    target = r.dirichlet(np.ones(6), size=(3, 6))
    return lambda: selector_loss(nx.log_softmax(logits), target), [logits]


def test_criterion_2_gradient_suite(acceptance_log):
    start = time.perf_counter()
    worst = {}
    for name, case in (("block", _block_case), ("selector", _selector_case), ("tosa", _tosa_case),
                       ("kld", _kld_case)):
        worst[name] = max(check_gradients(*case(np.random.default_rng(seed)), tol=1e-5).max_rel_error
                          for seed in range(20))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(acceptance_log, 2, ok, f"20 seeds each, worst rel err: {detail}; {elapsed:.1f}s < 300s")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_token_preservation(acceptance_log, rng):
    start = time.perf_counter()
    cfg = ModelConfig()
    state = init_model(cfg, seed=5)
    images = rng.standard_normal((4, cfg.channels, cfg.image_size, cfg.image_size))
    L = cfg.tokens
    failures = []
    with nx.no_grad():
        for r in (0.5, 0.7, 0.8, 1.0):
            for scope in SkipScope:
                feats, trace = forward(images, state, "features", ratio=r, scope=scope)
                if feats.shape != (4, L, cfg.dim):
                    failures.append(f"rows r={r} {scope.value}")
                for layer, plan in trace.plans.items():
                    try:
                        plan.validate(forced=(0,))
                    except ValueError as e:
                        failures.append(f"{e} r={r} layer {layer}")
                    if plan.attended.shape[-1] != max(1, half_up(r, L)) or plan.k != selection_k(L, r):
                        failures.append(f"K r={r} layer {layer}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    assert record(acceptance_log, 3, ok, f"4 ratios x 3 scopes, failures={failures or 0}, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_selector_distillation(acceptance_log, pipelines):
    cfg, out, _ = pipelines[0]
    report = json.loads((out / "selector_report.json").read_text())
    ratio = report["final_kld"] / report["initial_kld"]
    elapsed = _phase_seconds(out, ("pretrain", "selector"))
    ok = ratio < 0.5 and report["backbone_unchanged"] and elapsed < 900
    assert record(acceptance_log, 4, ok,
                  f"held-out KLD {report['initial_kld']:.3f} -> {report['final_kld']:.3f} "
                  f"(ratio {ratio:.3f}, need < 0.5), backbone unchanged={report['backbone_unchanged']}, "
                  f"{elapsed:.0f}s < 900s")


def _phase_seconds(out: Path, phases) -> float:
    timing = json.loads((out / "timing.json").read_text())
    return sum(timing[p] for p in phases)


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_accuracy_and_flops(acceptance_log, pipelines):
    lines, ok = [], True
    total = 0.0
    for seed, (cfg, out, _) in pipelines.items():
        ev = json.loads((out / "eval.json").read_text())
        drop = 100 * (ev["baseline_accuracy"] - ev["tosa_accuracy"])
        ok &= drop <= 2.0
        lines.append(f"seed {seed}: base {100 * ev['baseline_accuracy']:.1f} tosa {100 * ev['tosa_accuracy']:.1f}")
        total += _phase_seconds(out, ("pretrain", "selector", "finetune", "eval"))
    cfg = pipelines[0][0].model
    report = model_cost(cfg, "flop")
    base = model_cost(cfg, "flop", all_standard=True)
    L, K = cfg.tokens, selection_k(cfg.tokens, cfg.ratio, 1)
    expected = 1 - (K / L) ** 2
    for i in cfg.tosa_layers:
        got = 1 - report.layers[i].components["attn_matmuls"] / base.layers[i].components["attn_matmuls"]
        ok &= abs(got - expected) < 1e-12
    ok &= total < 45 * 60
    assert record(acceptance_log, 5, ok,
                  f"{'; '.join(lines)}; attn-matmul reduction {100 * got:.2f}% = 1-(K/L)^2 "
                  f"with K={K}, L={L}; {total:.0f}s < 2700s")


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_cost_model(acceptance_log):
    start = time.perf_counter()
    base = model_cost(deit_tiny_config(), "mac", all_standard=True)
    within = abs(base.total / 1.3e9 - 1) < 0.15
    zero = all(model_cost(deit_tiny_config(1.0, s), "mac", include_selector=False).reduction == 0.0
               for s in SkipScope)
    monotone = True
    additive = True
    for s in SkipScope:
        for sel in (True, False):
            reds = [model_cost(deit_tiny_config(r, s), "mac", sel).reduction for r in np.linspace(0.1, 1.0, 10)]
            monotone &= all(a >= b for a, b in zip(reds, reds[1:]))
        rep = model_cost(deit_tiny_config(0.8, s), "flop")
        additive &= sum(rep.components.values()) == rep.total == sum(x.total for x in rep.layers)
    elapsed = time.perf_counter() - start
    ok = within and zero and monotone and additive and elapsed < 1.0
    assert record(acceptance_log, 6, ok,
                  f"DeiT-Tiny {base.total / 1e9:.3f} GMAC vs 1.3 (15%), zero at r=1={zero}, "
                  f"monotone={monotone}, additive={additive}, {elapsed:.2f}s < 1s")


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_dense_usability(acceptance_log, pipelines):
    ok, lines, total = True, [], 0.0
    for seed, (cfg, out, _) in pipelines.items():
        dense = json.loads((out / "dense.json").read_text())
        ratio = dense["tosa"]["test_mse"] / dense["baseline"]["test_mse"]
        ok &= ratio <= 1.2 and dense["tosa"]["backbone_unchanged"] and dense["baseline"]["backbone_unchanged"]
        lines.append(f"seed {seed}: {ratio:.3f}")
        total += _phase_seconds(out, ("dense",))
    cfg, out, _ = pipelines[0]
    state = load_checkpoint(out / "dense.ckpt")
    test = load_dataset(out / "data" / "test.tsds")
    with nx.no_grad():
        pred = forward(test.images[:8], state, "dense").data
    every_patch = pred.shape == (8, cfg.model.num_patches) and np.isfinite(pred).all()
    ok &= every_patch and total < 20 * 60
    assert record(acceptance_log, 7, ok, f"MSE ratio tosa/standard (need <= 1.2): {', '.join(lines)}; "
                                         f"prediction at all {cfg.model.num_patches} patches={every_patch}; "
                                         f"dense phases {total:.0f}s < 1200s")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_determinism_and_persistence(acceptance_log, pipelines, tmp_path):
    cfg, out, _ = pipelines[0]
    # same (seed, config) twice: identical metric logs
    logs = []
    for name in ("a", "b"):
        rerun = with_overrides(cfg, out=str(tmp_path / name))
        run_pipeline(_short(rerun))
        logs.append((tmp_path / name / "metrics.csv").read_bytes())
    deterministic = logs[0] == logs[1]
    state = load_checkpoint(out / "finetune.ckpt")
    save_checkpoint(state, tmp_path / "copy.ckpt")
    roundtrip = ((tmp_path / "copy.ckpt").read_bytes() == (out / "finetune.ckpt").read_bytes()
                 and snapshot(dict(load_checkpoint(tmp_path / "copy.ckpt").named())) == snapshot(dict(state.named())))
    masks = tmp_path / "masks"
    code = main(["visualize", "--checkpoint", str(out / "finetune.ckpt"), "--ratio", "1.0", "--out", str(masks)])
    light = code == 0 and all(np.all(read_pgm(p) == 255) for p in masks.glob("*.pgm"))
    n_masks = len(list(masks.glob("*.pgm")))
    ok = deterministic and roundtrip and light and n_masks == 3 * (cfg.model.heads + 1)
    assert record(acceptance_log, 8, ok, f"identical metric logs on a repeated short run={deterministic}, checkpoint bit-exact={roundtrip}, "
                                         f"r=1 masks all light={light} ({n_masks} files)")


def _short(cfg):
    """Same seed and model, fewer images and epochs, so the repeat run stays quick."""
    train = {p: dataclasses.replace(t, epochs=1) for p, t in cfg.train.items()}
    data = dataclasses.replace(cfg.data, train_size=128, test_size=64)
    return dataclasses.replace(cfg, train=train, data=data)
