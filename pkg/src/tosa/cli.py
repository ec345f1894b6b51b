"""Experiment runner: ``tosa run|eval|visualize|report|cost``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigFileError, RunConfig, load_run_config, render_config, with_overrides
from .costmodel import model_cost
from .data import DatasetError, centered_pattern_image, load_dataset, make_toy_dataset, save_dataset
from .model import CheckpointError, ModelState, init_model, load_checkpoint, save_checkpoint
from .numerics import ConfigError
from .selector import selection_k
from .training import (
    MetricLog, TrainingDiverged, accuracy, finetune, pretrain, train_dense_head, train_selectors,
)
from .visualize import visualize

log = logging.getLogger("tosa")

CHECKPOINTS = {"pretrain": "pretrain.ckpt", "selector": "selector.ckpt", "finetune": "finetune.ckpt"}


class PhaseError(RuntimeError):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- run


def _progress(out: Path) -> list[str]:
    p = out / "progress.json"
    return json.loads(p.read_text())["completed"] if p.exists() else []


def _record_time(out: Path, phase: str, seconds: float) -> None:
    path = out / "timing.json"
    timing = json.loads(path.read_text()) if path.exists() else {}
    timing[phase] = seconds
    _dump(path, timing)


def _mark_done(out: Path, phase: str) -> None:
    done = _progress(out)
    if phase not in done:
        done.append(phase)
    _dump(out / "progress.json", {"completed": done})


def _datasets(cfg: RunConfig, out: Path):
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if cfg.data.seed is None else cfg.data.seed
    m = cfg.model
    loaded = {}
    for split, size, given in (("train", cfg.data.train_size, cfg.data.train_file),
                               ("test", cfg.data.test_size, cfg.data.test_file)):
        path = Path(given) if given else data_dir / f"{split}.tsds"
        if not path.exists():
            if given:
                raise DatasetError(f"dataset file {given} does not exist")
            save_dataset(make_toy_dataset(size, seed, m.image_size, m.patch_size, m.channels, split), path)
        loaded[split] = load_dataset(path)
    return loaded["train"], loaded["test"]


def run_pipeline(cfg: RunConfig, only: str | None = None) -> dict:
    """Execute the configured phases, skipping any already recorded as complete in the output directory."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(render_config(cfg))
    train, test = _datasets(cfg, out)
    done = _progress(out)
    phases = [only] if only else list(cfg.phases)
    results = {}
    for phase in phases:
        if phase in done and not only:
            log.info("phase %s already complete; skipping", phase)
            continue
        log.info("running phase %s", phase)
        start = time.perf_counter()
        results[phase] = _run_phase(phase, cfg, out, train, test)
        _record_time(out, phase, time.perf_counter() - start)
        _mark_done(out, phase)
    _dump(out / "cost.json", {"flop": model_cost(cfg.model, "flop").to_dict(),
                              "mac": model_cost(cfg.model, "mac").to_dict()})
    return results


def _need(out: Path, phase: str, model_cfg) -> ModelState:
    path = out / CHECKPOINTS[phase]
    if not path.exists():
        raise PhaseError(f"missing {path}; run phase {phase!r} first")
    return load_checkpoint(path, {"ratio": model_cfg.ratio, "scope": model_cfg.scope})


def _run_phase(phase, cfg: RunConfig, out: Path, train, test):
    tcfg = cfg.phase_config(phase) if phase != "eval" else None
    metrics_path = out / "metrics.csv"
    if phase == "pretrain":
        state = init_model(cfg.model, cfg.seed)
        state, metrics = pretrain(state, tcfg, train)
        metrics.write_csv(metrics_path)
        save_checkpoint(state, out / CHECKPOINTS[phase])
        return {"train_accuracy": metrics.rows[-1][4]}
    if phase == "selector":
        state = _need(out, "pretrain", cfg.model)
        state, metrics, report = train_selectors(state, tcfg, train, probe=test.images[: tcfg.batch_size])
        metrics.write_csv(metrics_path)
        save_checkpoint(state, out / CHECKPOINTS[phase])
        summary = {"initial_kld": report.initial_kld, "final_kld": report.final_kld,
                   "backbone_unchanged": report.backbone_unchanged, "warning": report.warning}
        _dump(out / "selector_report.json", summary)
        return summary
    if phase == "finetune":
        state = _need(out, "selector", cfg.model)
        state, metrics = finetune(state, tcfg, train)
        metrics.write_csv(metrics_path)
        save_checkpoint(state, out / CHECKPOINTS[phase])
        return {"train_accuracy": metrics.rows[-1][4]}
    if phase == "eval":
        summary = evaluate_run(out, test, cfg)
        _dump(out / "eval.json", summary)
        return summary
    if phase == "dense":
        results = {}
        for name, ckpt, use_tosa in (("baseline", "pretrain", False), ("tosa", "finetune", True)):
            state = _need(out, ckpt, cfg.model)
            _, metrics, rep = train_dense_head(state, tcfg, train, test, use_tosa=use_tosa)
            if use_tosa:
                save_checkpoint(state, out / "dense.ckpt")
            MetricLog([(f"dense-{name}",) + r[1:] for r in metrics.rows]).write_csv(metrics_path)
            results[name] = {"train_mse": rep.train_mse, "test_mse": rep.test_mse,
                             "backbone_unchanged": rep.backbone_unchanged}
        results["ratio"] = results["tosa"]["test_mse"] / results["baseline"]["test_mse"]
        _dump(out / "dense.json", results)
        return results
    raise PhaseError(f"unknown phase {phase!r}")


def evaluate_run(out: Path, test, cfg: RunConfig) -> dict:
    summary = {}
    if (out / CHECKPOINTS["pretrain"]).exists():
        summary["baseline_accuracy"] = accuracy(_need(out, "pretrain", cfg.model), test, use_tosa=False)
    if (out / CHECKPOINTS["finetune"]).exists():
        summary["tosa_accuracy"] = accuracy(_need(out, "finetune", cfg.model), test, use_tosa=True)
    return summary


# ---------------------------------------------------------------- report


def build_report(state: ModelState, baseline: ModelState | None, test) -> dict:
    """Desk-scale analogue of a baseline-vs-ToSA results table."""
    cfg = state.config
    tosa_mac = model_cost(cfg, "mac")
    tosa_flop = model_cost(cfg, "flop")
    base_state = baseline if baseline is not None else state
    k = selection_k(cfg.tokens, cfg.ratio, 1)
    rows = [
        {"model": "baseline", "accuracy": accuracy(base_state, test, use_tosa=False),
         "flops": tosa_flop.baseline_total, "macs": tosa_mac.baseline_total, "reduction_pct": 0.0,
         "attended_tokens": {str(i): cfg.tokens for i in cfg.tosa_layers}},
        {"model": "tosa", "accuracy": accuracy(state, test, use_tosa=True),
         "flops": tosa_flop.total, "macs": tosa_mac.total, "reduction_pct": 100.0 * tosa_flop.reduction,
         "mac_reduction_pct": 100.0 * tosa_mac.reduction,
         "attended_tokens": {str(i): k for i in cfg.tosa_layers}},
    ]
    return {"tokens": cfg.tokens, "ratio": cfg.ratio, "scope": cfg.scope.value,
            "tosa_layers": list(cfg.tosa_layers), "rows": rows}


def format_report(report: dict) -> str:
    lines = [f"{'model':<10}{'acc %':>8}{'GFLOPs':>10}{'GMACs':>10}{'reduction %':>13}  tokens attended"]
    for row in report["rows"]:
        toks = ", ".join(f"L{i}:{n}/{report['tokens']}" for i, n in row["attended_tokens"].items())
        lines.append(f"{row['model']:<10}{100 * row['accuracy']:>8.2f}{row['flops'] / 1e9:>10.4f}"
                     f"{row['macs'] / 1e9:>10.4f}{row['reduction_pct']:>13.2f}  {toks}")
    return "\n".join(lines)


# ------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tosa", description="Token-selective attention experiments")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="run configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output (run) directory")
        sp.add_argument("--ratio", type=float, help="attention ratio override")
        sp.add_argument("--skip-scope", choices=["attention_only", "attention_and_proj", "full_layer"])
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("run", help="run training phases")
    common(sp, config_required=True)
    sp.add_argument("--phase", choices=["pretrain", "selector", "finetune", "eval", "dense"],
                    help="run only this phase (prerequisites must exist)")

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="TSDS test file (default: <out>/data/test.tsds)")
    sp.add_argument("--standard", action="store_true", help="run every layer as a standard layer")

    sp = sub.add_parser("visualize", help="write token-selection masks as PGM images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", help=".npy (C, H, W) normalized image, or a TSDS file with --index; "
                                    "default: a centered toy pattern")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--blend", action="store_true", help="blend masks 50/50 with the input")

    sp = sub.add_parser("report", help="baseline vs ToSA accuracy and cost")
    common(sp)
    sp.add_argument("--checkpoint", help="ToSA checkpoint (default: <out>/finetune.ckpt)")
    sp.add_argument("--baseline", help="standard checkpoint (default: <out>/pretrain.ckpt)")
    sp.add_argument("--data", help="TSDS test file (default: <out>/data/test.tsds)")

    sp = sub.add_parser("cost", help="analytic FLOP report as JSON")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--convention", choices=["flop", "mac"], default="flop")
    sp.add_argument("--no-selector", action="store_true", help="exclude selector cost")
    return p


def _overrides(args) -> dict:
    o = {}
    if args.ratio is not None:
        o["ratio"] = args.ratio
    if args.skip_scope is not None:
        o["scope"] = args.skip_scope
    return o


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        return Path(load_run_config(args.config).out)
    raise ConfigError("--out or --config is required")


def _test_split(args) -> "object":
    path = Path(args.data) if getattr(args, "data", None) else _out_dir(args) / "data" / "test.tsds"
    if not path.exists():
        raise DatasetError(f"no evaluation split at {path}")
    return load_dataset(path)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigFileError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, DatasetError, PhaseError, TrainingDiverged, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.verb == "run":
        cfg = with_overrides(load_run_config(args.config), args.seed, args.out, args.ratio, args.skip_scope)
        results = run_pipeline(cfg, only=args.phase)
        print(json.dumps(results, indent=2, sort_keys=True))
        return 0

    if args.verb == "eval":
        ckpt = Path(args.checkpoint) if args.checkpoint else _out_dir(args) / CHECKPOINTS["finetune"]
        state = load_checkpoint(ckpt, _overrides(args))
        acc = accuracy(state, _test_split(args), use_tosa=not args.standard)
        print(json.dumps({"checkpoint": str(ckpt), "accuracy": acc}, sort_keys=True))
        return 0

    if args.verb == "visualize":
        state = load_checkpoint(args.checkpoint, _overrides(args))
        cfg = state.config
        if args.image is None:
            image, _ = centered_pattern_image(cfg.image_size, cfg.channels)
        elif args.image.endswith(".npy"):
            image = np.load(args.image)
        else:
            image = load_dataset(args.image).images[args.index]
        out = Path(args.out or "masks")
        masks = visualize(state, image, out, blend=args.blend)
        print(json.dumps({str(layer): {"k": masks.k[layer],
                                       "attended_patches": [int(m.sum()) for m in masks.patches[layer]]}
                          for layer in masks.patches}, sort_keys=True))
        return 0

    if args.verb == "report":
        run = Path(args.out) if args.out else (_out_dir(args) if args.config else None)
        ckpt = Path(args.checkpoint) if args.checkpoint else (run / CHECKPOINTS["finetune"] if run else None)
        if ckpt is None:
            raise ConfigError("report needs --checkpoint or a run directory (--out/--config)")
        base_path = Path(args.baseline) if args.baseline else (run / CHECKPOINTS["pretrain"] if run else None)
        state = load_checkpoint(ckpt, _overrides(args))
        baseline = load_checkpoint(base_path) if base_path and base_path.exists() else None
        test = _test_split(args) if (args.data or run) else None
        if test is None:
            raise DatasetError("report needs an evaluation split (--data or a run directory)")
        report = build_report(state, baseline, test)
        if run:
            _dump(run / "report.json", report)
        print(format_report(report))
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0

    if args.verb == "cost":
        if args.checkpoint:
            model_cfg = load_checkpoint(args.checkpoint, _overrides(args)).config
        elif args.config:
            cfg = with_overrides(load_run_config(args.config), ratio=args.ratio, scope=args.skip_scope)
            model_cfg = cfg.model
        else:
            raise ConfigError("cost needs --config or --checkpoint")
        print(model_cost(model_cfg, args.convention, include_selector=not args.no_selector).to_json())
        return 0
    raise ConfigError(f"unknown verb {args.verb}")


if __name__ == "__main__":
    sys.exit(main())
