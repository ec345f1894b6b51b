"""Run configuration files: ``[section]`` headers and flat ``key = value`` lines.

``#`` starts a comment. Every error names the file and line it came from.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .numerics import ConfigError
from .training import TrainConfig
from .tosa_layer import SkipScope

PHASES = ("pretrain", "selector", "finetune", "eval", "dense")
TRAIN_PHASES = ("pretrain", "selector", "finetune", "dense")

_MODEL_KEYS = {
    "image_size": int, "patch_size": int, "channels": int, "dim": int, "heads": int, "depth": int,
    "num_classes": int, "tosa_layers": "intlist", "ratio": float, "scope": str,
    "selector_hidden": int, "selector_width": int,
}
_TRAIN_KEYS = {"epochs": int, "batch_size": int, "lr": float, "weight_decay": float, "optimizer": str,
               "seed": int}
_DATA_KEYS = {"train_size": int, "test_size": int, "train_file": str, "test_file": str, "seed": int}
_RUN_KEYS = {"seed": int, "out": str, "phases": "strlist", "report_formats": "strlist"}

SCHEMA = {"model": _MODEL_KEYS, "data": _DATA_KEYS, "run": _RUN_KEYS,
          **{p: _TRAIN_KEYS for p in TRAIN_PHASES}}


class ConfigFileError(ConfigError):
    """Invalid run configuration, anchored to a file and line."""


@dataclass
class DataSpec:
    train_size: int = 1024
    test_size: int = 512
    train_file: str | None = None
    test_file: str | None = None
    seed: int | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict[str, TrainConfig] = field(default_factory=dict)
    data: DataSpec = field(default_factory=DataSpec)
    seed: int = 0
    out: str = "runs/toy"
    phases: tuple[str, ...] = PHASES
    report_formats: tuple[str, ...] = ("json", "text")

    def phase_config(self, phase: str) -> TrainConfig:
        return self.train.get(phase) or TrainConfig(phase, seed=self.seed)


def _convert(kind, raw: str, where: str, key: str):
    try:
        if kind == "intlist":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "strlist":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind is str:
            return raw
        return kind(raw)
    except ValueError:
        raise ConfigFileError(f"{where}: bad value {raw!r} for key {key!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, tuple[object, int]]]:
    """Parse into ``{section: {key: (value, line)}}`` with schema checks."""
    sections: dict[str, dict[str, tuple[object, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        where = f"{source}:{lineno}"
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigFileError(f"{where}: malformed section header {line!r}")
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigFileError(f"{where}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigFileError(f"{where}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigFileError(f"{where}: key outside of any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[current]:
            raise ConfigFileError(f"{where}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigFileError(f"{where}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (_convert(SCHEMA[current][key], value, where, key), lineno)
    return sections


def _build(factory, values: dict, source: str, section: str, **extra):
    kwargs = {k: v for k, (v, _) in values.items()}
    kwargs.update(extra)
    try:
        return factory(**kwargs)
    except (ConfigError, ValueError, TypeError) as e:
        line = min((ln for _, ln in values.values()), default=0)
        raise ConfigFileError(f"{source}:{line}: invalid [{section}] section: {e}") from None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return config_from_text(path.read_text(), str(path))


def config_from_text(text: str, source: str = "<config>") -> RunConfig:
    sections = parse_config_text(text, source)
    run_vals = {k: v for k, (v, _) in sections.get("run", {}).items()}
    seed = run_vals.get("seed", 0)
    model = _build(ModelConfig, sections.get("model", {}), source, "model")
    train = {}
    for phase in TRAIN_PHASES:
        vals = dict(sections.get(phase, {}))
        extra = {"phase": phase}
        if "seed" not in vals:
            extra["seed"] = seed
        train[phase] = _build(TrainConfig, vals, source, phase, **extra)
    data = _build(DataSpec, sections.get("data", {}), source, "data")
    phases = run_vals.get("phases", PHASES)
    _check_phase_order(phases, f"{source}:{sections.get('run', {}).get('phases', (None, 0))[1]}")
    return RunConfig(model, train, data, seed, run_vals.get("out", "runs/toy"), tuple(phases),
                     tuple(run_vals.get("report_formats", ("json", "text"))))


def _check_phase_order(phases, where: str) -> None:
    unknown = [p for p in phases if p not in PHASES]
    if unknown:
        raise ConfigFileError(f"{where}: unknown phase(s) {unknown}; expected a subset of {list(PHASES)}")
    positions = [PHASES.index(p) for p in phases]
    if positions != sorted(set(positions)):
        raise ConfigFileError(f"{where}: phases must appear once each, in the order {list(PHASES)}")


def with_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None,
                   ratio: float | None = None, scope: str | None = None) -> RunConfig:
    model = cfg.model
    if ratio is not None:
        model = model.replace(ratio=ratio)
    if scope is not None:
        model = model.replace(scope=SkipScope(scope))
    train = cfg.train
    if seed is not None:
        train = {p: dataclasses.replace(t, seed=seed) for p, t in cfg.train.items()}
    return dataclasses.replace(cfg, model=model, train=train,
                               seed=cfg.seed if seed is None else seed, out=cfg.out if out is None else out)


def render_config(cfg: RunConfig) -> str:
    """Effective configuration as text that :func:`config_from_text` reads back to an equal RunConfig."""
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(str(x) for x in v)
        if isinstance(v, SkipScope):
            return v.value
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[run]", f"seed = {cfg.seed}", f"out = {cfg.out}", f"phases = {fmt(cfg.phases)}",
             f"report_formats = {fmt(cfg.report_formats)}", "", "[model]"]
    for f in dataclasses.fields(cfg.model):
        v = getattr(cfg.model, f.name)
        if v is not None:
            lines.append(f"{f.name} = {fmt(v)}")
    lines += ["", "[data]"]
    for f in dataclasses.fields(cfg.data):
        v = getattr(cfg.data, f.name)
        if v is not None:
            lines.append(f"{f.name} = {fmt(v)}")
    for phase in TRAIN_PHASES:
        t = cfg.phase_config(phase)
        lines += ["", f"[{phase}]"]
        for key in _TRAIN_KEYS:
            lines.append(f"{key} = {fmt(getattr(t, key))}")
    return "\n".join(lines) + "\n"
