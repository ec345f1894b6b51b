"""Vision transformer with a schedule of standard and token-selective layers."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionArtifacts, BlockParams, block_forward, init_block
from .numerics import ConfigError, ShapeError, Tensor
from .params import fan_in, make_rng, named_tensors, normal, ones, zeros
from .selector import SelectionPlan, SelectorParams, check_ratio, init_selector
from .tosa_layer import SkipScope, ToSALayerParams, plan_from_maps, tosa_attention

CLS_INDEX = 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    heads: int = 4
    depth: int = 6
    num_classes: int = 4
    tosa_layers: tuple[int, ...] = (2, 4, 6)
    ratio: float = 0.8
    scope: SkipScope = SkipScope.ATTENTION_ONLY
    selector_hidden: int | None = None
    selector_width: int = 3

    def __post_init__(self):
        object.__setattr__(self, "tosa_layers", tuple(sorted(int(i) for i in self.tosa_layers)))
        object.__setattr__(self, "scope", SkipScope(self.scope))
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        check_ratio(self.ratio)
        if self.selector_width % 2 == 0:
            raise ConfigError(f"selector kernel width must be odd, got {self.selector_width}")
        layers = set(self.tosa_layers)
        if len(layers) != len(self.tosa_layers):
            raise ConfigError("duplicate ToSA layer index")
        for i in self.tosa_layers:
            if not 2 <= i <= self.depth:
                raise ConfigError(f"ToSA layer {i} outside [2, {self.depth}]")
            if i - 1 in layers:
                raise ConfigError(f"ToSA layer {i} must follow a standard layer, but layer {i - 1} is ToSA")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def hidden(self) -> int:
        return 4 * self.heads if self.selector_hidden is None else self.selector_hidden

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tosa_layers"] = list(self.tosa_layers)
        d["scope"] = self.scope.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# keys that change parameter shapes; the rest (ratio, scope) may be overridden at load time
STRUCTURAL_KEYS = ("image_size", "patch_size", "channels", "dim", "heads", "depth", "num_classes",
                   "tosa_layers", "selector_hidden", "selector_width")


@dataclass
class ModelState:
    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams]
    selectors: dict[int, SelectorParams]
    norm_g: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor
    dense_w: Tensor | None = None
    dense_b: Tensor | None = None

    def named(self):
        """Named parameters, config excluded."""
        for f in dataclasses.fields(self):
            if f.name == "config":
                continue
            yield from named_tensors(getattr(self, f.name), f.name)

    def backbone(self) -> list:
        """Everything except selectors and the dense head."""
        return [self.patch_w, self.patch_b, self.cls_token, self.pos_embed, self.blocks,
                self.norm_g, self.norm_b, self.head_w, self.head_b]

    def tosa_params(self, layer: int, ratio: float | None = None,
                    scope: SkipScope | None = None) -> ToSALayerParams:
        return ToSALayerParams(self.blocks[layer - 1], self.selectors[layer],
                               self.config.ratio if ratio is None else ratio,
                               self.config.scope if scope is None else scope)


def parameter_count(config: ModelConfig, dense_head: bool = False) -> int:
    d, p2c = config.dim, config.channels * config.patch_size ** 2
    block = 3 * d * d + 2 * d * d + d + 4 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    sel = config.hidden * config.heads * config.selector_width * 2 + config.hidden + config.heads
    total = p2c * d + d + d + config.tokens * d + config.depth * block
    total += len(config.tosa_layers) * sel + 2 * d + d * config.num_classes + config.num_classes
    return total + (d + 1 if dense_head else 0)


def init_model(config: ModelConfig, seed: int = 0, dense_head: bool = False) -> ModelState:
    rng = make_rng(seed)
    d = config.dim
    p2c = config.channels * config.patch_size ** 2
    state = ModelState(
        config=config,
        patch_w=fan_in(rng, (p2c, d), p2c),
        patch_b=zeros(d),
        cls_token=normal(rng, (d,), 0.02),
        pos_embed=normal(rng, (config.tokens, d), 0.02),
        blocks=[init_block(rng, d, config.heads) for _ in range(config.depth)],
        selectors={i: init_selector(rng, config.heads, config.hidden, config.selector_width)
                   for i in config.tosa_layers},
        norm_g=ones(d), norm_b=zeros(d),
        head_w=fan_in(rng, (d, config.num_classes), d),
        head_b=zeros(config.num_classes),
    )
    if dense_head:
        add_dense_head(state, seed)
    return state


def add_dense_head(state: ModelState, seed: int = 0) -> None:
    """Attach a zero-initialized per-token scalar regression head."""
    state.dense_w = zeros((state.config.dim, 1))
    state.dense_b = zeros(1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, P, C*patch*patch)``, patches in row-major grid order."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(n, gh * gw, c * patch * patch))


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W) images, got {arr.shape}")
    return arr, False


def embed(images, state: ModelState) -> Tensor:
    """Patch projection, class token prepended, positional embedding added: ``(N, L, D)``."""
    cfg = state.config
    arr, single = _as_batch(images)
    if arr.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image shape {arr.shape[1:]} does not match config "
                         f"{(cfg.channels, cfg.image_size, cfg.image_size)}")
    patches = nx.add(Tensor(patchify(arr, cfg.patch_size)) @ state.patch_w, state.patch_b)
    cls = nx.add(np.zeros((arr.shape[0], 1, cfg.dim)), state.cls_token)
    x = nx.add(nx.concat([cls, patches], axis=1), state.pos_embed)
    return x[0] if single else x


@dataclass
class ForwardTrace:
    """Per-layer artifacts from one forward pass."""

    artifacts: dict[int, AttentionArtifacts] = field(default_factory=dict)
    plans: dict[int, SelectionPlan] = field(default_factory=dict)
    predicted: dict[int, Tensor] = field(default_factory=dict)


def run_layers(x: Tensor, state: ModelState, use_tosa: bool = True, ratio: float | None = None,
               scope: SkipScope | None = None) -> tuple[Tensor, ForwardTrace]:
    cfg = state.config
    trace = ForwardTrace()
    prev = None
    for i, block in enumerate(state.blocks, start=1):
        if use_tosa and i in cfg.tosa_layers:
            params = state.tosa_params(i, ratio, scope)
            plan, predicted = plan_from_maps(prev.B, params.selector, params.ratio, forced=(CLS_INDEX,))
            x, art = tosa_attention(x, params, plan)
            trace.plans[i] = plan
            trace.predicted[i] = predicted
        else:
            x, art = block_forward(x, block)
        trace.artifacts[i] = art
        prev = art
    return x, trace


def forward(images, state: ModelState, mode: str = "classify", *, use_tosa: bool = True,
            ratio: float | None = None, scope: SkipScope | None = None):
    """Run the model.

    ``mode`` is ``"classify"`` (logits ``(N, classes)``), ``"dense"`` (one
    scalar per patch, ``(N, P)``) or ``"features"`` (normalized ``(N, L, D)``
    features and the :class:`ForwardTrace`). ``use_tosa=False`` runs every
    layer as a standard layer; ``ratio``/``scope`` override the config.
    """
    if mode not in ("classify", "dense", "features"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode == "dense" and state.dense_w is None:
        raise ConfigError("dense mode needs a dense head; train or attach one first")
    arr, single = _as_batch(images)
    x, trace = run_layers(embed(arr, state), state, use_tosa, ratio, scope)
    x = nx.layer_norm(x, state.norm_g, state.norm_b)
    if mode == "features":
        return (x[0] if single else x), trace
    if mode == "classify":
        out = nx.add(x[:, 0, :] @ state.head_w, state.head_b)
    else:
        out = nx.add(x[:, 1:, :] @ state.dense_w, state.dense_b)
        out = nx.reshape(out, out.shape[:-1])
    return out[0] if single else out


# ----------------------------------------------------------------- checkpoint

MAGIC = b"TOSA"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or inconsistent with what the caller expects."""


def save_checkpoint(state: ModelState, path) -> None:
    """Little-endian binary: magic, version, JSON config block, then named float64 records."""
    header = json.dumps({"model": state.config.to_dict(), "dense_head": state.dense_w is not None},
                        sort_keys=True).encode()
    records = list(state.named())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(records))]
    for name, t in records:
        raw = name.encode()
        chunks.append(struct.pack("<II", len(raw), t.ndim) + raw)
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path, overrides: dict | None = None) -> ModelState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``overrides`` may change ``ratio`` and ``scope``; structural keys must
    match the stored config or a :class:`CheckpointError` names the key.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a ToSA checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode())
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable config block: {e}") from e
    for key, value in (overrides or {}).items():
        if key in STRUCTURAL_KEYS:
            stored = getattr(config, key)
            wanted = tuple(value) if key == "tosa_layers" else value
            if stored != wanted:
                raise CheckpointError(f"config key {key!r}: checkpoint has {stored!r}, requested {value!r}")
        elif key in ("ratio", "scope"):
            config = config.replace(**{key: value})
        else:
            raise CheckpointError(f"unknown override key {key!r}")
    state = init_model(config, dense_head=header.get("dense_head", False))
    slots = dict(state.named())
    seen = set()
    for _ in range(r.u32()):
        name_len, rank = r.u32(2)
        name = r.take(name_len).decode()
        shape = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        values = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8")
        if name not in slots:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if slots[name].shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, config implies {slots[name].shape}")
        slots[name].data = values.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last parameter record")
    return state
