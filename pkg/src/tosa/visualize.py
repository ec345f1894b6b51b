"""Selection masks per ToSA layer and head, written as binary PGM (P5) images.

Attended patches are light (255), skipped patches dark (0).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import PIXEL_MEAN, PIXEL_STD
from .model import CLS_INDEX, ModelState, forward
from .numerics import ShapeError
from .selector import SelectionPlan


@dataclass
class SelectionMask:
    """Per ToSA layer: ``(H, grid, grid)`` attended flags for patches, and ``(H,)`` flags for the class token."""

    patches: dict[int, np.ndarray]
    cls: dict[int, np.ndarray]
    k: dict[int, int]


def selection_masks(plans: dict[int, SelectionPlan], grid: int) -> SelectionMask:
    patches, cls, ks = {}, {}, {}
    for layer, plan in plans.items():
        mask = plan.attended_mask()
        if mask.ndim == 3 and mask.shape[0] == 1:
            mask = mask[0]
        if mask.ndim != 2:
            raise ShapeError("selection masks are built from a single-image plan")
        cls[layer] = mask[:, CLS_INDEX].copy()
        patches[layer] = np.delete(mask, CLS_INDEX, axis=1).reshape(mask.shape[0], grid, grid)
        ks[layer] = plan.k
    return SelectionMask(patches, cls, ks)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ShapeError("PGM needs a 2-D array")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def mask_image(grid_mask: np.ndarray, patch: int, image: np.ndarray | None = None) -> np.ndarray:
    """Upscale a patch-grid mask to pixels; optionally blend 50/50 with the grayscale input."""
    pixels = np.kron(grid_mask.astype(np.float64) * 255.0, np.ones((patch, patch)))
    if image is not None:
        gray = np.clip(image.mean(axis=0) * PIXEL_STD + PIXEL_MEAN, 0.0, 1.0) * 255.0
        pixels = 0.5 * pixels + 0.5 * gray
    return np.rint(pixels).astype(np.uint8)


def visualize(state: ModelState, image: np.ndarray, out_dir, blend: bool = False) -> SelectionMask:
    """Write ``layerXX_headY.pgm`` per ToSA layer and head plus ``layerXX_union.pgm``."""
    cfg = state.config
    if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image shape {image.shape} does not match the checkpoint "
                         f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    if not cfg.tosa_layers:
        raise ShapeError("checkpoint has no ToSA layers to visualize")
    with nx.no_grad():
        _, trace = forward(image, state, "features")
    masks = selection_masks(trace.plans, cfg.grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backdrop = image if blend else None
    for layer, per_head in masks.patches.items():
        for h, m in enumerate(per_head):
            write_pgm(out / f"layer{layer:02d}_head{h}.pgm", mask_image(m, cfg.patch_size, backdrop))
        write_pgm(out / f"layer{layer:02d}_union.pgm", mask_image(per_head.any(axis=0), cfg.patch_size, backdrop))
    return masks
