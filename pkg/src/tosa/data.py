"""Procedural toy images and the TSDS dataset file format.

Toy task: a checkerboard texture sits somewhere inside one image quadrant on
a noisy gray background. The class is the quadrant (0 top-left, 1 top-right,
2 bottom-left, 3 bottom-right). The dense target of a patch is the distance
from the patch center to the texture center, in units of image width.

Pixels are generated in [0, 1] and normalized with ``(x - PIXEL_MEAN) / PIXEL_STD``.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
CHUNK = 256

MAGIC = b"TSDS"
VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent arrays."""


@dataclass
class Dataset:
    images: np.ndarray                  # (N, C, H, W) float64, normalized
    labels: np.ndarray                  # (N,) int64
    targets: np.ndarray | None = None   # (N, P) float64 per-patch regression targets
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.targets is not None and len(self.targets) != len(self.images):
            raise DatasetError(f"{len(self.targets)} target rows for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx],
                       None if self.targets is None else self.targets[idx], self.split)


def worker_count() -> int:
    """Thread cap for batch assembly, from ``TOSA_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("TOSA_THREADS", "1")))
    except ValueError:
        return 1


def _pattern_centers(rng, n, size):
    half, side = size // 2, size // 4
    labels = rng.integers(0, 4, size=n)
    offs = rng.integers(0, half - side + 1, size=(n, 2))
    top = (labels // 2) * half + offs[:, 0]
    left = (labels % 2) * half + offs[:, 1]
    return labels, top, left, side


def _render(rng, n, channels, size, top, left, side):
    images = 0.5 + 0.08 * rng.standard_normal((n, channels, size, size))
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    amp = rng.uniform(0.25, 0.45, size=(n, channels))
    for i in range(n):
        images[i, :, top[i]:top[i] + side, left[i]:left[i] + side] += amp[i][:, None, None] * checker
    return np.clip(images, 0.0, 1.0)


def _distance_targets(top, left, side, size, patch):
    grid = size // patch
    centers = (np.arange(grid) + 0.5) * patch
    cy = top + side / 2.0
    cx = left + side / 2.0
    dy = centers[None, :, None] - cy[:, None, None]
    dx = centers[None, None, :] - cx[:, None, None]
    return (np.sqrt(dy ** 2 + dx ** 2) / size).reshape(len(top), grid * grid)


def _chunk(args):
    seed_seq, n, channels, size, patch = args
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    labels, top, left, side = _pattern_centers(rng, n, size)
    images = _render(rng, n, channels, size, top, left, side)
    return (images - PIXEL_MEAN) / PIXEL_STD, labels, _distance_targets(top, left, side, size, patch)


def make_toy_dataset(n: int, seed: int, image_size: int = 32, patch_size: int = 4, channels: int = 3,
                     split: str = "train", threads: int | None = None) -> Dataset:
    """Generate ``n`` toy images; identical output for any thread count."""
    if image_size % 4 or image_size % patch_size:
        raise DatasetError("image size must be divisible by 4 and by the patch size")
    sizes = [min(CHUNK, n - s) for s in range(0, n, CHUNK)]
    seeds = np.random.SeedSequence([seed, _split_code(split)]).spawn(len(sizes))
    jobs = [(s, m, channels, image_size, patch_size) for s, m in zip(seeds, sizes)]
    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        parts = list(pool.map(_chunk, jobs))
    if not parts:
        raise DatasetError("dataset must contain at least one image")
    images, labels, targets = (np.concatenate(p) for p in zip(*parts))
    return Dataset(images, labels.astype(np.int64), targets, split)


def _split_code(split: str) -> int:
    return int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little")


def centered_pattern_image(image_size: int = 32, channels: int = 3, seed: int = 0) -> tuple[np.ndarray, tuple[int, int]]:
    """One normalized toy image with the texture at the center, plus the texture's (start, side) in pixels."""
    rng = np.random.Generator(np.random.PCG64(seed))
    side = image_size // 4
    start = (image_size - side) // 2
    image = _render(rng, 1, channels, image_size, np.array([start]), np.array([start]), side)[0]
    return (image - PIXEL_MEAN) / PIXEL_STD, (start, side)


def pattern_patch_mask(start: int, side: int, image_size: int, patch: int) -> np.ndarray:
    """Boolean ``(grid, grid)``: patches overlapping the texture square."""
    grid = image_size // patch
    lo, hi = np.arange(grid) * patch, (np.arange(grid) + 1) * patch
    hit = (hi > start) & (lo < start + side)
    return hit[:, None] & hit[None, :]


def iterate_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays; shuffled when ``rng`` is given."""
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def save_dataset(dataset: Dataset, path) -> None:
    """TSDS: magic, version, N, C, H, W, target width, split tag, then images / labels / targets."""
    n, c, h, w = dataset.images.shape
    t = 0 if dataset.targets is None else dataset.targets.shape[1]
    split = dataset.split.encode()
    head = MAGIC + struct.pack("<7I", VERSION, n, c, h, w, t, len(split)) + split
    body = [np.ascontiguousarray(dataset.images, dtype="<f8").tobytes(),
            np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes()]
    if t:
        body.append(np.ascontiguousarray(dataset.targets, dtype="<f8").tobytes())
    Path(path).write_bytes(head + b"".join(body))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic bytes; not a TSDS file")
    if len(buf) < 32:
        raise DatasetError(f"{path}: truncated header")
    version, n, c, h, w, t, split_len = struct.unpack("<7I", buf[4:32])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    pos = 32 + split_len
    split = buf[32:pos].decode()
    sizes = [8 * n * c * h * w, 8 * n, 8 * n * t]
    if len(buf) != pos + sum(sizes):
        raise DatasetError(f"{path}: expected {pos + sum(sizes)} bytes, found {len(buf)}")
    images = np.frombuffer(buf, "<f8", n * c * h * w, pos).reshape(n, c, h, w).astype(np.float64)
    pos += sizes[0]
    labels = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
    pos += sizes[1]
    targets = np.frombuffer(buf, "<f8", n * t, pos).reshape(n, t).astype(np.float64) if t else None
    return Dataset(images, labels, targets, split)


def ingest_raw(image_file, label_file, channels: int, size: int, split: str = "train") -> Dataset:
    """Build a dataset from raw uint8 pixels (N*C*size*size bytes, CHW order) and uint8 labels."""
    pixels = np.frombuffer(Path(image_file).read_bytes(), dtype=np.uint8)
    labels = np.frombuffer(Path(label_file).read_bytes(), dtype=np.uint8).astype(np.int64)
    per = channels * size * size
    if pixels.size % per or pixels.size // per != labels.size:
        raise DatasetError(f"{pixels.size} pixel bytes do not form {labels.size} images of {per} bytes")
    images = pixels.reshape(-1, channels, size, size).astype(np.float64) / 255.0
    return Dataset((images - PIXEL_MEAN) / PIXEL_STD, labels, None, split)
