"""Three-phase training: pretrain the standard model, distill selectors, finetune with ToSA layers.

A fourth routine fits the per-patch regression head on a frozen backbone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Dataset, iterate_batches
from .model import CLS_INDEX, ModelState, add_dense_head, forward
from .numerics import ConfigError, GradTape, NumericsError, Tensor
from .params import make_rng, named_tensors, set_requires_grad, snapshot
from .selector import importance_scores, predict_attention, select_tokens, selector_loss

log = logging.getLogger(__name__)

PHASE_LOSS = {"pretrain": "cross-entropy", "selector": "kld", "finetune": "cross-entropy", "dense": "mse"}
DEFAULT_LR = {"pretrain": 3e-4, "selector": 1e-3, "finetune": 3e-4, "dense": 1e-2}


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass
class TrainConfig:
    phase: str
    epochs: int = 10
    batch_size: int = 64
    lr: float | None = None
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed: int = 0
    loss: str | None = None

    def __post_init__(self):
        if self.phase not in PHASE_LOSS:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {sorted(PHASE_LOSS)}")
        if self.loss is None:
            self.loss = PHASE_LOSS[self.phase]
        if self.loss != PHASE_LOSS[self.phase]:
            raise ConfigError(f"phase {self.phase!r} requires loss {PHASE_LOSS[self.phase]!r}, got {self.loss!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.phase]
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("epochs, batch_size and lr must be positive; weight_decay non-negative")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# ----------------------------------------------------------------- optimizers


def _finite_update(values: np.ndarray) -> np.ndarray:
    if not np.isfinite(values).all():
        raise TrainingDiverged("optimizer step produced non-finite parameters")
    return values


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = [t for _, t in named_tensors(params)]
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad ** 2
                update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.wd:
                    update = update + self.lr * self.wd * p.data
            p.data = _finite_update(p.data - update)
            p.grad = None


class SGDMomentum:
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9):
        self.params = [t for _, t in named_tensors(params)]
        self.lr, self.wd, self.mu = lr, weight_decay, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                g = p.grad + self.wd * p.data if self.wd else p.grad
                b *= self.mu
                b += g
                new = p.data - self.lr * b
            p.data = _finite_update(new)
            p.grad = None


def make_optimizer(params, config: TrainConfig):
    cls = Adam if config.optimizer == "adam" else SGDMomentum
    return cls(params, config.lr, config.weight_decay)


# ------------------------------------------------------------------ logging


@dataclass
class MetricLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, phase: str, epoch: int, step: int, loss: float, accuracy: float | None = None):
        self.rows.append((phase, epoch, step, float(loss), None if accuracy is None else float(accuracy)))

    def extend(self, other: "MetricLog"):
        self.rows.extend(other.rows)

    def losses(self) -> list[float]:
        return [r[3] for r in self.rows]

    def write_csv(self, path) -> None:
        """Append rows to ``path``; the header is written when the file is new."""
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["phase", "epoch", "step", "loss", "accuracy"])
            for phase, epoch, step, loss, acc in self.rows:
                w.writerow([phase, epoch, step, repr(loss), "" if acc is None else repr(acc)])


def _check_finite(value: float, phase: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{phase}: non-finite loss at epoch {epoch}, step {step}")


# ------------------------------------------------------------------- phases


def _classifier_phase(state: ModelState, config: TrainConfig, data: Dataset, use_tosa: bool) -> MetricLog:
    rng = make_rng(config.seed)
    opt = make_optimizer(state.backbone(), config)
    metrics = MetricLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        total, correct = 0.0, 0
        for idx in iterate_batches(data, config.batch_size, rng):
            with GradTape() as tape:
                try:
                    logits = forward(data.images[idx], state, "classify", use_tosa=use_tosa)
                    loss = nx.cross_entropy(logits, data.labels[idx])
                except NumericsError as e:
                    raise TrainingDiverged(f"{config.phase}: {e} at epoch {epoch}, step {step}") from e
            _check_finite(loss.item(), config.phase, epoch, step)
            tape.backward(loss)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
        metrics.add(config.phase, epoch, step, total / len(data), correct / len(data))
        log.info("%s epoch %d loss %.4f acc %.3f", config.phase, epoch, total / len(data), correct / len(data))
    return metrics


def pretrain(state: ModelState, config: TrainConfig, data: Dataset) -> tuple[ModelState, MetricLog]:
    """Cross-entropy training of the all-standard model (selectors untouched)."""
    set_requires_grad(state.backbone(), True)
    set_requires_grad(list(state.selectors.values()), False)
    metrics = _classifier_phase(state, config, data, use_tosa=False)
    set_requires_grad(state.backbone(), False)
    return state, metrics


def teacher_pairs(state: ModelState, images: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
    """For each ToSA layer ``t``: (pre-softmax maps of layer t-1, true attention maps of layer t), all-standard forward."""
    with nx.no_grad():
        _, trace = forward(images, state, "features", use_tosa=False)
    return {t: (trace.artifacts[t - 1].B.detach(), trace.artifacts[t].A.data)
            for t in state.config.tosa_layers}


def selector_kld(state: ModelState, images: np.ndarray) -> float:
    """Summed selector loss over all ToSA layers against the frozen teacher."""
    pairs = teacher_pairs(state, images)
    with nx.no_grad():
        return float(sum(selector_loss(predict_attention(b, state.selectors[t]), a).item()
                         for t, (b, a) in pairs.items()))


@dataclass
class SelectorReport:
    initial_kld: float
    final_kld: float
    backbone_unchanged: bool
    warning: str | None = None


def train_selectors(state: ModelState, config: TrainConfig, data: Dataset,
                    probe: np.ndarray | None = None) -> tuple[ModelState, MetricLog, SelectorReport]:
    """Distill every selector jointly from the frozen backbone's attention maps.

    ``probe`` is a held-out image batch on which the initial and final
    divergence are measured (defaults to the first batch of ``data``).
    """
    probe = data.images[: config.batch_size] if probe is None else probe
    before = snapshot(state.backbone())
    set_requires_grad(state.backbone(), False)
    selectors = [state.selectors[t] for t in state.config.tosa_layers]
    set_requires_grad(selectors, True)
    initial = selector_kld(state, probe)
    rng = make_rng(config.seed)
    opt = make_optimizer(selectors, config)
    metrics = MetricLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in iterate_batches(data, config.batch_size, rng):
            pairs = teacher_pairs(state, data.images[idx])
            with GradTape() as tape:
                loss = None
                for t, (b, a) in pairs.items():
                    term = selector_loss(predict_attention(b, state.selectors[t]), a)
                    loss = term if loss is None else nx.add(loss, term)
            _check_finite(loss.item(), config.phase, epoch, step)
            tape.backward(loss)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
        metrics.add(config.phase, epoch, step, total / len(data))
        log.info("selector epoch %d kld %.4f", epoch, total / len(data))
    set_requires_grad(selectors, False)
    final = selector_kld(state, probe)
    warning = None if final < initial else f"selector loss did not decrease ({initial:.4g} -> {final:.4g})"
    if warning:
        log.warning(warning)
    report = SelectorReport(initial, final, snapshot(state.backbone()) == before, warning)
    return state, metrics, report


def finetune(state: ModelState, config: TrainConfig, data: Dataset) -> tuple[ModelState, MetricLog]:
    """Train the backbone with ToSA layers active; selectors stay frozen."""
    if not state.selectors:
        raise ConfigError("finetune needs trained selectors; the schedule has no ToSA layers")
    set_requires_grad(list(state.selectors.values()), False)
    set_requires_grad(state.backbone(), True)
    metrics = _classifier_phase(state, config, data, use_tosa=True)
    set_requires_grad(state.backbone(), False)
    return state, metrics


# --------------------------------------------------------------- evaluation


def predict(state: ModelState, images: np.ndarray, use_tosa: bool = True, batch_size: int = 256,
            ratio: float | None = None) -> np.ndarray:
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(images[start:start + batch_size], state, "classify",
                               use_tosa=use_tosa, ratio=ratio).data)
    return np.concatenate(out)


def accuracy(state: ModelState, data: Dataset, use_tosa: bool = True, ratio: float | None = None) -> float:
    return float((predict(state, data.images, use_tosa, ratio=ratio).argmax(axis=1) == data.labels).mean())


def features(state: ModelState, images: np.ndarray, use_tosa: bool = True, batch_size: int = 256) -> np.ndarray:
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            f, _ = forward(images[start:start + batch_size], state, "features", use_tosa=use_tosa)
            out.append(f.data)
    return np.concatenate(out)


def plan_overlap(state: ModelState, images: np.ndarray, ratio: float | None = None) -> float:
    """Mean per-head Jaccard overlap between selector plans and plans from the true next-layer maps."""
    ratio = state.config.ratio if ratio is None else ratio
    pairs = teacher_pairs(state, images)
    scores = []
    with nx.no_grad():
        for t, (b, a) in pairs.items():
            ours = select_tokens(importance_scores(predict_attention(b, state.selectors[t])), ratio, (CLS_INDEX,))
            truth = select_tokens(a.sum(axis=-2), ratio, (CLS_INDEX,))
            m1, m2 = ours.attended_mask(), truth.attended_mask()
            scores.append(((m1 & m2).sum(-1) / (m1 | m2).sum(-1)).mean())
    return float(np.mean(scores))


# --------------------------------------------------------------- dense head


@dataclass
class DenseReport:
    train_mse: float
    test_mse: float
    backbone_unchanged: bool


def train_dense_head(state: ModelState, config: TrainConfig, train: Dataset, test: Dataset,
                     use_tosa: bool = True) -> tuple[ModelState, MetricLog, DenseReport]:
    """Fit a per-patch linear regression head by MSE on frozen backbone features."""
    if train.targets is None or test.targets is None:
        raise ConfigError("dense head training needs per-patch targets")
    before = snapshot(state.backbone())
    set_requires_grad(state.backbone(), False)
    add_dense_head(state, config.seed)
    head = [state.dense_w, state.dense_b]
    set_requires_grad(head, True)
    feats = features(state, train.images, use_tosa)[:, 1:, :]
    rng = make_rng(config.seed)
    opt = make_optimizer(head, config)
    metrics = MetricLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in iterate_batches(train, config.batch_size, rng):
            with GradTape() as tape:
                pred = nx.add(Tensor(feats[idx]) @ state.dense_w, state.dense_b)
                loss = nx.mse(nx.reshape(pred, pred.shape[:-1]), train.targets[idx])
            _check_finite(loss.item(), config.phase, epoch, step)
            tape.backward(loss)
            opt.step()
            step += 1
            total += loss.item() * len(idx)
        metrics.add(config.phase, epoch, step, total / len(train))
    set_requires_grad(head, False)
    report = DenseReport(dense_mse(state, train, use_tosa), dense_mse(state, test, use_tosa),
                         snapshot(state.backbone()) == before)
    return state, metrics, report


def dense_mse(state: ModelState, data: Dataset, use_tosa: bool = True) -> float:
    with nx.no_grad():
        errs = []
        for start in range(0, len(data), 256):
            pred = forward(data.images[start:start + 256], state, "dense", use_tosa=use_tosa).data
            errs.append(((pred - data.targets[start:start + 256]) ** 2).sum())
    return float(np.sum(errs) / data.targets.size)
