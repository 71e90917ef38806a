"""Nadam training loop with plateau LR reduction, early stopping and
best-checkpoint restore."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_state, state_arrays
from .model import AttResDUNet
from .nn import Parameter
from .objective import dice_loss, image_metrics, mean_metrics
from .ops import add
from .pipeline import ArrayDataset
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 40
    batch_size: int = 4
    early_stop_patience: int = 5
    lr_reduce_factor: float = 0.1
    lr_reduce_patience: int = 3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    min_delta: float = 1e-5
    aux_loss: bool = False
    smoothing: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_reduce_factor < 1:
            raise ValueError(f"lr_reduce_factor must lie in (0, 1), got {self.lr_reduce_factor}")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


def nadam_update(w, g, m, v, lr, beta1, beta2, eps, t):
    """One Nadam step on arrays; returns ``(w, m, v)``.

    ``m``/``v`` are the bias-uncorrected moments from the previous step.
    """
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    c1 = 1 - beta1**t
    m_hat = m / c1
    v_hat = v / (1 - beta2**t)
    w = w - lr * (beta1 * m_hat + (1 - beta1) * g / c1) / (np.sqrt(v_hat) + eps)
    return w, m, v


@dataclass
class NadamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def nadam_step(params: list[Parameter], state: NadamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Apply one update to every parameter holding a gradient.

    Raises :class:`NonFiniteGradient` (before touching anything) if any gradient
    contains NaN or Inf.
    """
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGradient(p.name)
    state.t += 1
    t = state.t
    for p in params:
        if p.grad is None:
            continue
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        w, m, v = nadam_update(p.data, p.grad, m, v, np.float32(lr), np.float32(beta1), np.float32(beta2), np.float32(eps), t)
        p.data = w.astype(np.float32)
        state.m[p.name] = m.astype(np.float32)
        state.v[p.name] = v.astype(np.float32)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dsc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    diverged: bool = False

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    @property
    def lrs(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def summary(self) -> dict:
        best = self.epochs[self.best_epoch] if self.best_epoch >= 0 else None
        return {
            "summary": True,
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_loss": best.val_loss if best else None,
            "best_val_dsc": best.val_dsc if best else None,
            "stopped_early": self.stopped_early,
            "diverged": self.diverged,
        }

    def to_text(self) -> str:
        lines = [json.dumps(asdict(e)) for e in self.epochs]
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict(model: AttResDUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Final-output probabilities ``(N, 1, H, W)`` in inference mode."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            outs = [model(Tensor(images[i:i + batch_size]))[2].data for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0, 1) + images.shape[2:], np.float32)


def validation_scores(model: AttResDUNet, data: ArrayDataset, cfg: TrainConfig) -> tuple[float, float]:
    """Mean per-batch dice loss and mean per-image DSC."""
    probs = predict(model, data.images, cfg.batch_size)
    losses = [
        dice_loss(Tensor(probs[i:i + cfg.batch_size]), data.masks[i:i + cfg.batch_size], cfg.smoothing).item()
        for i in range(0, len(probs), cfg.batch_size)
    ]
    dsc = [image_metrics(probs[i], data.masks[i], cfg.threshold)["dsc"] for i in range(len(probs))]
    return float(np.mean(losses)), float(np.mean(dsc))


def train(
    model: AttResDUNet,
    train_data: ArrayDataset,
    val_data: ArrayDataset,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[AttResDUNet, TrainHistory]:
    """Train in place and return the model restored to its best-val-loss state."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = NadamState()
    history = TrainHistory()
    best_state = {k: v.copy() for k, v in state_arrays(model).items()}
    best_loss = math.inf
    lr = cfg.lr
    since_best = since_reduce = 0
    beta1, beta2 = cfg.betas

    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(train_data))
        batch_losses = []
        try:
            for idx in _batches(len(train_data), cfg.batch_size, order):
                x = Tensor(train_data.images[idx])
                y = train_data.masks[idx]
                out1, out2, final = model(x)
                loss = dice_loss(final, y, cfg.smoothing)
                if cfg.aux_loss:
                    loss = add(add(loss, dice_loss(out1, y, cfg.smoothing)), dice_loss(out2, y, cfg.smoothing))
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                nadam_step(params, opt, lr, beta1, beta2, cfg.eps)
                batch_losses.append(value)
        except FloatingPointError as exc:
            log.warning("training diverged: %s; restoring best checkpoint", exc)
            history.diverged = True
            break

        val_loss, val_dsc = validation_scores(model, val_data, cfg)
        record = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, val_dsc, lr)
        history.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if not math.isfinite(val_loss):
            history.diverged = True
            break
        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: v.copy() for k, v in state_arrays(model).items()}
            since_best = since_reduce = 0
            continue
        since_best += 1
        since_reduce += 1
        if since_best >= cfg.early_stop_patience:
            history.stopped_early = True
            break
        if since_reduce >= cfg.lr_reduce_patience:
            lr *= cfg.lr_reduce_factor
            since_reduce = 0

    load_state(model, best_state)
    model.zero_grad()
    return model, history


def evaluate(model: AttResDUNet, data: ArrayDataset, threshold: float = 0.5, batch_size: int = 8) -> dict:
    """Per-image and mean DSC/IoU/recall/precision on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    probs = predict(model, data.images, batch_size)
    rows = []
    for i, prob in enumerate(probs):
        scores = image_metrics(prob, data.masks[i], threshold)
        rows.append({"id": data.ids[i] if data.ids else str(i), **scores})
    return {"per_image": rows, "mean": mean_metrics(rows), "threshold": threshold}


def format_report(report: dict) -> str:
    """Line-oriented report with percentages to two decimals."""
    lines = ["id\tDSC\tIOU\tRecall\tPrecision"]
    for row in report["per_image"]:
        lines.append(
            f"{row['id']}\t{100 * row['dsc']:.2f}\t{100 * row['iou']:.2f}\t"
            f"{100 * row['recall']:.2f}\t{100 * row['precision']:.2f}"
        )
    m = report["mean"]
    lines.append(
        f"mean\t{100 * m['dsc']:.2f}\t{100 * m['iou']:.2f}\t{100 * m['recall']:.2f}\t{100 * m['precision']:.2f}"
    )
    return "\n".join(lines) + "\n"
