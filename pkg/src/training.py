import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from . import ops
from .data_loader import ECGDataset
from .errors import ShapeError, TrainingError
from .layers import Layer, Parameter
from .metrics import MetricsReport, compute_metrics
from .model import LightX3ECG, predict
from .rng import make_stream

TASK_LOSS = {"multi_class": "cross_entropy", "multi_label": "binary_cross_entropy"}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = 1e-3
    lr_min: float = 1e-4
    weight_decay: float = 5e-5
    epochs_total: int = Field(70, ge=1)
    epochs_cosine: int = Field(40, ge=1)
    batch_size: int = Field(32, ge=2)
    task: str = "multi_class"
    droplead_p: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.epochs_cosine > self.epochs_total:
            raise ValueError(f"epochs_cosine={self.epochs_cosine} exceeds epochs_total={self.epochs_total}")
        if self.task not in TASK_LOSS:
            raise ValueError(f"task must be one of {sorted(TASK_LOSS)}, got '{self.task}'")
        return self


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Cosine from lr0 down to lr_min over the first ``epochs_cosine`` epochs, then constant."""
    if not 0 <= epoch < cfg.epochs_total:
        raise ShapeError(f"epoch {epoch} outside [0, {cfg.epochs_total})")
    if epoch >= cfg.epochs_cosine:
        return cfg.lr_min
    return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs_cosine)) / 2


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, Parameter], state: AdamState, lr: float, weight_decay: float = 0.0,
              masks: Optional[Dict[str, np.ndarray]] = None) -> None:
    """One bias-corrected Adam update in place.

    Weight decay is folded into the gradient (g + wd * theta) for parameters
    flagged ``decay``. Where a mask is given, masked coordinates get zero
    gradient and are held at exactly zero.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise TrainingError(f"non-finite gradient in parameter '{name}' ({bad} entries) at step {state.t + 1}")
    state.t += 1
    t = state.t
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for name, p in params.items():
        grad = p.grad + weight_decay * p.value if (p.decay and weight_decay) else p.grad
        mask = masks.get(name) if masks else None
        if mask is not None:
            grad = grad * mask
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.value = (p.value - update).astype(p.value.dtype, copy=False)
        if mask is not None:
            p.value = p.value * mask


class AdamOptimizer:
    def __init__(self, model: Layer, weight_decay: float = 0.0, masks: Optional[Dict[str, np.ndarray]] = None):
        self.params = dict(model.named_parameters())
        self.weight_decay = weight_decay
        self.masks = masks
        self.state = AdamState()

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr, self.weight_decay, self.masks)


def drop_lead(batch: np.ndarray, p: float, rng: Optional[np.random.Generator], training: bool = True) -> np.ndarray:
    """DropLead: per row, with probability ``p`` zero one uniformly chosen lead. Identity in eval mode."""
    if batch.ndim != 3 or batch.shape[1] != 3:
        raise ShapeError(f"drop_lead expects [B, 3, L], got {batch.shape}")
    if not training or p == 0.0:
        return batch
    if rng is None:
        raise ShapeError("drop_lead in train mode needs an explicit rng stream")
    rows = rng.random(batch.shape[0]) < p
    leads = rng.integers(0, 3, size=batch.shape[0])
    out = batch.copy()
    out[rows, leads[rows], :] = 0
    return out


def apply_masks(model: Layer, masks: Dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name in masks:
            p.value = p.value * masks[name].astype(p.value.dtype)


class Trainer:
    """Mini-batch training loop: Adam, epoch-level lr schedule, DropLead."""

    def __init__(self, cfg: TrainConfig, progress: bool = True):
        self.cfg = cfg
        self.loss_kind = TASK_LOSS[cfg.task]
        self.progress = progress

    def _batches(self, n: int, rng: np.random.Generator) -> List[np.ndarray]:
        order = rng.permutation(n)
        batches = [order[i:i + self.cfg.batch_size] for i in range(0, n, self.cfg.batch_size)]
        # train-mode BatchNorm needs at least two rows
        if batches and len(batches[-1]) < 2:
            batches.pop()
        return batches

    def train_epoch(self, model: LightX3ECG, dataset: ECGDataset, optimizer: AdamOptimizer, lr: float,
                    rng: np.random.Generator) -> float:
        model.train()
        targets = dataset.targets
        total, seen = 0.0, 0
        for idx in self._batches(len(dataset), rng):
            x = drop_lead(dataset.x[idx], self.cfg.droplead_p, rng, training=True)
            model.zero_grad()
            logits, _ = model.forward(x, rng)
            loss, grad = ops.losses(logits, targets[idx], self.loss_kind)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {optimizer.state.t + 1}")
            model.backward(grad)
            optimizer.step(lr)
            total += loss * len(idx)
            seen += len(idx)
        model.eval()
        return total / max(seen, 1)

    def fit(self, model: LightX3ECG, dataset: ECGDataset, epochs: Optional[int] = None,
            constant_lr: Optional[float] = None, masks: Optional[Dict[str, np.ndarray]] = None,
            stream_key: Sequence = ()) -> List[float]:
        """Train ``model`` in place and return the mean training loss per epoch.

        Args:
            epochs: Number of epochs (default ``cfg.epochs_total``)
            constant_lr: Hold the learning rate fixed instead of following ``lr_schedule``
            masks: Prune masks; masked weights stay exactly zero
            stream_key: Extra rng keys so separate runs (e.g. CV rounds) draw independent streams
        """
        if len(dataset) < 2:
            raise TrainingError(f"need at least 2 training records, got {len(dataset)}")
        epochs = self.cfg.epochs_total if epochs is None else epochs
        optimizer = AdamOptimizer(model, self.cfg.weight_decay, masks)
        if masks:
            apply_masks(model, masks)
        history = []
        bar = tqdm(range(epochs), desc="epochs", disable=not self.progress, leave=False)
        for epoch in bar:
            lr = constant_lr if constant_lr is not None else lr_schedule(min(epoch, self.cfg.epochs_total - 1), self.cfg)
            rng = make_stream(self.cfg.seed, "train", *stream_key, "epoch", epoch)
            loss = self.train_epoch(model, dataset, optimizer, lr, rng)
            history.append(loss)
            bar.set_postfix(loss=f"{loss:.4f}", lr=f"{lr:.2e}")
            logging.debug(f"epoch {epoch}: loss={loss:.6f} lr={lr:.3e}")
        return history


def predict_scores(model: LightX3ECG, x: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits [N, C] and attention scores [N, 3] in batches."""
    model.eval()
    logits, alphas = [], []
    for start in range(0, x.shape[0], batch_size):
        out, alpha = model.forward(x[start:start + batch_size])
        logits.append(out)
        alphas.append(alpha)
    if not logits:
        return np.zeros((0, model.spec.n_classes)), np.zeros((0, model.spec.n_leads))
    return np.concatenate(logits), np.concatenate(alphas)


def probabilities(logits: np.ndarray, task: str) -> np.ndarray:
    return ops.softmax(logits) if task == "multi_class" else ops.sigmoid(logits)


def evaluate_model(model: LightX3ECG, dataset: ECGDataset, thresholds: Optional[np.ndarray] = None,
                   batch_size: int = 64) -> MetricsReport:
    """Run inference over ``dataset`` and score it against its labels."""
    logits, _ = predict_scores(model, dataset.x, batch_size)
    if dataset.task == "multi_label" and thresholds is None:
        thresholds = np.full(len(dataset.classes), 0.5)
    predicted = predict(logits, dataset.task, thresholds)
    return compute_metrics(dataset.y, predicted, dataset.classes)
