import copy
import hashlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import ops
from .errors import ShapeError
from .layers import (BatchNorm1d, Conv1d, Dropout, DSConv1d, GlobalAvgPool, Layer, Linear, MaxPool1d, ReLU,
                     Sigmoid)
from .rng import make_stream
from .tensor import ArrayLike3, as_array3, check_finite


class StageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blocks: int = 2
    out_ch: int
    kernel: int = 7
    stride: int = 1


def _default_stages() -> List[StageConfig]:
    return [
        StageConfig(blocks=2, out_ch=64, kernel=7, stride=1),
        StageConfig(blocks=2, out_ch=128, kernel=7, stride=2),
        StageConfig(blocks=2, out_ch=256, kernel=7, stride=2),
        StageConfig(blocks=2, out_ch=512, kernel=7, stride=2),
    ]


class BackboneConfig(BaseModel):
    """Redesigned 1D-SEResNet18: large kernels, every conv depthwise-separable."""

    model_config = ConfigDict(extra="forbid")

    stem_kernel: int = 15
    stem_stride: int = 2
    stem_channels: int = 64
    stem_pool: bool = True
    stages: List[StageConfig] = Field(default_factory=_default_stages)
    se_reduction: int = 16

    @field_validator("stages")
    @classmethod
    def _non_empty(cls, stages):
        if not stages:
            raise ValueError("backbone needs at least one stage")
        return stages

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].out_ch

    def main_layer_count(self) -> int:
        """Stem conv + two convs per block + the classifier FC the features feed."""
        return 1 + 2 * sum(stage.blocks for stage in self.stages) + 1


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    n_classes: int = 4
    n_leads: int = 3
    input_length: int = 5000
    attention_hidden: Optional[int] = None
    attention_dropout: float = 0.3

    @model_validator(mode="after")
    def _check(self):
        if self.n_leads != 3:
            raise ValueError(f"the system routes exactly 3 leads, got n_leads={self.n_leads}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ValueError(f"attention_dropout must be in [0, 1), got {self.attention_dropout}")
        return self

    @property
    def hidden_dim(self) -> int:
        return self.attention_hidden or self.backbone.feature_dim

    def digest(self) -> bytes:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).digest()


class SEBlock(Layer):
    """Squeeze-and-excitation: GAP -> FC -> ReLU -> FC -> sigmoid gate per channel."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=np.float32):
        hidden = max(1, channels // reduction)
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.relu = ReLU()
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)
        self.gate = Sigmoid()
        self._x = None
        self._scale = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        squeezed = self.pool.forward(x)
        self._scale = self.gate.forward(self.fc2.forward(self.relu.forward(self.fc1.forward(squeezed))))
        return x * self._scale[:, :, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x = grad_out * self._scale[:, :, None]
        grad_scale = (grad_out * self._x).sum(axis=2)
        grad_squeezed = self.fc1.backward(self.relu.backward(self.fc2.backward(self.gate.backward(grad_scale))))
        return grad_x + self.pool.backward(grad_squeezed)


class ResidualBlock(Layer):
    """DSConv-BN-ReLU, DSConv-BN, SE recalibration, skip add, ReLU.

    The skip is a strided 1x1 conv + BN whenever channels or length change.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, se_reduction: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv1 = DSConv1d(in_ch, out_ch, kernel, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm1d(out_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = DSConv1d(out_ch, out_ch, kernel, rng, dtype=dtype)
        self.bn2 = BatchNorm1d(out_ch, dtype=dtype)
        self.se = SEBlock(out_ch, se_reduction, rng, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv1d(in_ch, out_ch, 1, rng, stride=stride, padding=0, dtype=dtype)
            self.shortcut_bn = BatchNorm1d(out_ch, dtype=dtype)
        else:
            self.shortcut = None
            self.shortcut_bn = None
        self.relu_out = ReLU()

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.se.forward(self.bn2.forward(self.conv2.forward(h)))
        skip = x if self.shortcut is None else self.shortcut_bn.forward(self.shortcut.forward(x))
        if skip.shape != h.shape:
            raise ShapeError(f"residual branch shape {h.shape} does not match skip shape {skip.shape}")
        return self.relu_out.forward(h + skip)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.relu_out.backward(grad_out)
        grad_h = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(self.se.backward(g))))))
        if self.shortcut is None:
            return grad_h + g
        return grad_h + self.shortcut.backward(self.shortcut_bn.backward(g))


class Stage(Layer):
    def __init__(self, in_ch: int, cfg: StageConfig, se_reduction: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.blocks = []
        for i in range(cfg.blocks):
            self.blocks.append(ResidualBlock(in_ch if i == 0 else cfg.out_ch, cfg.out_ch, cfg.kernel,
                                             cfg.stride if i == 0 else 1, se_reduction, rng, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for block in self.blocks:
            x = block.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            grad_out = block.backward(grad_out)
        return grad_out


class Backbone(Layer):
    """One single-lead 1D-SEResNet feature extractor: [B, 1, L] -> [B, D].

    After a forward pass ``final_activation`` holds the last stage output (the
    Grad-CAM target); after backward ``final_activation_grad`` holds its
    gradient.
    """

    def __init__(self, cfg: BackboneConfig, input_length: int, rng: np.random.Generator, dtype=np.float32):
        self.input_length = input_length
        self.stem = DSConv1d(1, cfg.stem_channels, cfg.stem_kernel, rng, stride=cfg.stem_stride, dtype=dtype)
        self.stem_bn = BatchNorm1d(cfg.stem_channels, dtype=dtype)
        self.stem_relu = ReLU()
        self.stem_pool = MaxPool1d(3, 2, 1) if cfg.stem_pool else None
        self.stages = []
        in_ch = cfg.stem_channels
        for stage_cfg in cfg.stages:
            self.stages.append(Stage(in_ch, stage_cfg, cfg.se_reduction, rng, dtype=dtype))
            in_ch = stage_cfg.out_ch
        self.pool = GlobalAvgPool()
        self.final_activation: Optional[np.ndarray] = None
        self.final_activation_grad: Optional[np.ndarray] = None

    def _transient_state(self):
        yield from super()._transient_state()
        yield from (a for a in (self.final_activation, self.final_activation_grad) if a is not None)

    def forward(self, lead: ArrayLike3) -> np.ndarray:
        lead = as_array3(lead, "lead")
        if lead.shape[1] != 1 or lead.shape[2] != self.input_length:
            raise ShapeError(f"backbone expects [B, 1, {self.input_length}], got {lead.shape}")
        h = self.stem_relu.forward(self.stem_bn.forward(self.stem.forward(lead)))
        if self.stem_pool is not None:
            h = self.stem_pool.forward(h)
        for stage in self.stages:
            h = stage.forward(h)
        self.final_activation = h
        self.final_activation_grad = None
        return self.pool.forward(h)

    def backward(self, grad_features: np.ndarray) -> np.ndarray:
        g = self.pool.backward(grad_features)
        self.final_activation_grad = g
        for stage in reversed(self.stages):
            g = stage.backward(g)
        if self.stem_pool is not None:
            g = self.stem_pool.backward(g)
        return self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(g)))


class LeadwiseAttention(Layer):
    """alpha = sigmoid(FC2(dropout(BN(FC1(concat[f1, f2, f3]))))), f_merged = sum_i alpha_i * f_i."""

    def __init__(self, feature_dim: int, hidden_dim: int, dropout_rate: float, rng: np.random.Generator,
                 n_leads: int = 3, dtype=np.float32):
        self.feature_dim = feature_dim
        self.n_leads = n_leads
        self.fc1 = Linear(n_leads * feature_dim, hidden_dim, rng, dtype=dtype)
        self.bn = BatchNorm1d(hidden_dim, dtype=dtype)
        self.dropout = Dropout(dropout_rate)
        self.fc2 = Linear(hidden_dim, n_leads, rng, dtype=dtype)
        self.gate = Sigmoid()
        self._features = None
        self._alpha = None

    def forward(self, features: Sequence[np.ndarray], rng: Optional[np.random.Generator] = None
                ) -> Tuple[np.ndarray, np.ndarray]:
        if len(features) != self.n_leads:
            raise ShapeError(f"attention expects {self.n_leads} feature vectors, got {len(features)}")
        shapes = {f.shape for f in features}
        if len(shapes) != 1 or features[0].ndim != 2 or features[0].shape[1] != self.feature_dim:
            raise ShapeError(f"attention feature shapes {[f.shape for f in features]} must all be "
                             f"[B, {self.feature_dim}]")
        self._features = list(features)
        concat = np.concatenate(features, axis=1)
        h = self.dropout.forward(self.bn.forward(self.fc1.forward(concat)), rng)
        alpha = self.gate.forward(self.fc2.forward(h))
        self._alpha = alpha
        merged = sum(alpha[:, i:i + 1] * f for i, f in enumerate(features))
        return merged, alpha

    def backward(self, grad_merged: np.ndarray, grad_alpha: Optional[np.ndarray] = None) -> List[np.ndarray]:
        grads = [self._alpha[:, i:i + 1] * grad_merged for i in range(self.n_leads)]
        g_alpha = np.stack([(grad_merged * f).sum(axis=1) for f in self._features], axis=1)
        if grad_alpha is not None:
            g_alpha = g_alpha + grad_alpha
        g_concat = self.fc1.backward(self.bn.backward(self.dropout.backward(
            self.fc2.backward(self.gate.backward(g_alpha)))))
        d = self.feature_dim
        return [grads[i] + g_concat[:, i * d:(i + 1) * d] for i in range(self.n_leads)]


class LightX3ECG(Layer):
    """Three lead backbones merged by Lead-wise Attention, then one FC classifier."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        cfg = spec.backbone
        self.backbones = [
            Backbone(cfg, spec.input_length, make_stream(seed, "init", "backbone", i), dtype=dtype)
            for i in range(spec.n_leads)
        ]
        self.attention = LeadwiseAttention(cfg.feature_dim, spec.hidden_dim, spec.attention_dropout,
                                           make_stream(seed, "init", "attention"), n_leads=spec.n_leads,
                                           dtype=dtype)
        self.classifier = Linear(cfg.feature_dim, spec.n_classes, make_stream(seed, "init", "classifier"),
                                 dtype=dtype)
        logging.debug(f"Built LightX3ECG with {self.num_parameters()} parameters")

    @property
    def dtype(self):
        return self.classifier.weight.value.dtype

    def backbone_forward(self, lead_index: int, lead: ArrayLike3) -> np.ndarray:
        features = self.backbones[lead_index].forward(lead)
        check_finite(features, f"backbone {lead_index} features")
        return features

    def attention_merge(self, features: Sequence[np.ndarray], rng: Optional[np.random.Generator] = None
                        ) -> Tuple[np.ndarray, np.ndarray]:
        merged, alpha = self.attention.forward(features, rng)
        check_finite(merged, "attention output")
        return merged, alpha

    def forward(self, x: ArrayLike3, rng: Optional[np.random.Generator] = None
                ) -> Tuple[np.ndarray, np.ndarray]:
        """Return (logits [B, n_classes], alpha [B, 3]); dropout draws from ``rng`` in train mode."""
        x = as_array3(x, "x")
        if x.shape[1] != self.spec.n_leads:
            raise ShapeError(f"model expects {self.spec.n_leads} input leads, got input shape {x.shape}")
        x = x.astype(self.dtype, copy=False)
        features = [self.backbone_forward(i, x[:, i:i + 1, :]) for i in range(self.spec.n_leads)]
        merged, alpha = self.attention_merge(features, rng)
        logits = self.classifier.forward(merged)
        check_finite(logits, "logits")
        return logits, alpha

    def backward(self, grad_logits: np.ndarray, grad_alpha: Optional[np.ndarray] = None) -> np.ndarray:
        grad_merged = self.classifier.backward(grad_logits)
        grad_features = self.attention.backward(grad_merged, grad_alpha)
        grad_x = np.concatenate([backbone.backward(g) for backbone, g in zip(self.backbones, grad_features)],
                                axis=1)
        check_finite(grad_x, "input gradient")
        return grad_x

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, value in state.items():
            target = params[name].value if name in params else buffers[name]
            if target.shape != value.shape:
                raise ShapeError(f"state entry '{name}' has shape {value.shape}, expected {target.shape}")
            if name in params:
                params[name].value = value.astype(target.dtype, copy=True)
                params[name].zero_grad()
            else:
                buffers[name][...] = value

    def clone(self) -> "LightX3ECG":
        return copy.deepcopy(self)


def predict(logits: np.ndarray, task: str, thresholds: Optional[np.ndarray] = None) -> np.ndarray:
    """Turn logits into a boolean [N, C] label matrix.

    multi_class: one-hot argmax (ties to the lowest index).
    multi_label: sigmoid(logit_c) >= threshold_c per class.
    """
    logits = np.atleast_2d(logits)
    if task == "multi_class":
        labels = np.zeros(logits.shape, dtype=bool)
        labels[np.arange(logits.shape[0]), np.argmax(logits, axis=1)] = True
        return labels
    if task == "multi_label":
        if thresholds is None:
            raise ShapeError("multi_label prediction needs per-class thresholds")
        thresholds = np.asarray(thresholds, dtype=np.float64)
        if thresholds.shape != (logits.shape[1],):
            raise ShapeError(f"thresholds shape {thresholds.shape} does not match {logits.shape[1]} classes")
        return ops.sigmoid(logits.astype(np.float64)) >= thresholds[None, :]
    raise ShapeError(f"Unknown task '{task}', expected multi_class or multi_label")
