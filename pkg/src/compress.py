"""Global L1 magnitude pruning, masked fine-tuning and size/FLOP accounting."""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import ops
from .checkpoint import serialize
from .data_loader import ECGDataset
from .errors import ShapeError
from .model import LightX3ECG, ModelSpec
from .sparse import SparseModel, densify, sparsify  # noqa: F401
from .training import TrainConfig, Trainer

PRUNE_MODES = ("global", "layer")


def _prune_count(sparsity: float, n: int) -> int:
    # guard against products like 0.29 * 100 = 28.999999999999996
    return int(math.floor(sparsity * n + 1e-9))


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 < sparsity < 1.0:
        raise ShapeError(f"sparsity must be in (0, 1), got {sparsity}")


def global_l1_masks(weights: Dict[str, np.ndarray], sparsity: float, mode: str = "global") -> Dict[str, np.ndarray]:
    """Keep-masks zeroing the floor(sparsity * N) smallest-|w| entries.

    ``global`` ranks all tensors together; ties are broken by (tensor order,
    flat index) via a stable sort. ``layer`` applies the same rule per tensor.
    """
    _check_sparsity(sparsity)
    if mode not in PRUNE_MODES:
        raise ShapeError(f"Unknown prune mode '{mode}', expected one of {PRUNE_MODES}")
    names = list(weights)
    if mode == "layer":
        masks = {}
        for name in names:
            flat = np.abs(weights[name]).ravel()
            keep = np.ones(flat.size, dtype=bool)
            keep[np.argsort(flat, kind="stable")[:_prune_count(sparsity, flat.size)]] = False
            masks[name] = keep.reshape(weights[name].shape)
        return masks

    flat = np.concatenate([np.abs(weights[name]).ravel().astype(np.float64) for name in names])
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:_prune_count(sparsity, flat.size)]] = False
    masks, offset = {}, 0
    for name in names:
        size = weights[name].size
        masks[name] = keep[offset:offset + size].reshape(weights[name].shape)
        offset += size
    return masks


def prunable_weights(model: LightX3ECG) -> Dict[str, np.ndarray]:
    """Conv and FC weight tensors in parameter order; BN parameters and biases are excluded."""
    return {name: p.value for name, p in model.named_parameters() if p.prunable}


def prune_global_l1(model: LightX3ECG, sparsity: float = 0.8, mode: str = "global"
                    ) -> Tuple[LightX3ECG, Dict[str, np.ndarray]]:
    """Zero the smallest-magnitude prunable weights of ``model`` in place; returns (model, masks)."""
    masks = global_l1_masks(prunable_weights(model), sparsity, mode)
    params = dict(model.named_parameters())
    for name, mask in masks.items():
        params[name].value = params[name].value * mask.astype(params[name].value.dtype)
    total = sum(m.size for m in masks.values())
    kept = sum(int(m.sum()) for m in masks.values())
    logging.info(f"Pruned {total - kept} of {total} prunable weights ({mode}, sparsity {sparsity})")
    return model, masks


def fine_tune(model: LightX3ECG, dataset: ECGDataset, masks: Dict[str, np.ndarray], cfg: TrainConfig,
              epochs: int = 5, lr: float = 1e-4, progress: bool = True) -> LightX3ECG:
    """Continue training at a constant learning rate while pruned weights stay exactly zero."""
    Trainer(cfg, progress=progress).fit(model, dataset, epochs=epochs, constant_lr=lr, masks=masks,
                                        stream_key=("finetune",))
    return model


def to_sparse_model(model: LightX3ECG, masks: Dict[str, np.ndarray], sparsity: float, seed: int,
                    mode: str = "global") -> SparseModel:
    return sparsify(model.state_dict(), masks, {"sparsity": sparsity, "seed": seed, "norm": "l1", "mode": mode})


@dataclass
class ModelStats:
    params: int
    flops: int
    dense_bytes: Optional[int] = None
    sparse_bytes: Optional[int] = None
    nonzero_params: Optional[int] = None

    def to_text(self) -> str:
        lines = [f"params = {self.params}", f"params_m = {self.params / 1e6:.3f}",
                 f"flops = {self.flops}", f"flops_b = {self.flops / 1e9:.3f}"]
        if self.nonzero_params is not None:
            lines.append(f"nonzero_params = {self.nonzero_params}")
        if self.dense_bytes is not None:
            lines.append(f"dense_bytes = {self.dense_bytes}")
        if self.sparse_bytes is not None:
            lines.append(f"sparse_bytes = {self.sparse_bytes}")
            if self.dense_bytes:
                lines.append(f"size_ratio = {self.sparse_bytes / self.dense_bytes:.4f}")
        return "\n".join(lines) + "\n"


class _Tally:
    def __init__(self, batch: int, dense_convs: bool = False):
        self.batch = batch
        self.dense_convs = dense_convs
        self.params = 0
        self.flops = 0

    def conv(self, cin: int, cout: int, kernel: int, length: int, stride: int = 1, padding: Optional[int] = None,
             groups: int = 1, bias: bool = False) -> int:
        padding = kernel // 2 if padding is None else padding
        out_length = ops.conv_output_length(length, kernel, stride, padding)
        self.params += cout * (cin // groups) * kernel + (cout if bias else 0)
        self.flops += 2 * self.batch * cout * out_length * (cin // groups) * kernel
        if bias:
            self.flops += self.batch * cout * out_length
        return out_length

    def dsconv(self, cin: int, cout: int, kernel: int, length: int, stride: int = 1) -> int:
        if self.dense_convs:
            return self.conv(cin, cout, kernel, length, stride)
        length = self.conv(cin, cin, kernel, length, stride, groups=cin)
        return self.conv(cin, cout, 1, length)

    def fc(self, n_in: int, n_out: int, bias: bool = True) -> None:
        self.params += n_in * n_out + (n_out if bias else 0)
        self.flops += 2 * self.batch * n_in * n_out + (self.batch * n_out if bias else 0)

    def bn(self, channels: int) -> None:
        self.params += 2 * channels


def _backbone_tally(tally: _Tally, spec: ModelSpec) -> None:
    cfg = spec.backbone
    length = tally.dsconv(1, cfg.stem_channels, cfg.stem_kernel, spec.input_length, cfg.stem_stride)
    tally.bn(cfg.stem_channels)
    if cfg.stem_pool:
        length = ops.conv_output_length(length, 3, 2, 1)
    in_ch = cfg.stem_channels
    for stage in cfg.stages:
        for i in range(stage.blocks):
            stride = stage.stride if i == 0 else 1
            block_in = in_ch if i == 0 else stage.out_ch
            out_length = tally.dsconv(block_in, stage.out_ch, stage.kernel, length, stride)
            tally.bn(stage.out_ch)
            tally.dsconv(stage.out_ch, stage.out_ch, stage.kernel, out_length)
            tally.bn(stage.out_ch)
            hidden = max(1, stage.out_ch // cfg.se_reduction)
            tally.fc(stage.out_ch, hidden)
            tally.fc(hidden, stage.out_ch)
            if stride != 1 or block_in != stage.out_ch:
                tally.conv(block_in, stage.out_ch, 1, length, stride, padding=0)
                tally.bn(stage.out_ch)
            length = out_length
        in_ch = stage.out_ch


def count_params_flops(spec: ModelSpec, batch: int = 1) -> Tuple[int, int]:
    """Closed-form parameter count and FLOPs (MAC = 2 FLOPs, bias add = 1) of one forward pass."""
    tally = _Tally(batch)
    for _ in range(spec.n_leads):
        _backbone_tally(tally, spec)
    d = spec.backbone.feature_dim
    tally.fc(spec.n_leads * d, spec.hidden_dim)
    tally.bn(spec.hidden_dim)
    tally.fc(spec.hidden_dim, spec.n_leads)
    tally.fc(d, spec.n_classes)
    return tally.params, tally.flops


def dense_conv_backbone_params(spec: ModelSpec) -> int:
    """Backbone parameters of the same topology with every DSConv replaced by a dense conv."""
    tally = _Tally(1, dense_convs=True)
    _backbone_tally(tally, spec)
    return tally.params


def backbone_params(spec: ModelSpec) -> int:
    tally = _Tally(1)
    _backbone_tally(tally, spec)
    return tally.params


def count_stats(spec: ModelSpec, model: Optional[LightX3ECG] = None, masks: Optional[Dict[str, np.ndarray]] = None,
                index_encoding: str = "varint") -> ModelStats:
    """Closed-form params/FLOPs plus dense and sparse serialized sizes when a model is given."""
    params, flops = count_params_flops(spec)
    stats = ModelStats(params=params, flops=flops)
    if model is not None:
        stats.dense_bytes = len(serialize(model, "dense"))
        stats.sparse_bytes = len(serialize(model, "sparse", masks, index_encoding=index_encoding))
        stats.nonzero_params = int(sum(np.count_nonzero(p.value) for p in model.parameters()))
    return stats


def instrumented_stats(model: LightX3ECG, batch: int = 1) -> ModelStats:
    """Params and FLOPs measured by executing an eval forward pass under ``ops.count_flops``."""
    x = np.zeros((batch, model.spec.n_leads, model.spec.input_length), dtype=model.dtype)
    model.eval()
    with ops.count_flops() as counter:
        model.forward(x)
    return ModelStats(params=model.num_parameters(), flops=counter.flops)


def compression_report(original: LightX3ECG, pruned: LightX3ECG, masks: Dict[str, np.ndarray],
                       index_encoding: str = "varint") -> pd.DataFrame:
    """Side-by-side params, FLOPs and checkpoint bytes for the original and pruned model."""
    rows: List[dict] = []
    for label, model, model_masks in (("original", original, None), ("pruned", pruned, masks)):
        stats = count_stats(model.spec, model, model_masks, index_encoding)
        rows.append({"model": label, **asdict(stats)})
    frame = pd.DataFrame(rows).set_index("model")
    frame["size_ratio"] = frame["sparse_bytes"] / frame.loc["original", "dense_bytes"]
    return frame
