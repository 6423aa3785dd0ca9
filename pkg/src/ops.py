"""Forward and backward primitives for 1D convolutional networks.

Arrays use the [batch, channels, length] layout; fully connected ops use
[batch, features]. Every function is pure except ``batchnorm1d_forward`` in
train mode, which updates the running statistics of the state it is given.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax
from scipy.special import softmax as scipy_softmax

from .errors import ShapeError
from .tensor import ArrayLike3, as_array3


class FlopCounter:
    """Accumulates multiply-adds executed by conv and FC ops while active."""

    def __init__(self):
        self.flops = 0
        self.by_kind: Dict[str, int] = {}

    def add(self, kind: str, flops: int) -> None:
        self.flops += int(flops)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)


_active_counter: Optional[FlopCounter] = None


@contextmanager
def count_flops():
    """Instrument every conv/FC executed inside the block.

    A multiply-accumulate counts as 2 FLOPs, a bias add as 1.
    """
    global _active_counter
    previous = _active_counter
    counter = FlopCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = previous


def _record(kind: str, flops: int) -> None:
    if _active_counter is not None:
        _active_counter.add(kind, flops)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weight: np.ndarray  # [out_ch, in_ch // groups, kernel]
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def validate(self) -> None:
        if self.weight.ndim != 3:
            raise ShapeError(f"Conv weight must be [out_ch, in_ch_per_group, kernel], got {self.weight.shape}")
        if self.groups < 1 or self.out_channels % self.groups != 0:
            raise ShapeError(f"groups={self.groups} does not divide out_channels={self.out_channels}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"Invalid stride={self.stride} / padding={self.padding}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"Conv bias shape {self.bias.shape} does not match out_channels={self.out_channels}")


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _check_conv_input(x: np.ndarray, p: ConvParams) -> int:
    p.validate()
    batch, channels, length = x.shape
    if channels != p.in_channels:
        raise ShapeError(
            f"conv1d input shape {x.shape} incompatible with weight shape {p.weight.shape} (groups={p.groups})"
        )
    out_length = conv_output_length(length, p.kernel_size, p.stride, p.padding)
    if out_length < 1:
        raise ShapeError(
            f"conv1d output length {out_length} < 1 for input shape {x.shape} and weight shape {p.weight.shape}"
        )
    return out_length


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding)))


def conv1d_forward(x: ArrayLike3, p: ConvParams) -> np.ndarray:
    x = as_array3(x)
    out_length = _check_conv_input(x, p)
    batch = x.shape[0]
    groups = p.groups
    cin_g = p.weight.shape[1]
    cout_g = p.out_channels // groups
    kernel = p.kernel_size
    span = p.stride * (out_length - 1) + 1

    xg = _pad(x, p.padding).reshape(batch, groups, cin_g, -1)
    wg = p.weight.reshape(groups, cout_g, cin_g, kernel)
    out = np.zeros((batch, groups, cout_g, out_length), dtype=np.result_type(x, p.weight))
    for k in range(kernel):
        window = xg[..., k:k + span:p.stride]
        if cin_g == 1:
            out += wg[None, :, :, 0, k, None] * window
        else:
            out += np.matmul(wg[..., k], window)
        _record("conv", 2 * batch * p.out_channels * out_length * cin_g)

    out = out.reshape(batch, p.out_channels, out_length)
    if p.bias is not None:
        out += p.bias[None, :, None]
        _record("conv_bias", batch * p.out_channels * out_length)
    return out


def conv1d_backward(x: ArrayLike3, p: ConvParams, grad_out: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Return (grad_x, grad_weight, grad_bias) for ``conv1d_forward(x, p)``."""
    x = as_array3(x)
    out_length = _check_conv_input(x, p)
    batch, channels, length = x.shape
    expected = (batch, p.out_channels, out_length)
    if grad_out.shape != expected:
        raise ShapeError(f"conv1d grad_out shape {grad_out.shape} does not match output shape {expected}")

    groups = p.groups
    cin_g = p.weight.shape[1]
    cout_g = p.out_channels // groups
    kernel = p.kernel_size
    span = p.stride * (out_length - 1) + 1

    xg = _pad(x, p.padding).reshape(batch, groups, cin_g, -1)
    wg = p.weight.reshape(groups, cout_g, cin_g, kernel)
    go = grad_out.reshape(batch, groups, cout_g, out_length)
    grad_xg = np.zeros(xg.shape, dtype=np.result_type(x, grad_out))
    grad_wg = np.zeros(wg.shape, dtype=np.result_type(p.weight, grad_out))

    for k in range(kernel):
        positions = slice(k, k + span, p.stride)
        window = xg[..., positions]
        if cin_g == 1:
            grad_wg[:, :, 0, k] = np.einsum("bgol,bgl->go", go, window[:, :, 0])
            grad_xg[:, :, 0, positions] += np.einsum("bgol,go->bgl", go, wg[:, :, 0, k])
        else:
            grad_wg[..., k] = np.matmul(go, np.swapaxes(window, -1, -2)).sum(axis=0)
            grad_xg[..., positions] += np.matmul(np.swapaxes(wg[..., k], -1, -2), go)

    grad_x = grad_xg.reshape(batch, channels, -1)[:, :, p.padding:p.padding + length]
    grad_bias = grad_out.sum(axis=(0, 2)) if p.bias is not None else None
    return np.ascontiguousarray(grad_x), grad_wg.reshape(p.weight.shape), grad_bias


def _check_dsconv(x: np.ndarray, depthwise: ConvParams, pointwise: ConvParams) -> None:
    channels = x.shape[1]
    if depthwise.groups != channels or depthwise.weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise conv must have groups == in_channels ({channels}), got groups={depthwise.groups} "
            f"and weight shape {depthwise.weight.shape}"
        )
    if pointwise.kernel_size != 1 or pointwise.groups != 1:
        raise ShapeError(
            f"pointwise conv must have kernel 1 and groups 1, got weight shape {pointwise.weight.shape} "
            f"and groups={pointwise.groups}"
        )


def dsconv1d(x: ArrayLike3, depthwise: ConvParams, pointwise: ConvParams) -> np.ndarray:
    """Depthwise-separable conv: per-channel conv followed by a 1x1 channel mix."""
    x = as_array3(x)
    _check_dsconv(x, depthwise, pointwise)
    return conv1d_forward(conv1d_forward(x, depthwise), pointwise)


def dsconv1d_backward(x: ArrayLike3, depthwise: ConvParams, pointwise: ConvParams, grad_out: np.ndarray):
    """Return (grad_x, (dw_grad_w, dw_grad_b), (pw_grad_w, pw_grad_b))."""
    x = as_array3(x)
    _check_dsconv(x, depthwise, pointwise)
    hidden = conv1d_forward(x, depthwise)
    grad_hidden, pw_w, pw_b = conv1d_backward(hidden, pointwise, grad_out)
    grad_x, dw_w, dw_b = conv1d_backward(x, depthwise, grad_hidden)
    return grad_x, (dw_w, dw_b), (pw_w, pw_b)


def dsconv_param_count(in_ch: int, out_ch: int, kernel: int, bias: bool = False) -> int:
    count = in_ch * kernel + in_ch * out_ch
    if bias:
        count += in_ch + out_ch
    return count


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm1d_forward(x: ArrayLike3, s: BatchNormState) -> Tuple[np.ndarray, BatchNormCache]:
    x = as_array3(x)
    channels = x.shape[1]
    if s.gamma.shape != (channels,):
        raise ShapeError(f"batchnorm input shape {x.shape} does not match {s.gamma.shape[0]} channels")

    if s.training:
        count = x.shape[0] * x.shape[2]
        if count < 2:
            raise ShapeError(f"batchnorm in train mode needs batch*length >= 2, got input shape {x.shape}")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = s.momentum
        s.running_mean[...] = (1.0 - m) * s.running_mean + m * mean
        s.running_var[...] = (1.0 - m) * s.running_var + m * var * count / (count - 1)
    else:
        mean = s.running_mean
        var = s.running_var

    inv_std = (1.0 / np.sqrt(var + s.eps)).astype(x.dtype)
    x_hat = (x - mean[None, :, None].astype(x.dtype)) * inv_std[None, :, None]
    out = s.gamma[None, :, None] * x_hat + s.beta[None, :, None]
    return out, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=s.gamma.copy(), training=s.training)


def batchnorm1d(x: ArrayLike3, s: BatchNormState) -> np.ndarray:
    return batchnorm1d_forward(x, s)[0]


def batchnorm1d_backward(grad_out: np.ndarray, cache: BatchNormCache
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_gamma, grad_beta)."""
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"batchnorm grad_out shape {grad_out.shape} does not match {cache.x_hat.shape}")
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    scale = (cache.gamma * cache.inv_std)[None, :, None]
    if not cache.training:
        return grad_out * scale, grad_gamma, grad_beta
    count = grad_out.shape[0] * grad_out.shape[2]
    grad_x = scale / count * (
        count * grad_out
        - grad_beta[None, :, None]
        - cache.x_hat * grad_gamma[None, :, None]
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * y * (1 - y)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the class axis of a 2-D logits view."""
    return scipy_softmax(np.atleast_2d(logits), axis=-1)


def softmax_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


_ACTIVATIONS = {
    "relu": (relu, lambda g, x, y: relu_backward(g, x)),
    "sigmoid": (sigmoid, lambda g, x, y: sigmoid_backward(g, y)),
    "softmax": (softmax, lambda g, x, y: softmax_backward(g, y)),
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind not in _ACTIVATIONS:
        raise ShapeError(f"Unknown activation '{kind}', expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind][0](x)


def activation_backward(grad_out: np.ndarray, x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind not in _ACTIVATIONS:
        raise ShapeError(f"Unknown activation '{kind}', expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind][1](grad_out, x, y)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def global_avg_pool(x: ArrayLike3) -> np.ndarray:
    x = as_array3(x)
    if x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool needs length >= 1, got {x.shape}")
    return x.mean(axis=2, keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, length: int) -> np.ndarray:
    return np.repeat(grad_out / length, length, axis=2)


def maxpool1d_forward(x: ArrayLike3, kernel: int, stride: int, padding: int
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Max-pool over length; returns (out, argmax positions in the padded input).

    Ties route to the lowest index.
    """
    x = as_array3(x)
    out_length = conv_output_length(x.shape[2], kernel, stride, padding)
    if out_length < 1:
        raise ShapeError(f"maxpool output length {out_length} < 1 for input shape {x.shape}")
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) if padding else x
    windows = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride][:, :, :out_length]
    offsets = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, offsets[..., None], axis=-1)[..., 0]
    positions = offsets + np.arange(out_length)[None, None, :] * stride
    return out, positions


def maxpool1d_backward(grad_out: np.ndarray, positions: np.ndarray, input_length: int, padding: int
                       ) -> np.ndarray:
    batch, channels, _ = grad_out.shape
    grad_padded = np.zeros((batch, channels, input_length + 2 * padding), dtype=grad_out.dtype)
    b_idx, c_idx, _ = np.indices(grad_out.shape)
    np.add.at(grad_padded, (b_idx, c_idx, positions), grad_out)
    return grad_padded[:, :, padding:padding + input_length]


# ---------------------------------------------------------------------------
# Fully connected and dropout
# ---------------------------------------------------------------------------

def fully_connected(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected input shape {x.shape} does not match weight shape {weight.shape}")
    out = x @ weight.T
    _record("fc", 2 * x.shape[0] * weight.shape[0] * weight.shape[1])
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"fully_connected bias shape {bias.shape} does not match weight shape {weight.shape}")
        out = out + bias
        _record("fc_bias", x.shape[0] * weight.shape[0])
    return out


def fully_connected_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, has_bias: bool = True):
    """Return (grad_x, grad_weight, grad_bias)."""
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"fully_connected grad_out shape {grad_out.shape} does not match "
                         f"output shape {(x.shape[0], weight.shape[0])}")
    grad_x = grad_out @ weight
    grad_weight = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_weight, grad_bias


def dropout(x: np.ndarray, rate: float, training: bool, rng: Optional[np.random.Generator]
            ) -> Tuple[np.ndarray, np.ndarray]:
    """Inverted dropout; returns (out, scale mask) so backward is ``grad * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng stream")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch for integer class targets."""
    targets = np.asarray(targets)
    batch, n_classes = logits.shape
    if targets.shape != (batch,):
        raise ShapeError(f"cross_entropy targets shape {targets.shape} does not match logits {logits.shape}")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise ShapeError(f"cross_entropy target index out of range [0, {n_classes})")
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(batch)
    loss = float(-log_probs[rows, targets].mean())
    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    return loss, (grad / batch).astype(logits.dtype)


def binary_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean BCE-with-logits over all elements, in the stable log-sum form."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy targets shape {targets.shape} does not match logits {logits.shape}")
    if np.any((targets != 0) & (targets != 1)):
        raise ShapeError("binary_cross_entropy targets must be 0/1")
    elementwise = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float(elementwise.mean())
    grad = (expit(logits) - targets) / logits.size
    return loss, grad.astype(logits.dtype)


def losses(logits: np.ndarray, targets: np.ndarray, kind: str) -> Tuple[float, np.ndarray]:
    if kind == "cross_entropy":
        return cross_entropy(logits, targets)
    if kind == "binary_cross_entropy":
        return binary_cross_entropy(logits, targets)
    logging.error(f"Unknown loss kind: {kind}")
    raise ShapeError(f"Unknown loss '{kind}', expected cross_entropy or binary_cross_entropy")
