"""Stateful layers built on the primitives in ``ops``.

A layer caches what it needs during ``forward`` and accumulates parameter
gradients during ``backward``. Layers are therefore single-writer objects: run
one forward/backward pair at a time per instance, or work on a ``replica``.
"""
import copy
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError


class Parameter:
    """Trainable array with its gradient slot.

    ``prunable`` marks conv/FC weights (the magnitude-pruning set), ``decay``
    marks tensors that receive weight decay. BN parameters and biases carry
    neither flag.
    """

    def __init__(self, value: np.ndarray, prunable: bool = False, decay: bool = False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.prunable = prunable
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, prunable={self.prunable})"


def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def bias_uniform(size: int, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size).astype(dtype)


_CACHE_TYPES = (np.ndarray, list, ops.BatchNormCache)


class Layer:
    training = False

    def _transient_state(self) -> Iterator[object]:
        """Objects cached by forward/backward (underscore attributes holding arrays)."""
        for name, attr in vars(self).items():
            if name.startswith("_") and isinstance(attr, _CACHE_TYPES):
                yield attr

    def modules(self) -> Iterator["Layer"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def replica(self) -> "Layer":
        """Eval-mode working copy sharing parameter values and buffers.

        The copy has its own gradient slots and caches, so forward/backward on
        it never writes to ``self``.
        """
        memo = {}
        for p in self.parameters():
            memo[id(p.value)] = p.value
            memo[id(p.grad)] = None
        for _, buf in self.named_buffers():
            memo[id(buf)] = buf
        for layer in self.modules():
            for cached in layer._transient_state():
                memo.setdefault(id(cached), None)
        twin = copy.deepcopy(self, memo)
        twin.zero_grad()
        return twin.eval()

    def _children(self) -> Iterator[Tuple[str, "Layer"]]:
        for name, attr in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(attr, Layer):
                yield name, attr
            elif isinstance(attr, list) and attr and all(isinstance(a, Layer) for a in attr):
                for i, child in enumerate(attr):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, attr in vars(self).items():
            if not name.startswith("_") and isinstance(attr, Parameter):
                yield f"{prefix}{name}", attr
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self.own_buffers().items():
            yield f"{prefix}{name}", buf
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Layer":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        self._cast_buffers(dtype)
        for _, child in self._children():
            child.astype(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass


class Conv1d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, groups: int = 1, bias: bool = False, dtype=np.float32):
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        fan_in = (in_ch // groups) * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch // groups, kernel), fan_in, rng, dtype),
                                prunable=True, decay=True)
        self.bias = Parameter(bias_uniform(out_ch, fan_in, rng, dtype)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        self._x = None

    def conv_params(self) -> ops.ConvParams:
        return ops.ConvParams(
            weight=self.weight.value,
            bias=self.bias.value if self.bias is not None else None,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.conv1d_forward(x, self.conv_params())

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = ops.conv1d_backward(self._x, self.conv_params(), grad_out)
        self.weight.grad += grad_w
        if self.bias is not None:
            self.bias.grad += grad_b
        return grad_x


class DSConv1d(Layer):
    """Depthwise conv (one filter per input channel) followed by a 1x1 pointwise conv."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 dtype=np.float32):
        self.depthwise = Conv1d(in_ch, in_ch, kernel, rng, stride=stride, groups=in_ch, dtype=dtype)
        self.pointwise = Conv1d(in_ch, out_ch, 1, rng, dtype=dtype)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.dsconv1d(x, self.depthwise.conv_params(), self.pointwise.conv_params())

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        # the depthwise output is recomputed rather than cached
        grad_x, dw_grads, pw_grads = ops.dsconv1d_backward(self._x, self.depthwise.conv_params(),
                                                          self.pointwise.conv_params(), grad_out)
        for conv, (grad_w, grad_b) in ((self.depthwise, dw_grads), (self.pointwise, pw_grads)):
            conv.weight.grad += grad_w
            if conv.bias is not None:
                conv.bias.grad += grad_b
        return grad_x


class BatchNorm1d(Layer):
    """BatchNorm over [B, C, L] or [B, C] inputs (the latter treated as L = 1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        state = ops.BatchNormState.create(channels, dtype)
        self.gamma = Parameter(state.gamma)
        self.beta = Parameter(state.beta)
        self._state = state
        self._state.eps = eps
        self._state.momentum = momentum
        self._cache = None
        self._flat = False

    @property
    def state(self) -> ops.BatchNormState:
        self._state.gamma = self.gamma.value
        self._state.beta = self.beta.value
        self._state.training = self.training
        return self._state

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self._state.running_mean, "running_var": self._state.running_var}

    def _cast_buffers(self, dtype) -> None:
        self._state.running_mean = self._state.running_mean.astype(dtype)
        self._state.running_var = self._state.running_var.astype(dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._flat = x.ndim == 2
        x3 = x[:, :, None] if self._flat else x
        out, self._cache = ops.batchnorm1d_forward(x3, self.state)
        return out[:, :, 0] if self._flat else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g3 = grad_out[:, :, None] if self._flat else grad_out
        grad_x, grad_gamma, grad_beta = ops.batchnorm1d_backward(g3, self._cache)
        self.gamma.grad += grad_gamma
        self.beta.grad += grad_beta
        return grad_x[:, :, 0] if self._flat else grad_x


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.relu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return ops.relu_backward(grad_out, self._x)


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = ops.sigmoid(x)
        return self._y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return ops.sigmoid_backward(grad_out, self._y)


class MaxPool1d(Layer):
    def __init__(self, kernel: int = 3, stride: int = 2, padding: int = 1):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self._positions = None
        self._length = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._length = x.shape[2]
        out, self._positions = ops.maxpool1d_forward(x, self.kernel, self.stride, self.padding)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return ops.maxpool1d_backward(grad_out, self._positions, self._length, self.padding)


class GlobalAvgPool(Layer):
    """Collapses length and returns [B, C]."""

    def __init__(self):
        self._length = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._length = x.shape[2]
        return ops.global_avg_pool(x)[:, :, 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return ops.global_avg_pool_backward(grad_out[:, :, None], self._length)


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = Parameter(np.zeros((n_out, n_in), dtype=dtype), prunable=True, decay=True)
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        self.reset_parameters(rng)
        self._x = None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        dtype = self.weight.value.dtype
        self.weight.value = kaiming_uniform((self.n_out, self.n_in), self.n_in, rng, dtype)
        if self.bias is not None:
            self.bias.value = bias_uniform(self.n_out, self.n_in, rng, dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.fully_connected(x, self.weight.value, self.bias.value if self.bias is not None else None)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = ops.fully_connected_backward(self._x, self.weight.value, grad_out,
                                                              has_bias=self.bias is not None)
        self.weight.grad += grad_w
        if self.bias is not None:
            self.bias.grad += grad_b
        return grad_x


class Dropout(Layer):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        out, self._mask = ops.dropout(x, self.rate, self.training, rng)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask
