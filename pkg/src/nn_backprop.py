"""
NN Backprop Module
==================
Purpose: Minimal reverse-mode substrate hosting the correlated VAE

Layer kinds: dense, conv1d, rectifier (ReLU). Every layer caches what its backward pass
needs during forward; parameter gradients accumulate until zero_grad().
All arithmetic is float64.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""


class NonFiniteError(RuntimeError):
    """NaN or Inf appeared in a tensor."""


class BackwardBeforeForwardError(RuntimeError):
    """backward() was called without a recorded forward pass."""


# ==========================================
# TENSORS
# ==========================================


@dataclass
class Tensor:
    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def check_finite(values: np.ndarray, where: str):
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite values in {where}")


# ==========================================
# LAYERS
# ==========================================


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def parameters(self) -> List[Tensor]:
        return []

    def named_parameters(self) -> Dict[str, Tensor]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """y = x W^T + b on the flattened trailing dimensions of x."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(glorot_uniform((out_features, in_features), in_features, out_features, rng))
        self.bias = Tensor(np.zeros(out_features))

    @classmethod
    def identity(cls, features: int) -> "Dense":
        layer = cls(features, features)
        layer.weight.values[...] = np.eye(features)
        return layer

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} input features, got {flat.shape[1]}")
        self._cache = (x.shape, flat)
        return flat @ self.weight.values.T + self.bias.values

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        in_shape, flat = self._cache
        self.weight.grad += grad_out.T @ flat
        self.bias.grad += grad_out.sum(axis=0)
        return (grad_out @ self.weight.values).reshape(in_shape)


class Conv1D(Layer):
    """
    1-D cross-correlation over (batch, channels, width) inputs.
    Padding defaults to kernel_size // 2, which keeps the width for odd kernels at stride 1.
    """

    kind = "conv1d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Tensor(
            glorot_uniform(
                (out_channels, in_channels, kernel_size),
                in_channels * kernel_size,
                out_channels * kernel_size,
                rng,
            )
        )
        self.bias = Tensor(np.zeros(out_channels))

    def output_width(self, width: int) -> int:
        return (width + 2 * self.padding - self.kernel_size) // self.stride + 1

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects (batch, {self.in_channels}, width), got {x.shape}")
        if self.output_width(x.shape[2]) < 1:
            raise ShapeError(f"conv1d kernel {self.kernel_size} is wider than the padded input {x.shape[2]}")
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p)))
        windows = sliding_window_view(padded, self.kernel_size, axis=2)[:, :, :: self.stride, :]
        self._cache = (x.shape, padded.shape, windows)
        out = np.einsum("bcwk,ock->bow", windows, self.weight.values)
        return out + self.bias.values[None, :, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        in_shape, padded_shape, windows = self._cache
        self.weight.grad += np.einsum("bow,bcwk->ock", grad_out, windows)
        self.bias.grad += grad_out.sum(axis=(0, 2))

        grad_windows = np.einsum("bow,ock->bcwk", grad_out, self.weight.values)
        grad_padded = np.zeros(padded_shape)
        n_out = grad_out.shape[2]
        for j in range(self.kernel_size):
            grad_padded[:, :, j : j + self.stride * n_out : self.stride] += grad_windows[:, :, :, j]
        p = self.padding
        return grad_padded[:, :, p : p + in_shape[2]]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._cache, grad_out, 0.0)


# ==========================================
# NETWORK
# ==========================================


class Network:
    """Sequential stack of layers."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self._recorded = False
        self._output_shape: Optional[Tuple[int, ...]] = None

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            f"{i}.{name}": tensor.values.copy()
            for i, layer in enumerate(self.layers)
            for name, tensor in layer.named_parameters().items()
        }

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.named_parameters().items():
                key = f"{i}.{name}"
                if key not in state:
                    raise KeyError(f"checkpoint has no entry for {key}")
                if state[key].shape != tensor.shape:
                    raise ShapeError(f"layer {i} {name}: checkpoint shape {state[key].shape} != {tensor.shape}")
                tensor.values[...] = state[key]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        check_finite(out, "network input")
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            check_finite(out, f"output of layer {i} ({layer.kind})")
        self._recorded = True
        self._output_shape = out.shape
        return out

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        if not self._recorded:
            raise BackwardBeforeForwardError("backward() needs a recorded forward pass")
        grad = np.asarray(grad_output, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            grad = self.layers[i].backward(grad)
            check_finite(grad, f"gradient at layer {i} ({self.layers[i].kind})")
        return grad

    __call__ = forward


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Network, grad_output: Optional[np.ndarray] = None) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Back-propagate d(loss)/d(output) and return (input gradient, parameter gradients).
    Without `grad_output` the loss is the sum of the last forward output.
    """
    if grad_output is None:
        if not net._recorded:
            raise BackwardBeforeForwardError("backward() needs a recorded forward pass")
        grad_output = np.ones(net._output_shape)
    grad_input = net.backward(grad_output)
    return grad_input, [p.grad.copy() for p in net.parameters()]


# ==========================================
# OPTIMIZER
# ==========================================


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> List[np.ndarray]:
    """Pure update p - lr * g."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    updated = []
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")
        updated.append(np.asarray(p, dtype=np.float64) - lr * np.asarray(g, dtype=np.float64))
    return updated


class SGD:
    """SGD with optional momentum and global-norm gradient clipping."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        momentum: float = 0.0,
        clip_norm: Optional[float] = None,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params)))

    def step(self):
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += scale * p.grad
            p.values -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ==========================================
# CHECKPOINTS
# ==========================================


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None):
    """Versioned npz dump of named arrays plus JSON metadata."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__version__"] = np.array(CHECKPOINT_VERSION)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **payload)
    logger.debug(f"Checkpoint with {len(arrays)} arrays written to {path}")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return arrays, meta
