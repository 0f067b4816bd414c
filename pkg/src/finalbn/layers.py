"""Layers with hand-written backward passes, the classifier model and its checkpoint format.

Every layer caches what its backward pass needs during ``forward`` and writes
parameter gradients into ``Param.grad`` during ``backward``. Only one
forward/backward pair may be in flight per layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    BatchTooSmallError,
    DimensionError,
    as_tensor,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    reduce_stats,
)

CHECKPOINT_MAGIC = b"FNBN0001"


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(repr=False, default=None)
    decay: bool = False  # weight decay applies to weights only

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    name = "layer"

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def trainable_params(self) -> list[Param]:
        return self.params()

    def state_tensors(self) -> list[np.ndarray]:
        """Arrays persisted in checkpoints, in a fixed order."""
        return [p.value for p in self.params()]


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        self.name = name
        self.weight = Param(f"{name}.weight", glorot_uniform((n_in, n_out), n_in, n_out, rng), decay=True)
        self.bias = Param(f"{name}.bias", np.zeros(n_out))
        self._x = None

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[0]:
            raise DimensionError(f"{self.name}: input {x.shape} vs weight {self.weight.value.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        self.weight.grad = self._x.T @ grad
        self.bias.grad = grad.sum(axis=0)
        return grad @ self.weight.value.T

    def params(self):
        return [self.weight, self.bias]


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, name: str = "conv"):
        self.name = name
        shape = (c_out, c_in, k, k)
        kernel = glorot_uniform(shape, c_in * k * k, c_out * k * k, rng)
        self.kernel = Param(f"{name}.kernel", kernel, decay=True)
        self.bias = Param(f"{name}.bias", np.zeros(c_out))
        self._x = None

    def forward(self, x, training):
        self._x = x
        return conv2d_forward(x, self.kernel.value, self.bias.value)

    def backward(self, grad):
        grad_x, self.kernel.grad, self.bias.grad = conv2d_backward(grad, self._x, self.kernel.value)
        return grad_x

    def params(self):
        return [self.kernel, self.bias]


class ReLU(Layer):
    name = "relu"

    def __init__(self, name: str = "relu"):
        self.name = name
        self.preactivation = None

    def forward(self, x, training):
        self.preactivation = x
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * (self.preactivation > 0)


class Dropout(Layer):
    """Inverted dropout; the identity in eval mode."""

    def __init__(self, rate: float, rng: np.random.Generator, name: str = "dropout"):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.name = name
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class AdaptiveAvgPool(Layer):
    """Global spatial mean: ``[n, c, h, w] -> [n, c]``."""

    name = "pool"

    def __init__(self, name: str = "pool"):
        self.name = name
        self._shape = None

    def forward(self, x, training):
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expected 4-d input, got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class BatchNorm(Layer):
    """Batch normalization over the batch axis (and spatial axes for 4-d input).

    In train mode the batch mean and biased variance normalize the input and
    update the running estimates. In eval mode, or whenever the layer is
    frozen, the running estimates are used and nothing is updated.
    """

    def __init__(
        self,
        num_features: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        frozen: bool = False,
        learnable: bool = True,
        name: str = "bn",
    ):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.name = name
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.frozen = frozen
        self.learnable = learnable
        self.gamma = Param(f"{name}.gamma", np.ones(num_features))
        self.beta = Param(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._cache = None

    def _flatten(self, x):
        if x.ndim == 4:
            n, c, h, w = x.shape
            return x.transpose(0, 2, 3, 1).reshape(-1, c)
        if x.ndim == 2:
            return x
        raise DimensionError(f"{self.name}: expected 2-d or 4-d input, got {x.shape}")

    def _unflatten(self, y, shape):
        if len(shape) == 4:
            n, c, h, w = shape
            return np.ascontiguousarray(y.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        return y

    def forward(self, x, training):
        x = as_tensor(x)
        check_finite(x, f"{self.name} input")
        flat = self._flatten(x)
        if flat.shape[1] != self.num_features:
            raise DimensionError(f"{self.name}: expected {self.num_features} features, got {flat.shape[1]}")
        use_batch = training and not self.frozen
        if use_batch:
            if flat.shape[0] < 2:
                raise BatchTooSmallError(
                    f"{self.name}: train-mode batch norm needs at least 2 samples, got {flat.shape[0]}"
                )
            mean, var = reduce_stats(flat)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean) * inv_std
        self._cache = (xhat, inv_std, use_batch, x.shape)
        y = self.gamma.value * xhat + self.beta.value
        return self._unflatten(y, x.shape)

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        xhat, inv_std, use_batch, shape = self._cache
        if tuple(grad.shape) != tuple(shape):
            raise DimensionError(f"{self.name}: grad {grad.shape} does not match cached input {shape}")
        g = self._flatten(grad)
        self.beta.grad = g.sum(axis=0)
        self.gamma.grad = (g * xhat).sum(axis=0)
        dxhat = g * self.gamma.value
        if use_batch:
            m = g.shape[0]
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return self._unflatten(dx, shape)

    def params(self):
        return [self.gamma, self.beta]

    def trainable_params(self):
        if self.frozen or not self.learnable:
            return []
        return [self.gamma, self.beta]

    def state_tensors(self):
        return [self.gamma.value, self.beta.value, self.running_mean, self.running_var]


@dataclass(frozen=True)
class ModelSpec:
    """Desk-scale CNN trunk followed by the fixed classifier head.

    Head: pool -> BN -> dropout -> dense -> ReLU -> BN -> dropout -> dense,
    plus a BN over the logits when ``final_bn`` is set.
    """

    in_channels: int = 1
    trunk_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    hidden_size: int = 32
    num_classes: int = 2
    final_bn: bool = False
    freeze_trunk_bn: bool = False
    final_bn_learnable: bool = False
    dropout: tuple[float, float] = (0.25, 0.5)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


class Model:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dropout_rng: np.random.Generator | None = None):
        self.spec = spec
        if dropout_rng is None:
            dropout_rng = rng
        bn = dict(eps=spec.bn_eps, momentum=spec.bn_momentum)
        layers: list[Layer] = []
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.trunk_channels):
            layers += [
                Conv2d(c_in, c_out, spec.kernel_size, rng, name=f"trunk.conv{i}"),
                BatchNorm(c_out, frozen=spec.freeze_trunk_bn, name=f"trunk.bn{i}", **bn),
                ReLU(name=f"trunk.relu{i}"),
            ]
            c_in = c_out
        layers += [
            AdaptiveAvgPool(name="head.pool"),
            BatchNorm(c_in, name="head.bn0", **bn),
            Dropout(spec.dropout[0], dropout_rng, name="head.drop0"),
            Dense(c_in, spec.hidden_size, rng, name="head.dense0"),
            ReLU(name="head.relu0"),
            BatchNorm(spec.hidden_size, name="head.bn1", **bn),
            Dropout(spec.dropout[1], dropout_rng, name="head.drop1"),
            Dense(spec.hidden_size, spec.num_classes, rng, name="head.dense1"),
        ]
        if spec.final_bn:
            layers.append(
                BatchNorm(spec.num_classes, learnable=spec.final_bn_learnable, name="head.final_bn", **bn)
            )
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        x = as_tensor(x)
        if training and x.shape[0] < 2:
            raise BatchTooSmallError(f"train-mode forward needs at least 2 samples, got {x.shape[0]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return check_finite(x, "logits")

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def trainable_params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.trainable_params()]

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def relus(self) -> list[ReLU]:
        return [layer for layer in self.layers if isinstance(layer, ReLU)]

    def dropouts(self) -> list[Dropout]:
        return [layer for layer in self.layers if isinstance(layer, Dropout)]

    def state_tensors(self) -> list[np.ndarray]:
        return [t for layer in self.layers for t in layer.state_tensors()]

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        from .training import softmax

        out = [softmax(self.forward(x[i:i + batch_size], training=False)) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.spec.num_classes))
        return np.concatenate(out)


def save_checkpoint(model: Model, path) -> None:
    """Write every state tensor as rank, dims and little-endian float64 values."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for t in model.state_tensors():
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_checkpoint(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:8]!r}")
    pos = 8
    tensors = []
    while pos < len(data):
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        tensors.append(values.astype(np.float64).reshape(dims))
    return tensors


def load_checkpoint(model: Model, path) -> None:
    """Copy checkpointed tensors into ``model`` in place; shapes must match."""
    tensors = read_checkpoint(path)
    targets = model.state_tensors()
    if len(tensors) != len(targets):
        raise ValueError(f"{path}: expected {len(targets)} tensors, found {len(tensors)}")
    for i, (src, dst) in enumerate(zip(tensors, targets)):
        if src.shape != dst.shape:
            raise DimensionError(f"{path}: tensor {i} has shape {src.shape}, model expects {dst.shape}")
        dst[...] = src
