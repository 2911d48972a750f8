"""Layers with hand-derived backward passes.

Arrays are ``(batch, channels, length)`` for the convolutional part and
``(batch, features)`` after ``Flatten``. Each layer keeps ``params`` and the
matching ``grads`` in dicts keyed by parameter name.
"""

from __future__ import annotations

import numpy as np

from .init import he_normal_init
from .rng import SplitMix64


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv1d(Layer):
    """Stride-1 cross-correlation with symmetric zero padding ('same')."""

    kind = "Conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: SplitMix64 | None = None, dtype=np.float64):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for symmetric same padding")
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        fan_in = in_channels * kernel_size
        shape = (out_channels, in_channels, kernel_size)
        w = he_normal_init(shape, fan_in, rng) if rng is not None else np.zeros(shape)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_channels, dtype=dtype)}
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size}

    def forward(self, x):
        b, c, n = x.shape
        if c != self.in_channels:
            raise ValueError(f"Conv1d expected {self.in_channels} channels, got {c}")
        k = self.kernel_size
        pad = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        # cols[b, l, c, j] = xp[b, c, l + j]
        cols = np.stack([xp[:, :, j:j + n] for j in range(k)], axis=-1)
        cols = cols.transpose(0, 2, 1, 3).reshape(b * n, c * k)
        w2 = self.params["weight"].reshape(self.out_channels, c * k)
        y = cols @ w2.T + self.params["bias"]
        self._cache = (cols, x.shape)
        return np.ascontiguousarray(y.reshape(b, n, self.out_channels).transpose(0, 2, 1))

    def backward(self, dy):
        cols, (b, c, n) = self._cache
        k = self.kernel_size
        pad = (k - 1) // 2
        dy2 = dy.transpose(0, 2, 1).reshape(b * n, self.out_channels)
        w2 = self.params["weight"].reshape(self.out_channels, c * k)
        self.grads["weight"] = (dy2.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] = dy2.sum(axis=0)
        dcols = (dy2 @ w2).reshape(b, n, c, k)
        dxp = np.zeros((b, c, n + 2 * pad), dtype=dy.dtype)
        for j in range(k):
            dxp[:, :, j:j + n] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dxp[:, :, pad:pad + n]


class BatchNorm1d(Layer):
    """Per-channel normalization over batch and length."""

    kind = "BatchNorm1d"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x):
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if not self.training:
            mean = self.buffers["running_mean"][None, :, None]
            var = self.buffers["running_var"][None, :, None]
            self._cache = None
            return gamma * (x - mean) / np.sqrt(var + self.eps) + beta

        if x.shape[0] < 2:
            raise ValueError("batch normalization in training mode needs batch size >= 2")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        m = x.shape[0] * x.shape[2]
        mom = self.momentum
        self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
        self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * var * m / (m - 1)
        self._cache = (xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward through BatchNorm1d in eval mode is not supported")
        xhat, inv_std = self._cache
        m = dy.shape[0] * dy.shape[2]
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2))
        self.grads["beta"] = dy.sum(axis=(0, 2))
        dxhat = dy * self.params["gamma"][None, :, None]
        s1 = dxhat.sum(axis=(0, 2))[None, :, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        return inv_std[None, :, None] / m * (m * dxhat - s1 - xhat * s2)


class Relu(Layer):
    kind = "Relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_dim: int, out_dim: int, rng: SplitMix64 | None = None, dtype=np.float64):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        w = he_normal_init((in_dim, out_dim), in_dim, rng) if rng is not None else np.zeros((in_dim, out_dim))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_dim, dtype=dtype)}
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x):
        if x.shape[1] != self.in_dim:
            raise ValueError(f"Dense expected {self.in_dim} features, got {x.shape[1]}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] = self._x.T @ dy
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for any finite z."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float64) if z.dtype.kind != "f" else z.dtype)
    pos = z >= 0
    # |z| is capped where exp would underflow; the result there is exactly 0 or 1
    out[pos] = 1.0 / (1.0 + np.exp(-np.minimum(z[pos], 708.0)))
    ez = np.exp(np.maximum(z[~pos], -708.0))
    out[~pos] = np.where(z[~pos] < -708.0, 0.0, ez / (1.0 + ez))
    return out


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Sequential:
    """Ordered layer stack with named parameters ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def train(self):
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for layer in self.layers:
            layer.training = False
        return self

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def set_param(self, name: str, value: np.ndarray):
        i, key = name.split(".", 1)
        self.layers[int(i)].params[key] = value

    def set_buffer(self, name: str, value: np.ndarray):
        i, key = name.split(".", 1)
        self.layers[int(i)].buffers[key] = value

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def n_params(self) -> int:
        return sum(v.size for v in self.named_params().values())
