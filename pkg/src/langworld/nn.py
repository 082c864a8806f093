"""Small layer library on top of the autodiff substrate.

Modules own their parameters as Tensors and expose them as a flat
dotted-path dict for optimizers and checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self) -> dict[str, Tensor]:
        """All parameter tensors by dotted path, frozen ones included."""
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                for k, v in value.parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        params = self.parameters()
        for name, tens in params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key}")
            arr = state[key]
            if tuple(arr.shape) != tuple(tens.data.shape):
                raise ValueError(f"shape mismatch for {key}: {arr.shape} vs {tens.data.shape}")
            tens.data = arr.astype(tens.data.dtype)


def glorot(rng: np.random.Generator, shape, dtype=np.float32, gain: float = 1.0) -> Tensor:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    scale = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, bias: bool = True):
        self.w = glorot(rng, (d_in, d_out), dtype)
        self.b = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = ones((dim,), dtype)
        self.beta = zeros((dim,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        scale = np.sqrt(2.0 / (fan_in + c_out))
        self.w = Tensor((rng.standard_normal((c_out, c_in, kernel, kernel)) * scale).astype(dtype),
                        requires_grad=True)
        self.b = zeros((c_out,), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class SelfAttention2d(Module):
    """Single-head self-attention over the spatial grid of an NCHW map,
    with a residual connection."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.q = Linear(rng, channels, channels, dtype)
        self.k = Linear(rng, channels, channels, dtype)
        self.v = Linear(rng, channels, channels, dtype)
        self.proj = Linear(rng, channels, channels, dtype)
        self.norm = LayerNorm(channels, dtype)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        seq = ad.transpose(ad.reshape(x, (b, c, h * w)), (0, 2, 1))  # (b, hw, c)
        n = self.norm(seq)
        q, k, v = self.q(n), self.k(n), self.v(n)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
        scores = ad.mul(scores, 1.0 / np.sqrt(c))
        attn = ad.softmax(scores, axis=-1)
        mixed = self.proj(ad.matmul(attn, v))
        seq = ad.add(seq, mixed)
        return ad.reshape(ad.transpose(seq, (0, 2, 1)), (b, c, h, w))


class SkipMLP(Module):
    """MLP with residual skip connections of stride 2: the activation from
    two layers back is added before the nonlinearity."""

    def __init__(self, rng, d_in: int, hidden: int, n_layers: int, d_out: int,
                 dtype=np.float32, activation: str = "elu"):
        self.inp = Linear(rng, d_in, hidden, dtype)
        self.hiddens = [Linear(rng, hidden, hidden, dtype) for _ in range(n_layers - 1)]
        self.out = Linear(rng, hidden, d_out, dtype)
        self.activation = activation

    def _act(self, x: Tensor) -> Tensor:
        return ad.elu(x) if self.activation == "elu" else ad.relu(x)

    def __call__(self, x: Tensor) -> Tensor:
        h = self._act(self.inp(x))
        prev2 = None  # activation two layers back
        prev1 = h
        for i, layer in enumerate(self.hiddens):
            z = layer(prev1)
            if prev2 is not None:
                z = ad.add(z, prev2)
            h = self._act(z)
            prev2 = prev1
            prev1 = h
        return self.out(prev1)
