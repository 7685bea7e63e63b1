"""Transformer / Conformer building blocks on top of :mod:`mspst.numcore`.

All sequence blocks work on padded batches ``(B, T, D)`` with a boolean
validity mask ``(B, T)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

NEG_INF = -1e9


@dataclass
class LayerConfig:
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0 or self.ffn_dim <= 0:
            raise ValueError("layer sizes must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Module:
    """Parameter container with torch-like naming and a train/eval flag."""

    training = False
    rng: np.random.Generator | None = None

    def named_parameters(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".", seen)
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True, rng: np.random.Generator | None = None):
        for m in self.modules():
            m.training = mode
            m.rng = rng
        return self

    def eval(self):
        return self.train(False)

    def dropout(self, x: Tensor, p: float) -> Tensor:
        if not self.training or p <= 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("train mode needs a seeded rng")
        keep = self.rng.random(x.shape) >= p
        return x * (keep / (1.0 - p))


def _init(rng, fan_in, shape):
    return nc.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = _init(rng, d_in, (d_in, d_out))
        self.bias = nc.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = nc.parameter(np.ones(d))
        self.beta = nc.parameter(np.zeros(d))

    def __call__(self, x):
        return nc.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, cfg: LayerConfig, rng):
        self.fc1 = Linear(cfg.model_dim, cfg.ffn_dim, rng)
        self.fc2 = Linear(cfg.ffn_dim, cfg.model_dim, rng)
        self.p = cfg.dropout

    def __call__(self, x):
        return self.fc2(self.dropout(nc.relu(self.fc1(x)), self.p))


def sinusoidal_positions(T: int, D: int) -> np.ndarray:
    """Interleaved sin/cos table of shape ``(T, D)``; column 2i is sin, 2i+1 is cos."""
    if D % 2:
        raise ValueError("D must be even")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, D, 2, dtype=np.float64) / D)
    table = np.empty((T, D))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; keeps the last weights for probing."""

    def __init__(self, cfg: LayerConfig, rng):
        d = cfg.model_dim
        self.heads = cfg.heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.p = cfg.dropout
        self.last_weights: np.ndarray | None = None

    def _split(self, x):
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q_in, kv_in, key_mask=None, causal=False):
        """Returns ``(output, weights)`` with weights shaped ``(B, H, Lq, Lk)``."""
        if q_in.shape[-1] != kv_in.shape[-1] or q_in.shape[-1] != self.wq.weight.shape[0]:
            raise ValueError(f"attention dim mismatch: {q_in.shape} vs {kv_in.shape}")
        B, Lq, D = q_in.shape
        Lk = kv_in.shape[1]
        q, k, v = self._split(self.wq(q_in)), self._split(self.wk(kv_in)), self._split(self.wv(kv_in))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(D // self.heads))
        allowed = np.ones((B, 1, Lq, Lk), dtype=bool)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            allowed = allowed & causal_mask(Lq)[None, None]
        if not allowed.all():
            scores = nc.masked_fill(scores, ~allowed, NEG_INF)
        w = nc.softmax(scores, axis=-1)
        self.last_weights = w.data
        ctx = self.dropout(w, self.p) @ v
        out = self.wo(ctx.transpose(0, 2, 1, 3).reshape(B, Lq, D))
        return out, w.data


def _conv_windows(T: int, kernel: int, stride: int, pad: int) -> np.ndarray:
    out_len = (T + 2 * pad - kernel) // stride + 1
    return np.arange(out_len)[:, None] * stride + np.arange(kernel)[None, :]


def conv_out_len(T: int, stride: int = 2) -> int:
    """Output length of the kernel-3, pad-1 convolution: ``ceil(T / stride)``."""
    return (T + 2 - 3) // stride + 1


class Conv1d(Module):
    """Kernel-3 1-D convolution with one frame of zero padding on each side.

    With stride 2 this halves the length exactly: ``T -> ceil(T / 2)``.
    """

    kernel = 3

    def __init__(self, d_in, d_out, rng, stride=1):
        self.stride = stride
        self.weight = _init(rng, d_in * self.kernel, (self.kernel * d_in, d_out))
        self.bias = nc.parameter(np.zeros(d_out))

    def __call__(self, x, mask=None):
        B, T, C = x.shape
        if T < self.stride:
            raise ValueError(f"input length {T} shorter than stride {self.stride}")
        if mask is not None:
            x = x * mask[:, :, None]
        xp = nc.pad_axis(x, 1, 1, 1)
        idx = _conv_windows(T, self.kernel, self.stride, 1)
        cols = xp[:, idx, :].reshape(B, idx.shape[0], self.kernel * C)
        y = cols @ self.weight + self.bias
        if mask is None:
            return y, None
        lens = mask.sum(axis=1)
        new_lens = (lens + 2 - self.kernel) // self.stride + 1
        return y, np.arange(y.shape[1])[None, :] < new_lens[:, None]


class DownsampleStack(Module):
    """``n`` stride-2 convolutions with ReLU in between (8x shorter for n=3)."""

    def __init__(self, d, n, rng):
        self.layers = [Conv1d(d, d, rng, stride=2) for _ in range(n)]

    def __call__(self, x, mask):
        if x.shape[1] < 2 ** len(self.layers):
            raise ValueError(f"input length {x.shape[1]} shorter than receptive field {2 ** len(self.layers)}")
        for conv in self.layers:
            x, mask = conv(x, mask)
            x = nc.relu(x)
        return x, mask



class DepthwiseConv(Module):
    kernel = 3

    def __init__(self, d, rng):
        self.weight = _init(rng, self.kernel, (self.kernel, d))
        self.bias = nc.parameter(np.zeros(d))

    def __call__(self, x, mask):
        B, T, C = x.shape
        x = x * mask[:, :, None]
        xp = nc.pad_axis(x, 1, 1, 1)
        idx = _conv_windows(T, self.kernel, 1, 1)
        return (xp[:, idx, :] * self.weight).sum(axis=2) + self.bias


class ConformerBlock(Module):
    """Macaron half-step FFNs around self-attention and a depthwise-conv module."""

    def __init__(self, cfg: LayerConfig, rng):
        d = cfg.model_dim
        self.ff1_norm, self.ff1 = LayerNorm(d), FeedForward(cfg, rng)
        self.attn_norm, self.attn = LayerNorm(d), MultiHeadAttention(cfg, rng)
        self.conv_norm = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng)
        self.dw = DepthwiseConv(d, rng)
        self.pw2 = Linear(d, d, rng)
        self.ff2_norm, self.ff2 = LayerNorm(d), FeedForward(cfg, rng)
        self.out_norm = LayerNorm(d)
        self.p = cfg.dropout
        self.d = d

    def __call__(self, x, mask):
        x = x + self.dropout(self.ff1(self.ff1_norm(x)), self.p) * 0.5
        h = self.attn_norm(x)
        a, _ = self.attn(h, h, mask)
        x = x + self.dropout(a, self.p)
        h = self.pw1(self.conv_norm(x))
        h = h[..., : self.d] * nc.sigmoid(h[..., self.d:])
        h = self.pw2(nc.swish(self.dw(h, mask)))
        x = x + self.dropout(h, self.p)
        x = x + self.dropout(self.ff2(self.ff2_norm(x)), self.p) * 0.5
        return self.out_norm(x)



class EncoderLayer(Module):
    """Pre-norm self-attention + FFN layer."""

    def __init__(self, cfg: LayerConfig, rng):
        self.norm1, self.attn = LayerNorm(cfg.model_dim), MultiHeadAttention(cfg, rng)
        self.norm2, self.ffn = LayerNorm(cfg.model_dim), FeedForward(cfg, rng)
        self.p = cfg.dropout

    def __call__(self, x, mask):
        h = self.norm1(x)
        a, w = self.attn(h, h, mask)
        x = x + self.dropout(a, self.p)
        x = x + self.dropout(self.ffn(self.norm2(x)), self.p)
        return x, w


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention and FFN."""

    def __init__(self, cfg: LayerConfig, rng):
        d = cfg.model_dim
        self.norm1, self.self_attn = LayerNorm(d), MultiHeadAttention(cfg, rng)
        self.norm2, self.cross_attn = LayerNorm(d), MultiHeadAttention(cfg, rng)
        self.norm3, self.ffn = LayerNorm(d), FeedForward(cfg, rng)
        self.p = cfg.dropout

    def __call__(self, x, mask, memory, mem_mask):
        """Returns ``(output, cross_attention_weights)``."""
        h = self.norm1(x)
        a, _ = self.self_attn(h, h, mask, causal=True)
        x = x + self.dropout(a, self.p)
        c, w = self.cross_attn(self.norm2(x), memory, mem_mask)
        x = x + self.dropout(c, self.p)
        x = x + self.dropout(self.ffn(self.norm3(x)), self.p)
        return x, w
