"""Parameter containers and the recurrent / attention building blocks."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Holds named parameters; attributes that are Modules (or lists of them) nest."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def param(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = param(_uniform(rng, bound, (n_in, n_out)))
        self.bias = param(_uniform(rng, bound, (n_out,))) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with ReLU in between; no activation after the last one."""

    def __init__(self, rng, sizes):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def masked_mean(x, mask, axis):
    """Mean of ``x`` over ``axis`` counting only entries where ``mask`` is set.

    ``mask`` is a constant array broadcastable to ``x`` without its channel
    axis. Rows with no valid entry give zero.
    """
    m = np.asarray(mask, dtype=x.data.dtype)[..., None]
    count = m.sum(axis=axis)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0).astype(x.data.dtype)
    return ad.elementwise_scale(ad.sum_over_axis(ad.elementwise_scale(x, m), axis=axis), inv)


class LSTM(Module):
    """Single-layer LSTM over axis 1 of ``(batch, length, features)``.

    Masked steps leave the state untouched, so trailing or leading padding is a
    no-op. Returns the per-step hidden states (zero where masked) and the final
    hidden state.
    """

    def __init__(self, rng, n_in, hidden):
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_x = param(_uniform(rng, bound, (n_in, 4 * hidden)))
        self.w_h = param(_uniform(rng, bound, (hidden, 4 * hidden)))
        b = _uniform(rng, bound, (4 * hidden,))
        b[hidden:2 * hidden] += 1.0  # forget-gate bias
        self.bias = param(b)

    def __call__(self, x, mask, reverse=False):
        B, L, _ = x.shape
        H = self.hidden
        dt = x.data.dtype
        gx = ad.matmul(x, self.w_x) + self.bias
        h = Tensor(np.zeros((B, H), dtype=dt))
        c = Tensor(np.zeros((B, H), dtype=dt))
        m = np.asarray(mask, dtype=dt)
        outs = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            g = gx[:, t] + ad.matmul(h, self.w_h)
            i = ad.sigmoid(g[:, :H])
            f = ad.sigmoid(g[:, H:2 * H])
            gg = ad.tanh(g[:, 2 * H:3 * H])
            o = ad.sigmoid(g[:, 3 * H:])
            c_new = f * c + i * gg
            h_new = o * ad.tanh(c_new)
            mt = m[:, t:t + 1]
            if mt.all():
                c, h = c_new, h_new
            else:
                c = c + ad.elementwise_scale(c_new - c, mt)
                h = h + ad.elementwise_scale(h_new - h, mt)
            outs[t] = ad.elementwise_scale(h, mt)
        seq = ad.concat([ad.reshape(o, (B, 1, H)) for o in outs], axis=1)
        return seq, h


class GRUCell(Module):
    def __init__(self, rng, n_in, hidden):
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_x = param(_uniform(rng, bound, (n_in, 3 * hidden)))
        self.b_x = param(_uniform(rng, bound, (3 * hidden,)))
        self.w_h = param(_uniform(rng, bound, (hidden, 3 * hidden)))
        self.b_h = param(_uniform(rng, bound, (3 * hidden,)))

    def __call__(self, x, h):
        H = self.hidden
        gx = ad.matmul(x, self.w_x) + self.b_x
        gh = ad.matmul(h, self.w_h) + self.b_h
        r = ad.sigmoid(gx[..., :H] + gh[..., :H])
        z = ad.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        n = ad.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
        return n + z * (h - n)


def sinusoidal_embedding(positions, dim, dtype=np.float32):
    """Standard sin/cos embedding, ``(len(positions), dim)``."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos * freq[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb.astype(dtype)


class AttentionBlock(Module):
    """Single-head self-attention + feed-forward, both residual, key-masked."""

    def __init__(self, rng, dim):
        self.dim = dim
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ff = MLP(rng, [dim, 2 * dim, dim])

    def __call__(self, x, mask):
        D = self.dim
        dt = x.data.dtype
        m = np.asarray(mask, dtype=dt)
        qkv = self.qkv(x)
        q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
        scores = ad.elementwise_scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(D))
        scores = scores + (m[:, None, :] - 1.0) * dt.type(1e9)
        attn = ad.softmax(scores, axis=-1)
        x = x + self.proj(ad.matmul(attn, v))
        x = x + self.ff(x)
        return ad.elementwise_scale(x, m[..., None])
