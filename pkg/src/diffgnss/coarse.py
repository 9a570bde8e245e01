"""Coarse pseudorange-error estimator: encoder, temporal Mamba, spatial Bi-Mamba, head.

Alternative backbones (LSTM, attention, single-epoch variants) share the same
skeleton so the diffusion refiner can be attached to any of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LSTM, MLP, AttentionBlock, Linear, Module, masked_mean, param, sinusoidal_embedding

BACKBONES = ("mamba", "uni_mamba", "lstm", "transformer", "lstm_polyu_style", "transformer_rwth_style")

# (temporal stage, spatial stage, last epoch only)
_LAYOUT = {
    "mamba": ("mamba", "bimamba", False),
    "uni_mamba": ("mamba", "mamba", False),
    "lstm": ("lstm", "bilstm", False),
    "transformer": ("attention", "attention", False),
    "lstm_polyu_style": ("none", "bilstm", True),
    "transformer_rwth_style": ("lstm", "attention", False),
}


# ---------------------------------------------------------------- selective scan

def _scan_forward(u, delta, A, B, C):
    """Returns outputs, the stacked states h_0..h_L (h_0 = 0) and the decay factors."""
    Bt, L, D = u.shape
    S = A.shape[1]
    h = np.zeros((Bt, L + 1, D, S), dtype=u.dtype)
    dA = np.exp(delta[..., None] * A)                       # (B, L, D, S)
    drive = (delta * u)[..., None] * B[:, :, None, :]       # (B, L, D, S)
    for t in range(L):
        h[:, t + 1] = dA[:, t] * h[:, t] + drive[:, t]
    y = np.matmul(h[:, 1:], C[..., None])[..., 0]
    return y, h, dA


def selective_scan(u, delta, A, B, C):
    """Zero-order-hold selective state-space scan.

    Shapes: ``u, delta`` ``(batch, L, D)``; ``A`` ``(D, S)``; ``B, C``
    ``(batch, L, S)``. Recurrence, with ``h_0 = 0``::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
        y_t = C_t . h_t

    Accepts Tensors (recorded as one fused op) or plain arrays.
    """
    ts = [ad.as_tensor(v) for v in (u, delta, A, B, C)]
    ud, dd, Ad, Bd, Cd = (t.data for t in ts)
    if ud.shape != dd.shape or Ad.shape[0] != ud.shape[2] or Bd.shape != Cd.shape \
            or Bd.shape[:2] != ud.shape[:2] or Bd.shape[2] != Ad.shape[1]:
        raise ad.ShapeError(f"selective_scan: inconsistent shapes u{ud.shape} delta{dd.shape} "
                            f"A{Ad.shape} B{Bd.shape} C{Cd.shape}")
    y, h, dA = _scan_forward(ud, dd, Ad, Bd, Cd)

    def bw(gy):
        L = ud.shape[1]
        hs = h[:, 1:]
        gC = np.matmul(gy[:, :, None, :], hs)[:, :, 0]                  # (B, L, S)
        # gradient w.r.t. each h_t, accumulated backwards through the decays
        gH = gy[..., None] * Cd[:, :, None, :]                           # (B, L, D, S)
        for t in range(L - 2, -1, -1):
            gH[:, t] += gH[:, t + 1] * dA[:, t + 1]
        g_dA = gH * h[:, :-1] * dA
        gd = (g_dA * Ad).sum(-1)
        gA = np.einsum("blds,bld->ds", g_dA, dd)
        du = dd * ud
        gB = np.matmul(du[:, :, None, :], gH)[:, :, 0]                   # (B, L, S)
        gBu = np.matmul(gH, Bd[..., None])[..., 0]                       # (B, L, D)
        gd = gd + gBu * ud
        gu = gBu * dd
        return gu, gd, gA, gB, gC
    return ad.record_op("selective_scan", y, ts, bw)


# ---------------------------------------------------------------- blocks

class MambaBlock(Module):
    """Mamba mixer over axis 1 with a residual connection.

    Masked steps are zeroed before the convolution and get ``delta = 0``, so the
    state passes through them unchanged.
    """

    def __init__(self, rng, dim, state_dim=16, expand=2, conv_width=4):
        E = expand * dim
        self.inner = E
        dt_rank = max(1, math.ceil(dim / 16))
        self.in_proj = Linear(rng, dim, 2 * E)
        self.conv_w = param(rng.uniform(-1, 1, (conv_width, E)) / math.sqrt(conv_width))
        self.conv_b = param(np.zeros(E))
        self.dt_down = Linear(rng, E, dt_rank, bias=False)
        self.dt_up = Linear(rng, dt_rank, E, bias=False)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), E))
        self.dt_bias = param(dt + np.log(-np.expm1(-dt)))   # softplus^-1(dt)
        self.b_proj = Linear(rng, E, state_dim, bias=False)
        self.c_proj = Linear(rng, E, state_dim, bias=False)
        self.a_log = param(np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (E, 1))))
        self.d_skip = param(np.ones(E))
        self.out_proj = Linear(rng, E, dim)

    def A(self):
        return ad.neg(ad.exp(self.a_log))

    def __call__(self, x, mask):
        E = self.inner
        m = np.asarray(mask, dtype=x.data.dtype)[..., None]
        xz = self.in_proj(x)
        xs = ad.elementwise_scale(xz[..., :E], m)
        z = xz[..., E:]
        xs = ad.silu(ad.conv1d_depthwise(xs, self.conv_w, axis=1, padding="causal") + self.conv_b)
        delta = ad.elementwise_scale(ad.softplus(self.dt_up(self.dt_down(xs)) + self.dt_bias), m)
        y = selective_scan(xs, delta, self.A(), self.b_proj(xs), self.c_proj(xs))
        y = (y + xs * self.d_skip) * ad.silu(z)
        return ad.elementwise_scale(x + self.out_proj(y), m)


def _reverse(x):
    return x[:, ::-1]


class SequenceStage(Module):
    """Runs one of the sequence mixers over axis 1 of ``(batch, L, H)``."""

    def __init__(self, rng, kind, dim, mamba_kw):
        self.kind = kind
        if kind in ("mamba", "bimamba"):
            self.fwd = MambaBlock(rng, dim, **mamba_kw)
            self.bwd = MambaBlock(rng, dim, **mamba_kw) if kind == "bimamba" else None
        elif kind in ("lstm", "bilstm"):
            self.fwd = LSTM(rng, dim, dim)
            self.bwd = LSTM(rng, dim, dim) if kind == "bilstm" else None
        elif kind == "attention":
            self.fwd = AttentionBlock(rng, dim)
            self.bwd = None
        elif kind != "none":
            raise ValueError(f"unknown stage {kind!r}")

    @property
    def width(self):
        return 2 if self.kind in ("bimamba", "bilstm") else 1

    def __call__(self, x, mask):
        k = self.kind
        if k == "none":
            return x
        if k in ("mamba", "bimamba"):
            out = self.fwd(x, mask)
            if self.bwd is not None:
                back = _reverse(self.bwd(_reverse(x), mask[:, ::-1]))
                out = ad.concat([out, back], axis=-1)
            return out
        if k in ("lstm", "bilstm"):
            out, _ = self.fwd(x, mask)
            if self.bwd is not None:
                back, _ = self.bwd(x, mask, reverse=True)
                out = ad.concat([out, back], axis=-1)
            return out
        pos = sinusoidal_embedding(np.arange(x.shape[1]), x.shape[2], dtype=x.data.dtype)
        return self.fwd(x + pos, mask)


# ---------------------------------------------------------------- estimator

@dataclass
class CoarseOutputs:
    F_in: Tensor        # (B, N, T, H)
    F_T: Tensor         # (B, N, H)
    F_S: Tensor         # (B, H)
    delta_init: Tensor  # (B, N), normalised error units


class Encoder(Module):
    """Feature MLP, temporal MLP along the window axis, then a temporal depthwise conv."""

    def __init__(self, rng, n_features, window, hidden):
        self.feature_mlp = MLP(rng, [n_features, hidden, hidden])
        self.temporal_mlp = MLP(rng, [window, 4 * window, window])
        self.conv_w = param(rng.uniform(-1, 1, (3, hidden)) / math.sqrt(3))
        self.conv_b = param(np.zeros(hidden))

    def __call__(self, feats, mask):
        m = np.asarray(mask, dtype=feats.data.dtype)[..., None]
        x = ad.elementwise_scale(self.feature_mlp(feats), m)
        xt = self.temporal_mlp(ad.transpose(x, (0, 1, 3, 2)))
        x = ad.elementwise_scale(x + ad.transpose(xt, (0, 1, 3, 2)), m)
        c = ad.conv1d_depthwise(x, self.conv_w, axis=2, padding="same") + self.conv_b
        return ad.elementwise_scale(x + c, m)


class CoarseEstimator(Module):
    def __init__(self, rng, hidden=64, state_dim=16, expand=2, conv_width=4, head_hidden=64,
                 window=3, n_features=5, backbone="mamba"):
        if backbone not in _LAYOUT:
            raise ValueError(f"unknown coarse backbone {backbone!r}; choose from {BACKBONES}")
        self.backbone = backbone
        t_kind, s_kind, last_only = _LAYOUT[backbone]
        self.last_only = last_only
        mamba_kw = dict(state_dim=state_dim, expand=expand, conv_width=conv_width)
        self.encoder = Encoder(rng, n_features, 1 if last_only else window, hidden)
        self.temporal = SequenceStage(rng, t_kind, hidden, mamba_kw)
        self.spatial = SequenceStage(rng, s_kind, hidden, mamba_kw)
        self.spatial_mlp = MLP(rng, [self.spatial.width * hidden, hidden, hidden])
        self.head = MLP(rng, [2 * hidden, head_hidden, 1])
        self.hidden = hidden

    def encode(self, feats, mask):
        return self.encoder(feats, mask)

    def temporal_features(self, F_in, mask):
        B, N, T, H = F_in.shape
        flat = ad.reshape(F_in, (B * N, T, H))
        fm = mask.reshape(B * N, T)
        out = self.temporal(flat, fm)
        return ad.reshape(masked_mean(out, fm, axis=1), (B, N, H))

    def spatial_features(self, F_T, sat_mask):
        out = self.spatial(F_T, sat_mask)
        return self.spatial_mlp(masked_mean(out, sat_mask, axis=1))

    def __call__(self, feats, mask) -> CoarseOutputs:
        """``feats`` ``(B, N, T, 5)`` normalised; ``mask`` ``(B, N, T)`` bool."""
        feats = ad.as_tensor(feats)
        mask = np.asarray(mask, dtype=bool)
        if self.last_only:
            feats = feats[:, :, -1:, :]
            mask = mask[:, :, -1:]
        sat_mask = mask.any(axis=2)
        F_in = self.encode(feats, mask)
        F_T = self.temporal_features(F_in, mask)
        F_S = self.spatial_features(F_T, sat_mask)
        B, N, H = F_T.shape
        Fs = ad.concat([ad.reshape(F_S, (B, 1, H))] * N, axis=1) if N > 1 else ad.reshape(F_S, (B, 1, H))
        out = self.head(ad.concat([F_T, Fs], axis=-1))
        m = sat_mask.astype(F_T.data.dtype)
        delta = ad.elementwise_scale(ad.reshape(out, (B, N)), m)
        return CoarseOutputs(F_in, F_T, F_S, delta)
