"""Conditional diffusion refinement of the coarse estimate.

Residuals and uncertainties are handled in normalised units: a residual of
``x`` metres is ``x / scale`` with ``scale`` (default 10 m) shared with the
coarse head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LSTM, MLP, GRUCell, Linear, Module, sinusoidal_embedding


@dataclass
class DiffusionConfig:
    steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    ddim_steps: int = 2           # number of denoiser evaluations at inference
    ddim_stride: int | None = None  # alternative reading: stride over the full chain
    scale: float = 10.0           # metres per normalised residual unit
    e1: float = 1.0               # absolute threshold, m
    e2: float = 1.0               # relative threshold
    gru_iters: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DiffusionSchedule:
    beta: np.ndarray          # (T,), beta[t-1] is beta_t
    alpha_bar: np.ndarray     # (T,), alpha_bar[t-1] = prod_{k<=t} (1 - beta_k)
    ddim_steps: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t):
        """alpha_bar at 1-based timestep(s) ``t``."""
        return self.alpha_bar[np.asarray(t) - 1]


def ddim_timesteps(T: int, n_steps: int | None = None, stride: int | None = None) -> list[int]:
    """Strictly decreasing inference timesteps starting at ``T``.

    ``n_steps`` evenly spaced evaluations (``2`` gives ``[T, T/2]``), or every
    ``stride``-th step when ``stride`` is given.
    """
    if stride is not None:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        return list(range(T, 0, -stride))
    if n_steps is None or not 1 <= n_steps <= T:
        raise ValueError(f"ddim steps must be in [1, {T}]")
    return [T - (i * T) // n_steps for i in range(n_steps)]


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02,
                   ddim_steps: int | None = 2, ddim_stride: int | None = None) -> DiffusionSchedule:
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T < 1:
        raise ValueError("T must be positive")
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(beta, alpha_bar, ddim_timesteps(T, ddim_steps, ddim_stride))


def schedule_from_config(cfg: DiffusionConfig) -> DiffusionSchedule:
    return build_schedule(cfg.steps, cfg.beta_min, cfg.beta_max, cfg.ddim_steps, cfg.ddim_stride)


def make_gt_residual(gt, init, scale=10.0):
    """Normalised target residual ``(gt - init) / scale``."""
    return (np.asarray(gt) - np.asarray(init)) / scale


def make_uncertainty_label(init, gt, e1=1.0, e2=1.0):
    """1 where the coarse estimate is unreliable, 0 where it is within both thresholds.

    When the ground-truth error is exactly zero the relative test is undefined
    and only the absolute threshold is applied.
    """
    init = np.asarray(init, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    e_ab = np.abs(init - gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_re = np.where(gt != 0, e_ab / np.abs(gt), 0.0)
    ok = (e_ab < e1) & (e_re < e2)
    return np.where(ok, 0.0, 1.0)


def forward_diffuse(eps0, u0, t, z_eps, z_u, schedule: DiffusionSchedule):
    """Noised residual and uncertainty at timestep(s) ``t`` (1-based).

    ``t`` may be a scalar or one timestep per leading batch row.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    ab = schedule.abar(t)
    eps0 = np.asarray(eps0)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (eps0.ndim - ab.ndim))
    sa, sn = np.sqrt(ab), np.sqrt(1.0 - ab)
    return sa * eps0 + sn * np.asarray(z_eps), sa * np.asarray(u0) + sn * np.asarray(z_u)


def ddim_update(x_t, x0_pred, t, t_next, schedule: DiffusionSchedule):
    """Deterministic (sigma = 0) DDIM move from ``t`` to ``t_next``; ``t_next = 0`` returns ``x0_pred``."""
    if t_next == 0:
        return x0_pred
    a_t, a_n = schedule.abar(t), schedule.abar(t_next)
    noise = (x_t - np.sqrt(a_t) * x0_pred) / np.sqrt(1.0 - a_t)
    return np.sqrt(a_n) * x0_pred + np.sqrt(1.0 - a_n) * noise


def ddim_sample(denoise, shape, schedule: DiffusionSchedule, seed=0, steps=None,
                init=None, with_uncertainty=True, trace=None):
    """Reverse chain over ``steps`` (default ``schedule.ddim_steps``).

    ``denoise(eps_t, u_t, t) -> (eps0_hat, u0_hat)`` works on arrays. The chain
    starts from standard normal noise drawn with ``seed`` unless ``init`` gives
    ``(eps_t, u_t)`` at ``steps[0]``. Returns the last clean-sample prediction,
    so the number of denoiser calls equals ``len(steps)``.
    """
    steps = list(schedule.ddim_steps if steps is None else steps)
    if any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ValueError(f"ddim steps must be strictly decreasing and positive: {steps}")
    if init is None:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(shape)
        u = rng.standard_normal(shape) if with_uncertainty else np.zeros(shape)
    else:
        eps, u = init
    eps0 = u0 = None
    for i, t in enumerate(steps):
        eps0, u0 = denoise(eps, u, t)
        if trace is not None:
            trace.append((t, eps, u, eps0, u0))
        if i + 1 < len(steps):
            eps = ddim_update(eps, eps0, t, steps[i + 1], schedule)
            if with_uncertainty:
                u = ddim_update(u, u0, t, steps[i + 1], schedule)
    return eps0, u0


def refine(init, eps0_hat, scale=10.0, mask=None):
    """Refined error in metres: ``init + scale * eps0_hat`` (zero where masked)."""
    out = np.asarray(init) + scale * np.asarray(eps0_hat)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return out


# ---------------------------------------------------------------- networks

@dataclass
class ConditionSignal:
    F_TC: Tensor    # (B, N, H)
    F_SC: Tensor    # (B, N, H)
    F_IC: Tensor    # (B, N, H)
    C: Tensor       # (B, N, 3H)


class ConditionNet(Module):
    """Temporal embedding (LSTM + MLP), max-pooled scene context, coarse embedding."""

    def __init__(self, rng, n_features, hidden, temporal=True, spatial=True, coarse=True):
        self.lstm = LSTM(rng, n_features, hidden)
        self.temporal_mlp = MLP(rng, [hidden, hidden, hidden])
        self.coarse_mlp = MLP(rng, [1, hidden, hidden]) if coarse else None
        self._use = (temporal, spatial, coarse)
        self.hidden = hidden

    def __call__(self, feats, mask, delta_init) -> ConditionSignal:
        feats = ad.as_tensor(feats)
        B, N, T, D = feats.shape
        H = self.hidden
        dt = feats.data.dtype
        sat_mask = np.asarray(mask).any(axis=2)
        m = sat_mask.astype(dt)[..., None]
        _, h_last = self.lstm(ad.reshape(feats, (B * N, T, D)), np.asarray(mask).reshape(B * N, T))
        F_TC = ad.elementwise_scale(ad.reshape(self.temporal_mlp(h_last), (B, N, H)), m)

        big = dt.type(1e9)
        pooled = ad.max_over_axis(F_TC + (m - 1.0) * big, axis=1, keepdims=True)
        any_valid = sat_mask.any(axis=1).astype(dt)[:, None, None]
        pooled = ad.elementwise_scale(pooled, any_valid)
        F_SC = ad.elementwise_scale(pooled, m)          # broadcast over satellites

        zeros = Tensor(np.zeros((B, N, H), dtype=dt))
        if self.coarse_mlp is not None:
            F_IC = ad.elementwise_scale(self.coarse_mlp(ad.reshape(delta_init, (B, N, 1))), m)
        else:
            F_IC = zeros
        use_t, use_s, _ = self._use
        C = ad.concat([F_IC, F_TC if use_t else zeros, F_SC if use_s else zeros], axis=-1)
        return ConditionSignal(F_TC, F_SC, F_IC, C)


class Denoiser(Module):
    """GRU denoiser: encoded noisy state initialises the hidden state, C chunks drive updates."""

    def __init__(self, rng, hidden, cond_dim, iters=3, uncertainty=True):
        if cond_dim % iters:
            raise ValueError(f"condition width {cond_dim} not divisible into {iters} chunks")
        self.state_mlp = MLP(rng, [2, hidden, hidden])
        self.time_proj = Linear(rng, hidden, hidden)
        self.gru = GRUCell(rng, cond_dim // iters, hidden)
        self.eps_head = MLP(rng, [hidden, hidden, 1])
        self.u_head = MLP(rng, [hidden, hidden, 1]) if uncertainty else None
        self.hidden = hidden
        self.iters = iters

    def __call__(self, eps_t, u_t, t, C, sat_mask):
        """``eps_t, u_t`` ``(B, N)``; ``t`` ``(B,)`` timesteps; returns ``(eps0_hat, u0_hat)``."""
        C = ad.as_tensor(C)
        B, N, W = C.shape
        H = self.hidden
        dt = C.data.dtype
        m = np.asarray(sat_mask, dtype=dt)
        state = np.stack([np.asarray(eps_t, dtype=dt), np.asarray(u_t, dtype=dt)], axis=-1) * m[..., None]
        temb = sinusoidal_embedding(np.asarray(t).reshape(-1), H, dtype=dt).reshape(B, 1, H)
        h = ad.tanh(self.state_mlp(Tensor(state)) + self.time_proj(Tensor(temb)))
        w = W // self.iters
        for k in range(self.iters):
            h = self.gru(C[..., k * w:(k + 1) * w], h)
        eps0 = ad.elementwise_scale(ad.reshape(self.eps_head(h), (B, N)), m)
        if self.u_head is None:
            u0 = Tensor(np.zeros((B, N), dtype=dt))
        else:
            u0 = ad.elementwise_scale(ad.sigmoid(ad.reshape(self.u_head(h), (B, N))), m)
        return eps0, u0


class DiffusionRefiner(Module):
    def __init__(self, rng, hidden, n_features=5, gru_iters=3, uncertainty=True,
                 temporal_cond=True, spatial_cond=True, coarse_embed=True):
        self.condition = ConditionNet(rng, n_features, hidden, temporal_cond, spatial_cond, coarse_embed)
        self.denoiser = Denoiser(rng, hidden, 3 * hidden, gru_iters, uncertainty)
        self.uncertainty = uncertainty

    def build_condition(self, feats, mask, delta_init) -> ConditionSignal:
        return self.condition(feats, mask, delta_init)

    def denoise_step(self, eps_t, u_t, t, cond: ConditionSignal, sat_mask):
        return self.denoiser(eps_t, u_t, t, cond.C, sat_mask)

    def sample(self, cond: ConditionSignal, sat_mask, schedule, seed=0, steps=None):
        """Deterministic DDIM reverse chain; returns arrays ``(eps0_hat, u0_hat)``."""
        B, N = sat_mask.shape
        m = np.asarray(sat_mask, dtype=np.float64)

        def denoise(eps, u, t):
            e, uu = self.denoiser(eps * m, u * m, np.full(B, t), cond.C, sat_mask)
            return e.data.astype(np.float64), uu.data.astype(np.float64)
        eps0, u0 = ddim_sample(denoise, (B, N), schedule, seed=seed, steps=steps,
                               with_uncertainty=self.uncertainty)
        return eps0 * m, u0 * m
