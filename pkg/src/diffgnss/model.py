"""Coarse estimator plus diffusion refiner, wired for training and inference."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coarse import CoarseEstimator
from .diffusion import (DiffusionConfig, DiffusionRefiner, ddim_timesteps, forward_diffuse, make_uncertainty_label,
                        refine, schedule_from_config)
from .features import Batch, N_FEATURES
from .layers import Module


@dataclass
class ModelConfig:
    hidden: int = 64
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    head_hidden: int = 64
    window: int = 3
    backbone: str = "mamba"
    diffusion: bool = True
    uncertainty: bool = True
    temporal_cond: bool = True
    spatial_cond: bool = True
    coarse_embed: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PredictionBatch:
    init_m: np.ndarray      # (B, N) coarse error, m
    eps0_hat: np.ndarray    # (B, N) generated residual, normalised units
    fine_m: np.ndarray      # (B, N) refined error, m
    u0_hat: np.ndarray      # (B, N) uncertainty in (0, 1); 0 without refiner
    sat_mask: np.ndarray    # (B, N)


def active_width(sat_mask) -> int:
    """Satellite slots actually used in a batch (windows pack satellites to the front)."""
    used = np.flatnonzero(np.asarray(sat_mask).any(axis=0))
    return int(used[-1]) + 1 if used.size else 1


def _pad(x, n_max):
    x = np.asarray(x)
    if x.shape[1] == n_max:
        return x
    out = np.zeros((x.shape[0], n_max) + x.shape[2:], dtype=x.dtype)
    out[:, :x.shape[1]] = x
    return out


class DiffGNSS(Module):
    def __init__(self, cfg: ModelConfig | None = None, diff: DiffusionConfig | None = None, seed: int = 0):
        self._cfg = cfg or ModelConfig()
        self._diff = diff or DiffusionConfig()
        c = self._cfg
        rng = np.random.default_rng(seed)
        self.coarse = CoarseEstimator(rng, hidden=c.hidden, state_dim=c.state_dim, expand=c.expand,
                                      conv_width=c.conv_width, head_hidden=c.head_hidden,
                                      window=c.window, n_features=N_FEATURES, backbone=c.backbone)
        self.refiner = None
        if c.diffusion:
            self.refiner = DiffusionRefiner(rng, c.hidden, N_FEATURES, self._diff.gru_iters,
                                            uncertainty=c.uncertainty, temporal_cond=c.temporal_cond,
                                            spatial_cond=c.spatial_cond, coarse_embed=c.coarse_embed)
        self._schedule = schedule_from_config(self._diff)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def diffusion_config(self) -> DiffusionConfig:
        return self._diff

    @property
    def schedule(self):
        return self._schedule

    def set_inference_steps(self, n_steps=None, stride=None):
        self._schedule.ddim_steps = ddim_timesteps(self._schedule.T, n_steps, stride)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.named_parameters()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {missing[:8]}{'...' if len(missing) > 8 else ''}"
                             f" unexpected {extra[:8]}{'...' if len(extra) > 8 else ''}")
        for k, p in own.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {v.shape}, model {p.shape}")
            p.data = v.astype(p.data.dtype).copy()

    # ------------------------------------------------------------ training

    def training_forward(self, batch: Batch, rng: np.random.Generator, refine_stage: bool = True):
        """One stochastic forward pass; returns the tensors and targets the loss needs."""
        s = self._diff.scale
        n = active_width(batch.sat_mask)
        dtype = ad.get_default_dtype()
        feats = Tensor(batch.features[:, :n].astype(dtype))
        mask = batch.mask[:, :n]
        sat_mask = mask.any(axis=2)
        lm = batch.label_mask[:, :n]
        gt_n = (batch.gt[:, :n] / s).astype(dtype)
        co = self.coarse(feats, mask)
        out = {"init": co.delta_init, "gt": gt_n, "label_mask": lm, "fine": co.delta_init,
               "eps_hat": None, "eps0": None, "u_hat": None, "u0": None}
        if self.refiner is None or not refine_stage:
            return out
        B = feats.shape[0]
        init_val = co.delta_init.data
        eps0 = np.where(lm, gt_n - init_val, 0.0).astype(dtype)
        if self._cfg.uncertainty:
            u0 = np.where(lm, make_uncertainty_label(init_val * s, gt_n * s, self._diff.e1, self._diff.e2), 0.0)
        else:
            u0 = np.zeros_like(eps0)
        u0 = u0.astype(dtype)
        t = rng.integers(1, self._schedule.T + 1, size=B)
        z_e = rng.standard_normal(eps0.shape)
        z_u = rng.standard_normal(eps0.shape)
        sm = sat_mask.astype(dtype)
        eps_t, u_t = forward_diffuse(eps0, u0, t, z_e, z_u, self._schedule)
        if not self._cfg.uncertainty:
            u_t = np.zeros_like(u_t)
        cond = self.refiner.build_condition(feats, mask, co.delta_init)
        eps_hat, u_hat = self.refiner.denoise_step(eps_t * sm, u_t * sm, t, cond, sat_mask)
        out.update(eps_hat=eps_hat, eps0=eps0, u_hat=u_hat if self._cfg.uncertainty else None,
                   u0=u0, fine=co.delta_init + eps_hat, t=t)
        return out

    # ------------------------------------------------------------ inference

    def predict(self, batch: Batch, seed: int = 0, steps=None) -> PredictionBatch:
        """``steps`` is a count of denoiser evaluations or an explicit timestep list."""
        if isinstance(steps, (int, np.integer)):
            steps = ddim_timesteps(self._schedule.T, int(steps))
        s = self._diff.scale
        n_max = batch.features.shape[1]
        n = active_width(batch.sat_mask)
        dtype = ad.get_default_dtype()
        feats = Tensor(batch.features[:, :n].astype(dtype))
        mask = batch.mask[:, :n]
        sat_mask = mask.any(axis=2)
        co = self.coarse(feats, mask)
        init_n = co.delta_init.data.astype(np.float64)
        if self.refiner is None:
            eps0 = np.zeros_like(init_n)
            u0 = np.zeros_like(init_n)
        else:
            cond = self.refiner.build_condition(feats, mask, co.delta_init)
            eps0, u0 = self.refiner.sample(cond, sat_mask, self._schedule, seed=seed, steps=steps)
        init_m = init_n * s
        fine_m = refine(init_m, eps0, s, sat_mask)
        return PredictionBatch(_pad(init_m, n_max), _pad(eps0, n_max), _pad(fine_m, n_max),
                               _pad(u0, n_max), _pad(sat_mask, n_max))
