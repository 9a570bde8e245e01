"""Joint training of the coarse estimator and diffusion refiner, plus checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .diffusion import DiffusionConfig
from .features import FeatureStats, collate
from .model import DiffGNSS, ModelConfig

log = logging.getLogger(__name__)

ABLATIONS = ("no_diffusion", "no_temporal_cond", "no_spatial_cond", "no_coarse_embed", "no_uncertainty")


@dataclass
class TrainConfig:
    lr0: float = 2e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    epochs: int = 200
    batch: int = 8
    lambda_pri: float = 0.5
    lambda_res: float = 0.5
    lambda_un: float = 0.3
    lambda_prr: float = 1.0
    seed: int = 0
    grad_clip: float = 5.0
    no_diffusion: bool = False
    no_temporal_cond: bool = False
    no_spatial_cond: bool = False
    no_coarse_embed: bool = False
    no_uncertainty: bool = False
    coarse_backbone: str = "mamba"
    coarse_warmup_epochs: int = 0   # coarse-only epochs before joint training
    eval_seed: int = 0
    max_seconds: float | None = None

    def __post_init__(self):
        for name in ("lambda_pri", "lambda_res", "lambda_un", "lambda_prr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        cfg = copy.copy(base or ModelConfig())
        cfg.backbone = self.coarse_backbone
        cfg.diffusion = not self.no_diffusion
        cfg.uncertainty = not self.no_uncertainty
        cfg.temporal_cond = not self.no_temporal_cond
        cfg.spatial_cond = not self.no_spatial_cond
        cfg.coarse_embed = not self.no_coarse_embed
        return cfg


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# ---------------------------------------------------------------- loss

@dataclass
class LossBreakdown:
    total: Tensor
    pri: float
    res: float
    un: float
    prr: float


def _masked_mse(pred, target, mask, count):
    pred = ad.as_tensor(pred)
    diff = pred - np.asarray(target, dtype=pred.data.dtype)
    m = np.asarray(mask, dtype=pred.data.dtype)
    return ad.elementwise_scale(ad.sum_over_axis(ad.elementwise_scale(diff * diff, m)), 1.0 / count)


def compute_loss(out: dict, weights: TrainConfig) -> LossBreakdown:
    """Weighted four-term loss; every term is a mean over labelled satellites.

    ``out`` holds ``init``, ``fine``, ``eps_hat``, ``u_hat`` (Tensors, normalised
    units) and targets ``gt``, ``eps0``, ``u0`` with ``label_mask``. Missing
    heads (``None``) contribute zero.
    """
    lm = np.asarray(out["label_mask"], dtype=bool)
    count = int(lm.sum())
    if count == 0:
        raise ValueError("batch has no labelled satellite")
    terms = {
        "pri": _masked_mse(out["init"], out["gt"], lm, count),
        "res": _masked_mse(out["eps_hat"], out["eps0"], lm, count) if out.get("eps_hat") is not None else None,
        "un": _masked_mse(out["u_hat"], out["u0"], lm, count) if out.get("u_hat") is not None else None,
        "prr": _masked_mse(out["fine"], out["gt"], lm, count),
    }
    lam = {"pri": weights.lambda_pri, "res": weights.lambda_res, "un": weights.lambda_un, "prr": weights.lambda_prr}
    total = None
    for k, v in terms.items():
        if v is None:
            continue
        w = ad.elementwise_scale(v, lam[k])
        total = w if total is None else total + w
    vals = {k: (0.0 if v is None else float(v.data)) for k, v in terms.items()}
    return LossBreakdown(total, vals["pri"], vals["res"], vals["un"], vals["prr"])


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction; skips the step on non-finite gradients."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.isfinite(g).all():
            state.skipped += 1
            log.warning("non-finite gradient in %s; optimiser step skipped", k)
            return state
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DGNS"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict                 # name -> float32 array
    norm_stats: dict
    diffusion: dict
    train: dict
    model: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    version: int = VERSION

    def build_model(self) -> DiffGNSS:
        model = DiffGNSS(ModelConfig.from_dict(self.model), DiffusionConfig.from_dict(self.diffusion))
        model.load_state_dict(self.params)
        return model

    @property
    def stats(self) -> FeatureStats:
        return FeatureStats.from_dict(self.norm_stats)


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name, arr in ckpt.params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = {
        "params": entries, "norm_stats": ckpt.norm_stats, "diffusion": ckpt.diffusion,
        "train": ckpt.train, "model": ckpt.model, "epoch": ckpt.epoch, "history": ckpt.history,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", ckpt.version, len(hb)) + hb + b"".join(payload)


def loads_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a DGNS checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if 12 + hlen > len(buf):
        raise TruncatedCheckpoint(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    base = 12 + hlen
    params = {}
    for e in header["params"]:
        start, end = base + e["offset"], base + e["offset"] + e["nbytes"]
        if end > len(buf):
            raise TruncatedCheckpoint(f"payload for {e['name']} runs past end of file")
        params[e["name"]] = np.frombuffer(buf[start:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    expected = base + sum(e["nbytes"] for e in header["params"])
    if len(buf) != expected:
        raise CheckpointError(f"trailing bytes: file is {len(buf)} bytes, expected {expected}")
    return Checkpoint(params, header["norm_stats"], header["diffusion"], header["train"], header["model"],
                      header["epoch"], header["history"], version)


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- training loop

def predict_windows(model: DiffGNSS, windows, batch_size: int = 64, seed: int = 0, steps=None):
    """Batched inference; returns a list of PredictionBatch, one per chunk, in window order."""
    out = []
    for i in range(0, len(windows), batch_size):
        b = collate(windows[i:i + batch_size])
        out.append(model.predict(b, seed=seed + i, steps=steps))
    return out


def window_errors(model, windows, seed=0, steps=None, batch_size=64):
    """Per labelled satellite: (coarse error, refined error, u0_hat), each a flat array."""
    ce, fe, uu = [], [], []
    for i, pb in enumerate(predict_windows(model, windows, batch_size, seed, steps)):
        b = collate(windows[i * batch_size:(i + 1) * batch_size])
        lm = b.label_mask
        ce.append((pb.init_m - b.gt)[lm])
        fe.append((pb.fine_m - b.gt)[lm])
        uu.append(pb.u0_hat[lm])
    return np.concatenate(ce), np.concatenate(fe), np.concatenate(uu)


def _evaluate(model, windows, seed):
    ce, fe, _ = window_errors(model, windows, seed=seed)
    return {
        "valid_mae": float(np.mean(np.abs(fe))),
        "valid_rmse": float(np.sqrt(np.mean(fe ** 2))),
        "valid_coarse_mae": float(np.mean(np.abs(ce))),
    }


def train(cfg: TrainConfig, train_windows, valid_windows, stats: FeatureStats,
          model_cfg: ModelConfig | None = None, diff_cfg: DiffusionConfig | None = None,
          progress=None) -> tuple[Checkpoint, DiffGNSS]:
    """Train from scratch; returns the best-by-validation checkpoint and that model.

    ``train_windows`` / ``valid_windows`` must already be normalised with
    ``stats``. ``progress`` (optional) is called with each history row.
    """
    if not train_windows or not valid_windows:
        raise ValueError("training and validation sets must be non-empty")
    mcfg = cfg.model_config(model_cfg)
    dcfg = diff_cfg or DiffusionConfig()
    model = DiffGNSS(mcfg, dcfg, seed=cfg.seed)
    params = model.named_parameters()
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    history = [{"epoch": 0, "lr": 0.0, "train_loss": float("nan"), **_evaluate(model, valid_windows, cfg.eval_seed)}]
    if progress:
        progress(history[-1])
    best = (history[0]["valid_mae"], 0, {k: p.data.copy() for k, p in params.items()})
    t_start = time.monotonic()
    finished = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        refine_stage = epoch >= cfg.coarse_warmup_epochs
        order = rng.permutation(len(train_windows))
        losses = []
        for i in range(0, len(order), cfg.batch):
            batch = collate([train_windows[j] for j in order[i:i + cfg.batch]])
            if not batch.label_mask.any():
                continue
            tape = Tape()
            try:
                with tape:
                    out = model.training_forward(batch, rng, refine_stage=refine_stage)
                    lb = compute_loss(out, cfg)
            except ad.NonFiniteError as e:
                log.warning("non-finite forward pass skipped: %s", e)
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grads = tape.backward(lb.total, params)
            clip_grads(grads, cfg.grad_clip)
            adam_step(params, grads, state, lr)
            losses.append(float(lb.total.data))
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        try:
            row.update(_evaluate(model, valid_windows, cfg.eval_seed))
        except ad.NonFiniteError:
            row.update(valid_mae=float("nan"), valid_rmse=float("nan"), valid_coarse_mae=float("nan"))
        history.append(row)
        if progress:
            progress(row)
        finished = epoch + 1
        if not np.isfinite(row["valid_mae"]):
            log.error("validation diverged at epoch %d; keeping last good checkpoint", epoch + 1)
            break
        if row["valid_mae"] < best[0] and refine_stage:
            best = (row["valid_mae"], epoch + 1, {k: p.data.copy() for k, p in params.items()})
        if cfg.max_seconds is not None and time.monotonic() - t_start > cfg.max_seconds:
            log.warning("time cap reached after %d epochs", epoch + 1)
            break
    model.load_state_dict(best[2])
    ckpt = Checkpoint(
        params={k: v.astype(np.float32) for k, v in best[2].items()},
        norm_stats=stats.to_dict(), diffusion=dcfg.to_dict(), train=cfg.to_dict(),
        model=mcfg.to_dict(), epoch=best[1],
        history=[{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
                 for r in history],
    )
    log.info("trained %d epochs, best epoch %d (valid MAE %.3f m)", finished, best[1], best[0])
    return ckpt, model


# ---------------------------------------------------------------- run config

def run_config_dict(cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                    diff_cfg: DiffusionConfig | None = None) -> dict:
    d = cfg.to_dict()
    d["model"] = (model_cfg or ModelConfig()).to_dict()
    d["diffusion"] = (diff_cfg or DiffusionConfig()).to_dict()
    return d


def parse_run_config(d: dict) -> tuple[TrainConfig, ModelConfig, DiffusionConfig]:
    """Top-level keys are TrainConfig fields; optional ``model`` and ``diffusion`` sub-objects."""
    d = dict(d)
    model = d.pop("model", {}) or {}
    diffusion = d.pop("diffusion", {}) or {}
    try:
        cfg = TrainConfig.from_dict(d)
        mcfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **model})
        dcfg = DiffusionConfig.from_dict({**DiffusionConfig().to_dict(), **diffusion})
    except TypeError as e:
        raise ValueError(f"invalid run config: {e}") from None
    return cfg, mcfg, dcfg


def load_run_config(path) -> tuple[TrainConfig, ModelConfig, DiffusionConfig]:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ValueError(f"{path}: run config must be a JSON object")
    return parse_run_config(d)
