"""Seeded urban-GNSS scenario generator with exact ground truth.

Each segment has a moving receiver, frozen satellite geometry on a 20 200 km
shell, Gaussian line-of-sight noise and gated positive NLOS biases that pull
C/N0 down while active. The injected error is written as the label untouched.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .observations import SCENES, EpochObservation, save_observations
from .spp import az_el, enu_rotation, lla_to_ecef

EARTH_RADIUS = 6_371_000.0
SHELL_ALTITUDE = 20_200_000.0
ORIGIN_LLA = (31.23, 121.47, 20.0)

GPS_PRNS = [f"G{k:02d}" for k in range(1, 33)]
BDS_PRNS = [f"C{k:02d}" for k in range(1, 47)]


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    scene: str = "open_sky"
    n_satellites: tuple = (10, 14)
    duration_s: float = 60.0
    rate_hz: float = 1.0
    los_sigma: float = 0.5            # m
    nlos_events: tuple = (0, 0)       # events per segment, inclusive range
    nlos_duration_s: tuple = (6.0, 12.0)
    nlos_bias: tuple = (10.0, 50.0)   # m, uniform
    cn0_base: float = 45.0            # dB-Hz
    cn0_drop: tuple = (10.0, 20.0)    # dB while an event is active
    cn0_jitter: float = 1.0
    dropout: float = 0.0              # per satellite-epoch loss probability
    speed: tuple = (5.0, 15.0)        # m/s, straight line
    min_elevation: float = 5.0
    clock_bias: tuple = (-1e5, 1e5)   # m at t=0
    clock_drift: tuple = (-1.0, 1.0)  # m/s
    seed: int = 0
    seq_id: str = "seg"
    t0: float = 0.0
    events: list = field(default_factory=list)  # explicit (slot, onset_s, offset_s, bias_m)

    def __post_init__(self):
        if self.scene not in SCENES:
            raise SceneConfigError(f"unknown scene {self.scene!r}; choose from {SCENES}")
        if self.rate_hz <= 0 or self.duration_s <= 0:
            raise SceneConfigError("rate_hz and duration_s must be > 0")
        for name in ("n_satellites", "nlos_events", "nlos_duration_s", "nlos_bias", "cn0_drop", "speed",
                     "clock_bias", "clock_drift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise SceneConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.n_satellites[0] < 4:
            raise SceneConfigError("n_satellites must allow at least 4 satellites")
        if self.los_sigma < 0 or not 0 <= self.dropout < 1:
            raise SceneConfigError("los_sigma must be >= 0 and dropout in [0, 1)")
        if self.nlos_bias[0] < 0:
            raise SceneConfigError("NLOS bias must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for k, v in d.items():
            if isinstance(v, list) and k != "events":
                d[k] = tuple(v)
        return cls(**d)


PRESETS = {
    "open_sky": SceneConfig("open_sky", (10, 14), los_sigma=0.5),
    "wooded": SceneConfig("wooded", (9, 13), los_sigma=0.8, nlos_events=(2, 4), nlos_duration_s=(5.0, 15.0),
                          nlos_bias=(1.0, 6.0), cn0_drop=(4.0, 10.0), dropout=0.02),
    "high_rise": SceneConfig("high_rise", (7, 11), los_sigma=1.0, nlos_events=(5, 6), nlos_duration_s=(2.0, 5.0),
                             nlos_bias=(10.0, 50.0), cn0_drop=(10.0, 20.0), dropout=0.03),
    "bridge": SceneConfig("bridge", (8, 12), los_sigma=0.8, nlos_events=(1, 3), nlos_duration_s=(4.0, 10.0),
                          nlos_bias=(5.0, 25.0), cn0_drop=(10.0, 20.0), dropout=0.02),
}


def preset(scene: str, **overrides) -> SceneConfig:
    if scene not in PRESETS:
        raise SceneConfigError(f"unknown scene {scene!r}")
    return replace(PRESETS[scene], **overrides)


def _pick_sat_ids(rng, n):
    pool = GPS_PRNS + BDS_PRNS
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx)]


def _shell_point(rx, unit):
    """Point on the satellite shell along ``unit`` from ``rx``."""
    R = EARTH_RADIUS + SHELL_ALTITUDE
    b = rx @ unit
    r = -b + np.sqrt(b * b - (rx @ rx - R * R))
    return rx + r * unit


def _place_satellites(rng, rx, n, min_el):
    lat, lon, _ = ORIGIN_LLA
    rot = enu_rotation(lat, lon)
    az = ((np.arange(n) + rng.uniform(0, 1, n)) * (360.0 / n) + rng.uniform(0, 360)) % 360
    sin_el = rng.uniform(np.sin(np.radians(min_el + 1.0)), 1.0, n)
    el = np.degrees(np.arcsin(sin_el))
    a, e = np.radians(az), np.radians(el)
    enu = np.stack([np.cos(e) * np.sin(a), np.cos(e) * np.cos(a), np.sin(e)], axis=1)
    return np.stack([_shell_point(rx, u) for u in enu @ rot])


def _draw_events(cfg: SceneConfig, rng, elev):
    """NLOS events as (slot, onset, offset, bias).

    The segment is cut into one equal bin per event and each event starts
    uniformly inside its bin, so events never overlap in time. Low
    satellites are favoured.
    """
    if cfg.events:
        return [tuple(e) for e in cfg.events]
    k = int(rng.integers(cfg.nlos_events[0], cfg.nlos_events[1] + 1))
    if k == 0:
        return []
    w = (90.0 - elev) ** 2
    slots = rng.choice(len(elev), size=k, replace=k > len(elev), p=w / w.sum())
    width = cfg.duration_s / k
    out = []
    for i in range(k):
        dur = min(float(rng.uniform(*cfg.nlos_duration_s)), width)
        on = i * width + float(rng.uniform(0.0, width - dur))
        out.append((int(slots[i]), on, on + dur, float(rng.uniform(*cfg.nlos_bias))))
    return out


def generate_scene(cfg: SceneConfig) -> list[EpochObservation]:
    """One segment of epochs with ``gt_error`` equal to the injected error."""
    rng = np.random.default_rng(cfg.seed)
    lat, lon, h = ORIGIN_LLA
    rot = enu_rotation(lat, lon)
    origin = lla_to_ecef(lat, lon, h)
    rx0 = origin + rng.uniform(-3000, 3000, 3) @ np.diag([1, 1, 0]) @ rot
    heading = rng.uniform(0, 2 * np.pi)
    vel = rng.uniform(*cfg.speed) * (np.array([np.sin(heading), np.cos(heading), 0.0]) @ rot)
    n = int(rng.integers(cfg.n_satellites[0], cfg.n_satellites[1] + 1))
    sat_ids = _pick_sat_ids(rng, n)
    sat_pos = _place_satellites(rng, rx0, n, cfg.min_elevation)
    _, elev0 = az_el(rx0, sat_pos)
    events = _draw_events(cfg, rng, elev0)
    drops = [float(rng.uniform(*cfg.cn0_drop)) for _ in events]
    clock0 = rng.uniform(*cfg.clock_bias)
    drift = rng.uniform(*cfg.clock_drift)
    n_ep = int(round(cfg.duration_s * cfg.rate_hz))
    cn0_sat = cfg.cn0_base + 5.0 * (np.sin(np.radians(elev0)) - 0.5)

    out = []
    for k in range(n_ep):
        t = k / cfg.rate_hz
        rx = rx0 + vel * t
        clock = clock0 + drift * t
        err = rng.normal(0.0, cfg.los_sigma, n) if cfg.los_sigma > 0 else np.zeros(n)
        cn0 = cn0_sat + rng.normal(0.0, cfg.cn0_jitter, n)
        for (slot, on, off, bias), drop in zip(events, drops):
            if on <= t < off:
                err[slot] += bias
                cn0[slot] -= drop
        keep = rng.random(n) >= cfg.dropout
        if keep.sum() < 5:
            keep[:] = True
        idx = np.flatnonzero(keep)
        geo = np.linalg.norm(sat_pos[idx] - rx, axis=1)
        az, el = az_el(rx, sat_pos[idx])
        out.append(EpochObservation(
            epoch_time=cfg.t0 + t,
            sat_ids=[sat_ids[i] for i in idx],
            sat_pos=sat_pos[idx],
            pseudorange=geo + clock + err[idx],
            cn0=np.maximum(cn0[idx], 0.0),
            elevation=el,
            azimuth=az,
            gt_error=err[idx],
            scene=cfg.scene,
            seq_id=cfg.seq_id,
            gt_receiver_pos=rx.copy(),
        ))
    return out


def nlos_epoch_mask(sequence, threshold: float = 5.0) -> np.ndarray:
    """True where some satellite's labelled error exceeds ``threshold`` metres."""
    return np.array([bool(np.any(ep.gt_error > threshold)) for ep in sequence])


# ---------------------------------------------------------------- benchmark suite

SPLIT_EPOCHS = (42, 6, 12)   # per 60 s segment: train, valid, test


def make_benchmark_suite(seed: int = 0, segments_per_scene: int = 13, out_dir=None,
                         split_epochs=SPLIT_EPOCHS) -> dict[str, list[list[EpochObservation]]]:
    """Segments for every scene, each cut into contiguous train/valid/test blocks.

    With the defaults this yields about 2000 training windows of length 3.
    When ``out_dir`` is given, ``train.csv``, ``valid.csv``, ``test.csv`` and
    ``suite.json`` are written there.
    """
    splits = {"train": [], "valid": [], "test": []}
    configs = []
    duration = float(sum(split_epochs))
    for si, scene in enumerate(SCENES):
        for k in range(segments_per_scene):
            seg_seed = int(np.random.SeedSequence([seed, si, k]).generate_state(1)[0])
            cfg = preset(scene, seed=seg_seed, seq_id=f"{scene}_{k:02d}", duration_s=duration,
                         t0=1000.0 * (si * segments_per_scene + k))
            configs.append(asdict(cfg))
            seq = generate_scene(cfg)
            a, b, _ = split_epochs
            splits["train"].append(seq[:a])
            splits["valid"].append(seq[a:a + b])
            splits["test"].append(seq[a + b:])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, seqs in splits.items():
            save_observations(seqs, out / f"{name}.csv")
        meta = {"seed": seed, "segments_per_scene": segments_per_scene, "split_epochs": list(split_epochs),
                "scenes": configs}
        (out / "suite.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return splits
