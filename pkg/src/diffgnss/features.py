"""Per-satellite features, sliding windows, augmentation, splits and z-scoring.

Feature channels, in order: least-squares pseudorange error, its per-epoch RSS,
C/N0, elevation, azimuth.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .observations import EpochObservation, sat_sort_key
from .spp import SPPError, compute_ls_error, compute_rss, solve_epoch

FEATURE_NAMES = ("ls_error_m", "rss_m", "cn0_dbhz", "elev_deg", "az_deg")
N_FEATURES = len(FEATURE_NAMES)
DEFAULT_N_MAX = 32


class WindowTooShort(ValueError):
    pass


class TooManySatellites(ValueError):
    pass


class SegmentTooSmall(ValueError):
    pass


@dataclass
class EpochFeatures:
    """Feature rows of one epoch, keyed by satellite."""
    epoch: EpochObservation
    rows: dict                  # sat_id -> (5,) feature vector
    gt: dict                    # sat_id -> gt error (NaN when unknown)


@dataclass
class FeatureWindow:
    features: np.ndarray        # (N_max, T, 5)
    mask: np.ndarray            # (N_max, T) bool
    gt_errors: np.ndarray       # (N_max,) m at the last epoch, NaN where undefined
    sat_ids: list[str]          # length n_valid, canonical order, slots 0..n-1
    scene: str
    seq_id: str
    epoch_times: tuple          # (T,)

    @property
    def label_mask(self) -> np.ndarray:
        return self.mask[:, -1] & np.isfinite(self.gt_errors)

    @property
    def key(self):
        return (self.seq_id, self.epoch_times)

    @property
    def n_sats(self) -> int:
        return len(self.sat_ids)


def epoch_features(epoch: EpochObservation, x0=None):
    """SPP fix plus the five feature rows for every satellite of one epoch."""
    sol = solve_epoch(epoch, x0=x0)
    ls = compute_ls_error(epoch, sol)
    rss = compute_rss(ls)
    rows = {}
    gt = {}
    for k, sid in enumerate(epoch.sat_ids):
        rows[sid] = np.array([ls[k], rss, epoch.cn0[k], epoch.elevation[k], epoch.azimuth[k]])
        gt[sid] = np.nan if epoch.gt_error is None else float(epoch.gt_error[k])
    return EpochFeatures(epoch, rows, gt), sol


def sequence_features(sequence) -> list[EpochFeatures | None]:
    """Features for each epoch; ``None`` where SPP fails. Warm-starts from the previous fix."""
    out = []
    x0 = None
    for ep in sequence:
        try:
            ef, sol = epoch_features(ep, x0=x0)
            x0 = np.r_[sol.position, sol.clock_bias]
        except SPPError:
            ef = None
            x0 = None
        out.append(ef)
    return out


def _make_window(efs, n_max) -> FeatureWindow:
    T = len(efs)
    sats = sorted(set().union(*(ef.rows.keys() for ef in efs)), key=sat_sort_key)
    if len(sats) > n_max:
        raise TooManySatellites(f"window has {len(sats)} satellites, N_max is {n_max}")
    feats = np.zeros((n_max, T, N_FEATURES))
    mask = np.zeros((n_max, T), dtype=bool)
    gt = np.full(n_max, np.nan)
    for i, sid in enumerate(sats):
        for t, ef in enumerate(efs):
            row = ef.rows.get(sid)
            if row is not None:
                feats[i, t] = row
                mask[i, t] = True
        gt[i] = efs[-1].gt.get(sid, np.nan)
    last = efs[-1].epoch
    return FeatureWindow(feats, mask, gt, sats, last.scene, last.seq_id,
                         tuple(float(ef.epoch.epoch_time) for ef in efs))


def _segments(sequence):
    """Split a sequence wherever the scene label changes."""
    seg = []
    for ep in sequence:
        if seg and ep.scene != seg[-1].scene:
            yield seg
            seg = []
        seg.append(ep)
    if seg:
        yield seg


def build_windows(sequence, T: int = 3, n_max: int = DEFAULT_N_MAX, features=None) -> list[FeatureWindow]:
    """One window per run of ``T`` consecutive epochs inside each scene segment."""
    if len(sequence) < T:
        raise WindowTooShort(f"sequence has {len(sequence)} epochs, window length is {T}")
    out = []
    for seg in _segments(sequence):
        efs = features if features is not None and len(seg) == len(sequence) else sequence_features(seg)
        for end in range(T - 1, len(seg)):
            chunk = efs[end - T + 1:end + 1]
            if any(ef is None for ef in chunk):
                continue
            out.append(_make_window(chunk, n_max))
    return out


def augment(sequence, clip_len_s: float = 5.0, subseq_len: int = 3, rate_hz: float = 1.0,
            n_max: int = DEFAULT_N_MAX, include_base: bool = True) -> list[FeatureWindow]:
    """Every chronological sub-sequence of ``subseq_len`` epochs inside each sliding clip.

    Clips are ``clip_len_s`` long and start at every epoch; sub-sequences need
    not be contiguous. Duplicates (same epoch-time triple) are kept once and
    contiguous base windows are always included.
    """
    clip = max(int(round(clip_len_s * rate_hz)), subseq_len)
    out = []
    seen = set()
    for seg in _segments(sequence):
        efs = sequence_features(seg)
        if include_base and len(seg) >= subseq_len:
            for w in build_windows(seg, subseq_len, n_max, features=efs):
                if w.key not in seen:
                    seen.add(w.key)
                    out.append(w)
        for start in range(len(seg)):
            idx = range(start, min(start + clip, len(seg)))
            for combo in itertools.combinations(idx, subseq_len):
                chunk = [efs[i] for i in combo]
                if any(ef is None for ef in chunk):
                    continue
                key = (seg[0].seq_id, tuple(float(ef.epoch.epoch_time) for ef in chunk))
                if key in seen:
                    continue
                seen.add(key)
                out.append(_make_window(chunk, n_max))
    return out


def split_counts(n: int, ratio=(7, 1, 2)) -> tuple[int, int, int]:
    total = sum(ratio)
    n_train = int(round(n * ratio[0] / total))
    n_valid = int(round(n * ratio[1] / total))
    return n_train, n_valid, n - n_train - n_valid


def split_dataset(segments, ratio=(7, 1, 2), seed: int = 0, min_windows: int = 10) -> dict:
    """Contiguous time-block split inside every segment: train, then valid, then test.

    ``segments`` is an iterable of window lists (one per scene segment, time
    ordered). ``seed`` is accepted for interface symmetry; the split is
    deterministic by construction.
    """
    out = {"train": [], "valid": [], "test": []}
    for seg in segments:
        seg = list(seg)
        if len(seg) < min_windows:
            raise SegmentTooSmall(f"segment with {len(seg)} windows (< {min_windows})")
        a, b, _ = split_counts(len(seg), ratio)
        out["train"] += seg[:a]
        out["valid"] += seg[a:a + b]
        out["test"] += seg[a + b:]
    return out


# ---------------------------------------------------------------- normalisation

@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: list = field(default_factory=list)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "clamped": list(self.clamped)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   list(d.get("clamped", [])))


def compute_stats(windows, eps: float = 1e-12) -> FeatureStats:
    """Per-channel mean/std over unmasked entries (use the train split only)."""
    rows = np.concatenate([w.features[w.mask] for w in windows], axis=0)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    clamped = [FEATURE_NAMES[i] for i in np.flatnonzero(std < eps)]
    std = np.where(std < eps, 1.0, std)
    return FeatureStats(mean, std, clamped)


def normalize_features(windows, stats: FeatureStats) -> list[FeatureWindow]:
    out = []
    for w in windows:
        z = (w.features - stats.mean) / stats.std
        z[~w.mask] = 0.0
        out.append(FeatureWindow(z, w.mask, w.gt_errors, w.sat_ids, w.scene, w.seq_id, w.epoch_times))
    return out


@dataclass
class Batch:
    features: np.ndarray   # (B, N, T, 5) float32, normalised
    mask: np.ndarray       # (B, N, T) bool
    gt: np.ndarray         # (B, N) metres, 0 where unlabeled
    label_mask: np.ndarray  # (B, N) bool

    @property
    def sat_mask(self) -> np.ndarray:
        return self.mask.any(axis=2)


def collate(windows, dtype=np.float32) -> Batch:
    feats = np.stack([w.features for w in windows]).astype(dtype)
    mask = np.stack([w.mask for w in windows])
    lm = np.stack([w.label_mask for w in windows])
    gt = np.stack([np.where(w.label_mask, w.gt_errors, 0.0) for w in windows])
    return Batch(feats, mask, gt, lm)


# ---------------------------------------------------------------- storage

def save_windows(windows, directory):
    """Raw (un-normalised) windows as ``.npy`` arrays plus a JSON sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n_max = windows[0].features.shape[0] if windows else DEFAULT_N_MAX
    T = windows[0].features.shape[1] if windows else 3
    np.save(d / "features.npy", np.stack([w.features for w in windows]) if windows
            else np.zeros((0, n_max, T, N_FEATURES)))
    np.save(d / "mask.npy", np.stack([w.mask for w in windows]) if windows else np.zeros((0, n_max, T), bool))
    np.save(d / "gt.npy", np.stack([w.gt_errors for w in windows]) if windows else np.zeros((0, n_max)))
    meta = [{"sat_ids": w.sat_ids, "scene": w.scene, "seq_id": w.seq_id, "epoch_times": list(w.epoch_times)}
            for w in windows]
    (d / "windows.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_windows(directory) -> list[FeatureWindow]:
    d = Path(directory)
    feats = np.load(d / "features.npy")
    mask = np.load(d / "mask.npy")
    gt = np.load(d / "gt.npy")
    meta = json.loads((d / "windows.json").read_text(encoding="utf-8"))
    if not len(meta) == len(feats) == len(mask) == len(gt):
        raise ValueError(f"{d}: window arrays and metadata disagree in length")
    return [FeatureWindow(feats[i], mask[i], gt[i], m["sat_ids"], m["scene"], m["seq_id"], tuple(m["epoch_times"]))
            for i, m in enumerate(meta)]


def windows_from_sequences(sequences, T: int = 3, n_max: int = DEFAULT_N_MAX) -> list[FeatureWindow]:
    """Base windows of every sequence long enough to hold one; shorter ones are skipped."""
    out = []
    for seq in sequences:
        if len(seq) >= T:
            out += build_windows(seq, T, n_max)
    return out
