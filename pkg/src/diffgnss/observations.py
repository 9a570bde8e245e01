"""Per-epoch GNSS observations and the observation CSV format.

One CSV row per satellite per epoch::

    epoch_time_s,seq_id,scene,sat_id,sat_x_m,sat_y_m,sat_z_m,pr_corr_m,cn0_dbhz,
    elev_deg,az_deg,gt_err_m,gt_rx_x_m,gt_rx_y_m,gt_rx_z_m

The ``gt_*`` cells may be empty. Floats are written with ``repr`` so a
save/load cycle is exact.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENES = ("open_sky", "wooded", "high_rise", "bridge")

CSV_COLUMNS = [
    "epoch_time_s", "seq_id", "scene", "sat_id", "sat_x_m", "sat_y_m", "sat_z_m",
    "pr_corr_m", "cn0_dbhz", "elev_deg", "az_deg", "gt_err_m",
    "gt_rx_x_m", "gt_rx_y_m", "gt_rx_z_m",
]

_SAT_RE = re.compile(r"^([A-Z])(\d+)$")


class ObservationFormatError(ValueError):
    """Malformed CSV content; the message carries the 1-based line number."""


class UnitSanityError(ValueError):
    pass


def sat_sort_key(sat_id: str):
    """Canonical satellite order: constellation letter, then PRN."""
    m = _SAT_RE.match(sat_id)
    if m is None:
        return (sat_id, 0)
    return (m.group(1), int(m.group(2)))


@dataclass
class EpochObservation:
    epoch_time: float
    sat_ids: list[str]
    sat_pos: np.ndarray          # (n, 3) ECEF m
    pseudorange: np.ndarray      # (n,) corrected pseudorange, m
    cn0: np.ndarray              # (n,) dB-Hz
    elevation: np.ndarray        # (n,) deg
    azimuth: np.ndarray          # (n,) deg
    gt_error: np.ndarray | None = None       # (n,) m, NaN where unknown
    scene: str = "open_sky"
    seq_id: str = "0"
    gt_receiver_pos: np.ndarray | None = None  # (3,) ECEF m

    def __post_init__(self):
        self.sat_pos = np.asarray(self.sat_pos, dtype=np.float64).reshape(-1, 3)
        for name in ("pseudorange", "cn0", "elevation", "azimuth"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.gt_error is not None:
            self.gt_error = np.asarray(self.gt_error, dtype=np.float64)
        if self.gt_receiver_pos is not None:
            self.gt_receiver_pos = np.asarray(self.gt_receiver_pos, dtype=np.float64)
        n = len(self.sat_ids)
        if n < 1:
            raise ValueError("an epoch needs at least one satellite")
        if len(set(self.sat_ids)) != n:
            raise ValueError(f"duplicate sat_id in epoch {self.epoch_time}")
        if self.sat_pos.shape[0] != n or self.pseudorange.shape != (n,):
            raise ValueError("per-satellite arrays disagree in length")

    @property
    def n_sats(self) -> int:
        return len(self.sat_ids)

    def subset(self, idx) -> "EpochObservation":
        idx = list(idx)
        return EpochObservation(
            epoch_time=self.epoch_time,
            sat_ids=[self.sat_ids[i] for i in idx],
            sat_pos=self.sat_pos[idx],
            pseudorange=self.pseudorange[idx],
            cn0=self.cn0[idx],
            elevation=self.elevation[idx],
            azimuth=self.azimuth[idx],
            gt_error=None if self.gt_error is None else self.gt_error[idx],
            scene=self.scene,
            seq_id=self.seq_id,
            gt_receiver_pos=self.gt_receiver_pos,
        )


def check_units(ep: EpochObservation, line: int | None = None):
    where = f" (line {line})" if line is not None else ""
    if np.any((ep.elevation < 0) | (ep.elevation > 90)):
        raise UnitSanityError(f"elevation outside [0, 90] deg{where}")
    if np.any((ep.azimuth < 0) | (ep.azimuth >= 360)):
        raise UnitSanityError(f"azimuth outside [0, 360) deg{where}")
    if np.any(ep.cn0 < 0):
        raise UnitSanityError(f"negative C/N0{where}")


def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def dumps_observations(sequences) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for seq in sequences:
        for ep in seq:
            rx = ep.gt_receiver_pos
            for k, sid in enumerate(ep.sat_ids):
                gt = np.nan if ep.gt_error is None else ep.gt_error[k]
                w.writerow([
                    _fmt(ep.epoch_time), ep.seq_id, ep.scene, sid,
                    *(_fmt(v) for v in ep.sat_pos[k]),
                    _fmt(ep.pseudorange[k]), _fmt(ep.cn0[k]), _fmt(ep.elevation[k]),
                    _fmt(ep.azimuth[k]), _fmt(gt),
                    *((_fmt(v) for v in rx) if rx is not None else ("", "", "")),
                ])
    return buf.getvalue()


def save_observations(sequences, path):
    Path(path).write_text(dumps_observations(sequences), encoding="utf-8")


def _float(cell, line, col, optional=False):
    if cell == "":
        if optional:
            return math.nan
        raise ObservationFormatError(f"line {line}: empty required field {col!r}")
    try:
        return float(cell)
    except ValueError:
        raise ObservationFormatError(f"line {line}: cannot parse {col!r} value {cell!r}") from None


@dataclass
class _EpochRows:
    time: float
    seq_id: str
    scene: str
    line: int
    sats: list = field(default_factory=list)
    rx: tuple | None = None


def loads_observations(text: str) -> list[list[EpochObservation]]:
    """Parse CSV text into sequences (grouped by ``seq_id``, epochs in file order)."""
    lines = text.splitlines()
    if not lines or not text.strip():
        return []
    reader = csv.reader(lines)
    header = next(reader)
    if [h.strip() for h in header] != CSV_COLUMNS:
        raise ObservationFormatError(f"line 1: unexpected header {header}")
    seqs: dict[str, list[_EpochRows]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ObservationFormatError(
                f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        t = _float(row[0], lineno, "epoch_time_s")
        seq_id, scene, sid = row[1], row[2], row[3]
        if scene not in SCENES:
            raise ObservationFormatError(f"line {lineno}: unknown scene {scene!r}")
        if not sid:
            raise ObservationFormatError(f"line {lineno}: empty sat_id")
        vals = [_float(row[i], lineno, CSV_COLUMNS[i]) for i in range(4, 11)]
        gt = _float(row[11], lineno, "gt_err_m", optional=True)
        rx = tuple(_float(row[i], lineno, CSV_COLUMNS[i], optional=True) for i in range(12, 15))
        cn0, elev, az = vals[4], vals[5], vals[6]
        if not 0 <= elev <= 90:
            raise UnitSanityError(f"line {lineno}: elevation {elev} outside [0, 90] deg")
        if not 0 <= az < 360:
            raise UnitSanityError(f"line {lineno}: azimuth {az} outside [0, 360) deg")
        if cn0 < 0:
            raise UnitSanityError(f"line {lineno}: negative C/N0 {cn0}")
        epochs = seqs.setdefault(seq_id, [])
        if not epochs or epochs[-1].time != t:
            if epochs and t < epochs[-1].time:
                raise ObservationFormatError(f"line {lineno}: epoch time goes backwards in {seq_id!r}")
            epochs.append(_EpochRows(t, seq_id, scene, lineno))
        cur = epochs[-1]
        if any(s[0] == sid for s in cur.sats):
            raise ObservationFormatError(f"line {lineno}: duplicate {sid} at epoch {t}")
        cur.sats.append((sid, vals[0:3], vals[3], cn0, elev, az, gt))
        if not any(math.isnan(v) for v in rx):
            cur.rx = rx

    out = []
    for seq_id, epochs in seqs.items():
        seq = []
        for e in epochs:
            gts = np.array([s[6] for s in e.sats])
            seq.append(EpochObservation(
                epoch_time=e.time,
                sat_ids=[s[0] for s in e.sats],
                sat_pos=np.array([s[1] for s in e.sats]),
                pseudorange=np.array([s[2] for s in e.sats]),
                cn0=np.array([s[3] for s in e.sats]),
                elevation=np.array([s[4] for s in e.sats]),
                azimuth=np.array([s[5] for s in e.sats]),
                gt_error=None if np.isnan(gts).all() else gts,
                scene=e.scene,
                seq_id=seq_id,
                gt_receiver_pos=None if e.rx is None else np.array(e.rx),
            ))
        out.append(seq)
    return out


def load_observations(path) -> list[list[EpochObservation]]:
    return loads_observations(Path(path).read_text(encoding="utf-8"))


def sequences_equal(a, b) -> bool:
    """Structural equality of two sequence lists (NaN == NaN)."""
    if len(a) != len(b):
        return False
    for sa, sb in zip(a, b):
        if len(sa) != len(sb):
            return False
        for ea, eb in zip(sa, sb):
            if (ea.epoch_time, ea.sat_ids, ea.scene, ea.seq_id) != (eb.epoch_time, eb.sat_ids, eb.scene, eb.seq_id):
                return False
            for name in ("sat_pos", "pseudorange", "cn0", "elevation", "azimuth", "gt_error", "gt_receiver_pos"):
                x, y = getattr(ea, name), getattr(eb, name)
                if (x is None) != (y is None):
                    return False
                if x is not None and not np.array_equal(x, y, equal_nan=True):
                    return False
    return True
