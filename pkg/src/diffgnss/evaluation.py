"""Error metrics, scene tables, uncertainty study, plug-and-play runs and positioning comparison."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import collate
from .model import DiffGNSS
from .spp import SPPError, ecef_to_enu, solve_spp
from .training import TrainConfig, train

UNCERTAIN_THRESHOLD = 0.5

PREDICTION_COLUMNS = ["seq_id", "epoch_time_s", "sat_id", "scene", "init_m", "eps0_hat", "fine_m", "u0_hat",
                      "gt_err_m"]


class EmptyMaskError(ValueError):
    pass


def metrics(pred, gt, mask=None) -> tuple[float, float]:
    """(MAE, RMSE) over the satellites selected by ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no valid satellite to evaluate")
    e = (pred - gt)[mask]
    return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e)))


# ---------------------------------------------------------------- predictions

@dataclass
class Predictions:
    """One row per labelled satellite at the last epoch of each window."""
    seq_id: list
    epoch_time: np.ndarray
    sat_id: list
    scene: list
    init: np.ndarray
    eps0: np.ndarray
    fine: np.ndarray
    u0: np.ndarray
    gt: np.ndarray          # NaN where the window carries no label

    def __len__(self):
        return len(self.sat_id)

    @property
    def labelled(self) -> np.ndarray:
        return np.isfinite(self.gt)

    def select(self, keep) -> "Predictions":
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        return Predictions([self.seq_id[i] for i in idx], self.epoch_time[idx], [self.sat_id[i] for i in idx],
                           [self.scene[i] for i in idx], self.init[idx], self.eps0[idx], self.fine[idx],
                           self.u0[idx], self.gt[idx])

    def lookup(self, field_name="fine"):
        """``{(seq_id, epoch_time): {sat_id: value}}`` for positioning."""
        vals = getattr(self, field_name)
        out = {}
        for i in range(len(self)):
            out.setdefault((self.seq_id[i], float(self.epoch_time[i])), {})[self.sat_id[i]] = float(vals[i])
        return out


def predict(model: DiffGNSS, windows, seed: int = 0, steps=None, batch_size: int = 64) -> Predictions:
    """Inference over normalised windows; one row per valid satellite at each window's last epoch."""
    cols = {k: [] for k in ("seq_id", "epoch_time", "sat_id", "scene", "init", "eps0", "fine", "u0", "gt")}
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        pb = model.predict(collate(chunk), seed=seed + start, steps=steps)
        for b, w in enumerate(chunk):
            last = w.mask[:, -1]
            for i in np.flatnonzero(last):
                cols["seq_id"].append(w.seq_id)
                cols["epoch_time"].append(w.epoch_times[-1])
                cols["sat_id"].append(w.sat_ids[i])
                cols["scene"].append(w.scene)
                cols["init"].append(pb.init_m[b, i])
                cols["eps0"].append(pb.eps0_hat[b, i])
                cols["fine"].append(pb.fine_m[b, i])
                cols["u0"].append(pb.u0_hat[b, i])
                cols["gt"].append(w.gt_errors[i])
    f = lambda k: np.asarray(cols[k], dtype=np.float64)
    return Predictions(cols["seq_id"], f("epoch_time"), cols["sat_id"], cols["scene"], f("init"), f("eps0"),
                       f("fine"), f("u0"), f("gt"))


def _num(x) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def dumps_predictions(p: Predictions) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for i in range(len(p)):
        w.writerow([p.seq_id[i], _num(p.epoch_time[i]), p.sat_id[i], p.scene[i], _num(p.init[i]), _num(p.eps0[i]),
                    _num(p.fine[i]), _num(p.u0[i]), _num(p.gt[i])])
    return buf.getvalue()


def save_predictions(p: Predictions, path):
    Path(path).write_text(dumps_predictions(p), encoding="utf-8")


def load_predictions(path) -> Predictions:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PREDICTION_COLUMNS:
        raise ValueError(f"{path}: not a predictions file (header must be {','.join(PREDICTION_COLUMNS)})")
    body = rows[1:]
    col = lambda j: [r[j] for r in body]
    num = lambda j: np.array([float(v) if v != "" else np.nan for v in col(j)], dtype=np.float64)
    return Predictions(col(0), num(1), col(2), col(3), num(4), num(5), num(6), num(7), num(8))


# ---------------------------------------------------------------- reports

@dataclass
class PositioningBlock:
    n_epochs: int
    n_failed: int
    mean_h_raw: float
    mean_h_corrected: float
    enu_rmse_raw: list
    enu_rmse_corrected: list
    h_raw: np.ndarray = field(repr=False)
    h_corrected: np.ndarray = field(repr=False)
    residual_norm_raw: np.ndarray = field(repr=False)
    residual_norm_corrected: np.ndarray = field(repr=False)
    excluded_satellites: int = 0

    @property
    def reduction(self) -> float:
        return 1.0 - self.mean_h_corrected / self.mean_h_raw if self.mean_h_raw > 0 else 0.0

    def summary(self) -> dict:
        return {"n_epochs": self.n_epochs, "n_failed": self.n_failed, "mean_h_raw_m": self.mean_h_raw,
                "mean_h_corrected_m": self.mean_h_corrected, "enu_rmse_raw_m": self.enu_rmse_raw,
                "enu_rmse_corrected_m": self.enu_rmse_corrected, "h_reduction": self.reduction,
                "excluded_satellites": self.excluded_satellites}


@dataclass
class EvalReport:
    mae: float
    rmse: float
    coarse_mae: float
    coarse_rmse: float
    n: int
    per_scene: list                 # dicts: scene, n, mae, rmse, coarse_mae, coarse_rmse
    uncertainty: dict
    traces: Predictions = field(repr=False)
    notes: list = field(default_factory=list)
    positioning: PositioningBlock | None = None

    def summary(self) -> dict:
        out = {"mae_m": self.mae, "rmse_m": self.rmse, "coarse_mae_m": self.coarse_mae,
               "coarse_rmse_m": self.coarse_rmse, "n_satellites": self.n, "per_scene": self.per_scene,
               "uncertainty": self.uncertainty, "notes": self.notes}
        if self.positioning is not None:
            out["positioning"] = self.positioning.summary()
        return out


def scene_eval(p: Predictions, scenes=None) -> tuple[list[dict], list[str]]:
    """Per-scene metrics; scenes without labelled rows are omitted and noted."""
    lab = p.labelled
    sc = np.asarray(p.scene)
    names = sorted(set(p.scene)) if scenes is None else list(scenes)
    rows, notes = [], []
    for s in names:
        m = lab & (sc == s)
        if not m.any():
            notes.append(f"scene {s}: no labelled satellites, omitted")
            continue
        mae, rmse = metrics(p.fine, p.gt, m)
        cmae, crmse = metrics(p.init, p.gt, m)
        rows.append({"scene": s, "n": int(m.sum()), "mae": mae, "rmse": rmse, "coarse_mae": cmae, "coarse_rmse": crmse})
    return rows, notes


def uncertainty_summary(p: Predictions, threshold: float = UNCERTAIN_THRESHOLD) -> dict:
    lab = p.labelled
    out = {"threshold": threshold, "mean_u0": float(np.mean(p.u0[lab])) if lab.any() else float("nan")}
    for name, m in (("certain", lab & (p.u0 < threshold)), ("uncertain", lab & (p.u0 >= threshold))):
        out[f"n_{name}"] = int(m.sum())
        out[f"mae_{name}"] = metrics(p.fine, p.gt, m)[0] if m.any() else float("nan")
    return out


def evaluate_predictions(p: Predictions, scenes=None) -> EvalReport:
    lab = p.labelled
    mae, rmse = metrics(p.fine, p.gt, lab)
    cmae, crmse = metrics(p.init, p.gt, lab)
    per_scene, notes = scene_eval(p, scenes)
    return EvalReport(mae, rmse, cmae, crmse, int(lab.sum()), per_scene, uncertainty_summary(p), p, notes)


def uncertainty_study(model: DiffGNSS, windows, iterations=(1, 2, 3, 5, 10), seed: int = 0) -> list[dict]:
    """MAE and mean predicted uncertainty for each DDIM iteration count."""
    if model.refiner is None:
        raise ValueError("uncertainty study needs a model with the diffusion refiner")
    rows = []
    for k in iterations:
        p = predict(model, windows, seed=seed, steps=int(k))
        lab = p.labelled
        mae, rmse = metrics(p.fine, p.gt, lab)
        rows.append({"iterations": int(k), "mae": mae, "rmse": rmse, "mean_u0": float(np.mean(p.u0[lab]))})
    return rows


def plug_and_play(backbone: str, with_refiner: bool, train_windows, valid_windows, test_windows, stats,
                  train_cfg=None, model_cfg=None, diff_cfg=None, seed: int = 0):
    """Train ``backbone`` as the coarse stage, with or without the refiner; returns (report, checkpoint)."""
    cfg = replace(train_cfg or TrainConfig(), coarse_backbone=backbone, no_diffusion=not with_refiner)
    ckpt, model = train(cfg, train_windows, valid_windows, stats, model_cfg, diff_cfg)
    report = evaluate_predictions(predict(model, test_windows, seed=seed))
    return report, ckpt


# ---------------------------------------------------------------- positioning

def _horizontal(pos, truth):
    enu = ecef_to_enu(pos - truth, truth)
    return float(np.hypot(enu[0], enu[1])), enu


def position_compare(sequences, corrections: dict, uncertainty: dict | None = None,
                     exclude_uncertain: bool = False, threshold: float = UNCERTAIN_THRESHOLD) -> PositioningBlock:
    """SPP with raw pseudoranges against SPP with predicted errors removed.

    ``corrections`` maps ``(seq_id, epoch_time)`` to ``{sat_id: error_m}``;
    only epochs present there are evaluated, and satellites without a
    prediction keep their raw pseudorange. Errors are taken in the local
    E/N/U frame at the true receiver position.
    """
    h_raw, h_cor, enu_raw, enu_cor, rn_raw, rn_cor = [], [], [], [], [], []
    failed = 0
    excluded = 0
    for seq in sequences:
        x0 = None
        for ep in seq:
            key = (ep.seq_id, float(ep.epoch_time))
            if key not in corrections:
                continue
            if ep.gt_receiver_pos is None:
                raise ValueError(f"epoch {key} has no ground-truth receiver position")
            corr = corrections[key]
            delta = np.array([corr.get(s, 0.0) for s in ep.sat_ids])
            keep = np.ones(ep.n_sats, dtype=bool)
            if exclude_uncertain and uncertainty is not None:
                unc = uncertainty.get(key, {})
                keep = np.array([unc.get(s, 0.0) < threshold for s in ep.sat_ids])
                if keep.sum() < 4:
                    keep[:] = True
                excluded += int((~keep).sum())
            try:
                raw = solve_spp(ep.sat_pos, ep.pseudorange, x0=x0)
                cor = solve_spp(ep.sat_pos[keep], (ep.pseudorange - delta)[keep], x0=x0)
            except SPPError:
                failed += 1
                continue
            x0 = np.r_[raw.position, raw.clock_bias]
            for sol, hs, es in ((raw, h_raw, enu_raw), (cor, h_cor, enu_cor)):
                h, enu = _horizontal(sol.position, ep.gt_receiver_pos)
                hs.append(h)
                es.append(enu)
            rn_raw.append(float(np.linalg.norm(raw.residuals)))
            rn_cor.append(float(np.linalg.norm(cor.residuals)))
    if not h_raw:
        raise ValueError("no epoch could be evaluated")
    er, ec = np.array(enu_raw), np.array(enu_cor)
    rms = lambda a: [float(v) for v in np.sqrt(np.mean(a * a, axis=0))]
    return PositioningBlock(len(h_raw), failed, float(np.mean(h_raw)), float(np.mean(h_cor)), rms(er), rms(ec),
                            np.array(h_raw), np.array(h_cor), np.array(rn_raw), np.array(rn_cor), excluded)


def empirical_cdf(samples, at) -> np.ndarray:
    s = np.sort(np.asarray(samples, dtype=np.float64))
    return np.searchsorted(s, np.asarray(at, dtype=np.float64), side="right") / len(s)


def cdf_table(block: PositioningBlock) -> list[tuple[float, float, float]]:
    """Rows ``(error_m, cdf_raw, cdf_corrected)`` at every observed horizontal error, ascending."""
    grid = np.unique(np.concatenate([block.h_raw, block.h_corrected]))
    return list(zip(grid.tolist(), empirical_cdf(block.h_raw, grid).tolist(),
                    empirical_cdf(block.h_corrected, grid).tolist()))


# ---------------------------------------------------------------- export

def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def export_report(report: EvalReport, out_dir) -> list[Path]:
    """Writes metrics.csv, per_scene.csv, traces.csv, summary.json and, with positioning, cdf.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    m = [("mae_m", report.mae), ("rmse_m", report.rmse), ("coarse_mae_m", report.coarse_mae),
         ("coarse_rmse_m", report.coarse_rmse), ("n_satellites", report.n)]
    m += [(f"uncertainty_{k}", v) for k, v in report.uncertainty.items()]
    if report.positioning is not None:
        for k, v in report.positioning.summary().items():
            if isinstance(v, list):
                m += [(f"positioning_{k}_{axis}", x) for axis, x in zip("enu", v)]
            else:
                m.append((f"positioning_{k}", v))
    _write_csv(out / "metrics.csv", ["metric", "value"], m)
    _write_csv(out / "per_scene.csv", ["scene", "n", "mae_m", "rmse_m", "coarse_mae_m", "coarse_rmse_m"],
               [(r["scene"], r["n"], r["mae"], r["rmse"], r["coarse_mae"], r["coarse_rmse"]) for r in report.per_scene])
    t = report.traces
    order = sorted(range(len(t)), key=lambda i: (t.seq_id[i], t.sat_id[i], t.epoch_time[i]))
    _write_csv(out / "traces.csv", ["seq_id", "sat_id", "epoch_time_s", "scene", "gt_err_m", "init_m", "fine_m", "u0_hat"],
               [(t.seq_id[i], t.sat_id[i], float(t.epoch_time[i]), t.scene[i], float(t.gt[i]), float(t.init[i]),
                 float(t.fine[i]), float(t.u0[i])) for i in order])
    written += [out / "metrics.csv", out / "per_scene.csv", out / "traces.csv"]
    if report.positioning is not None:
        _write_csv(out / "cdf.csv", ["horizontal_error_m", "cdf_raw", "cdf_corrected"], cdf_table(report.positioning))
        written.append(out / "cdf.csv")
    (out / "summary.json").write_text(json.dumps(_clean(report.summary()), sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")
    written.append(out / "summary.json")
    return written
