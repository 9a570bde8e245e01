"""``diffgnss`` command line: synth, prepare, train, infer, evaluate, position, study.

Settings come from built-in defaults, then the ``--config`` JSON file, then
explicit flags; later sources win. Exit status is 0 on success, 1 on a usage
error (bad flag, missing file, invalid config) and 2 on a runtime failure.
``DIFFGNSS_THREADS`` caps the BLAS/OpenMP thread pools.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("diffgnss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(a):
    from .synth import make_benchmark_suite
    cfg = _json_config(a.config)
    seed = a.seed if a.seed is not None else cfg.get("seed", 0)
    kw = {k: cfg[k] for k in ("segments_per_scene", "split_epochs") if k in cfg}
    suite = make_benchmark_suite(seed, out_dir=None, **kw)
    if a.scene:
        suite = {k: [s for s in v if s and s[0].scene == a.scene] for k, v in suite.items()}
    out = _out_dir(a.out)
    from .observations import save_observations
    for name, seqs in suite.items():
        save_observations(seqs, out / f"{name}.csv")
    (out / "suite.json").write_text(json.dumps({"seed": seed, "scene": a.scene, **kw}, sort_keys=True) + "\n")
    print(f"wrote {', '.join(f'{k}.csv' for k in suite)} to {out}")


def cmd_prepare(a):
    from .features import compute_stats, save_windows, windows_from_sequences
    from .observations import load_observations
    data = _existing(a.data, "data directory")
    files = {s: data / f"{s}.csv" for s in ("train", "valid", "test")}
    for f in files.values():
        _existing(f)
    out = _out_dir(a.out)
    splits = {}
    for s, f in files.items():
        seqs = load_observations(f)
        if a.scene:
            seqs = [q for q in seqs if q and q[0].scene == a.scene]
        splits[s] = windows_from_sequences(seqs)
        save_windows(splits[s], out / s)
    if not splits["train"]:
        raise RuntimeError("training split produced no windows")
    stats = compute_stats(splits["train"])
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=1) + "\n")
    print(" ".join(f"{s}={len(w)}" for s, w in splits.items()) + f" windows -> {out}")


def _prepared(data):
    """Loads prepared splits; a directory of raw CSVs is prepared in memory."""
    from .features import FeatureStats, compute_stats, load_windows, windows_from_sequences
    from .observations import load_observations
    d = _existing(data, "data directory")
    if (d / "stats.json").exists():
        splits = {s: load_windows(d / s) for s in ("train", "valid", "test") if (d / s).exists()}
        stats = FeatureStats.from_dict(json.loads((d / "stats.json").read_text()))
    else:
        splits = {}
        for s in ("train", "valid", "test"):
            if (d / f"{s}.csv").exists():
                splits[s] = windows_from_sequences(load_observations(d / f"{s}.csv"))
        if "train" not in splits:
            raise UsageError(f"{d}: neither prepared windows (stats.json) nor train.csv found")
        stats = compute_stats(splits["train"])
    return splits, stats


def _json_config(path) -> dict:
    if path is None:
        return {}
    p = _existing(path, "config file")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return d


def cmd_train(a):
    from .features import normalize_features
    from .training import parse_run_config, run_config_dict, save_checkpoint, train
    raw = _json_config(a.config)
    try:
        cfg, mcfg, dcfg = parse_run_config(raw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    for flag in a.ablate or []:
        cfg = replace(cfg, **{flag: True})
    if a.backbone:
        cfg = replace(cfg, coarse_backbone=a.backbone)
    if a.epochs is not None:
        cfg = replace(cfg, epochs=a.epochs)
    if a.ddim_steps is not None:
        dcfg = replace(dcfg, ddim_steps=a.ddim_steps)
    splits, stats = _prepared(a.data)
    if not splits.get("valid"):
        raise UsageError("training needs a non-empty valid split")
    tr = normalize_features(splits["train"], stats)
    va = normalize_features(splits["valid"], stats)
    out = _out_dir(a.out)
    ckpt, _ = train(cfg, tr, va, stats, mcfg, dcfg,
                    progress=lambda r: log.info("epoch %d valid MAE %.4f m", r["epoch"], r["valid_mae"]))
    save_checkpoint(ckpt, out / "model.dgns")
    (out / "run_config.json").write_text(json.dumps(run_config_dict(cfg, mcfg, dcfg), sort_keys=True, indent=1) + "\n")
    keys = ["epoch", "lr", "train_loss", "valid_mae", "valid_rmse", "valid_coarse_mae"]
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in ckpt.history:
            w.writerow(["" if r.get(k) is None else repr(r[k]) for k in keys])
    print(f"best epoch {ckpt.epoch}; checkpoint {out / 'model.dgns'}")


def _load_model(a):
    from .training import load_checkpoint
    ckpt = load_checkpoint(_existing(a.checkpoint, "checkpoint"))
    model = ckpt.build_model()
    steps = getattr(a, "ddim_steps", None)
    if steps is not None:
        model.set_inference_steps(steps)
    return ckpt, model


def _observation_windows(path, stats, scene=None):
    from .features import normalize_features, windows_from_sequences
    from .observations import load_observations
    seqs = load_observations(_existing(path, "observation file"))
    if scene:
        seqs = [q for q in seqs if q and q[0].scene == scene]
    return seqs, normalize_features(windows_from_sequences(seqs), stats)


def _test_csv(data):
    p = Path(data)
    return p / "test.csv" if p.is_dir() else p


def cmd_infer(a):
    from .evaluation import predict, save_predictions
    ckpt, model = _load_model(a)
    _, windows = _observation_windows(_test_csv(a.data), ckpt.stats, a.scene)
    if not windows:
        raise RuntimeError("no window could be built from the observations")
    preds = predict(model, windows, seed=a.seed or 0)
    out = Path(a.out)
    if out.suffix != ".csv":
        out = _out_dir(out) / "predictions.csv"
    save_predictions(preds, out)
    print(f"{len(preds)} satellite predictions -> {out}")


def cmd_evaluate(a):
    from .evaluation import evaluate_predictions, export_report, load_predictions
    preds = load_predictions(_existing(a.predictions, "predictions file"))
    if a.scene:
        preds = preds.select(np.asarray(preds.scene) == a.scene)
    report = evaluate_predictions(preds)
    if a.data:
        from .evaluation import position_compare
        from .observations import load_observations
        seqs = load_observations(_existing(_test_csv(a.data), "observation file"))
        report.positioning = position_compare(seqs, preds.lookup("fine"), preds.lookup("u0"),
                                              exclude_uncertain=a.exclude_uncertain)
    export_report(report, _out_dir(a.out))
    print(f"MAE {report.mae:.3f} m  RMSE {report.rmse:.3f} m -> {a.out}")


def cmd_position(a):
    from .evaluation import cdf_table, load_predictions, position_compare
    from .observations import load_observations
    preds = load_predictions(_existing(a.predictions, "predictions file"))
    seqs = load_observations(_existing(_test_csv(a.data), "observation file"))
    if a.scene:
        seqs = [q for q in seqs if q and q[0].scene == a.scene]
    block = position_compare(seqs, preds.lookup("fine"), preds.lookup("u0"), exclude_uncertain=a.exclude_uncertain)
    out = _out_dir(a.out)
    (out / "positioning.json").write_text(json.dumps(block.summary(), sort_keys=True, indent=1) + "\n")
    with open(out / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizontal_error_m", "cdf_raw", "cdf_corrected"])
        for row in cdf_table(block):
            w.writerow([repr(v) for v in row])
    print(f"mean horizontal error raw {block.mean_h_raw:.2f} m, corrected {block.mean_h_corrected:.2f} m")


def cmd_study(a):
    from .evaluation import uncertainty_study
    ckpt, model = _load_model(a)
    _, windows = _observation_windows(_test_csv(a.data), ckpt.stats, a.scene)
    try:
        iters = [int(v) for v in a.iterations.split(",")]
    except ValueError:
        raise UsageError(f"--iterations expects comma-separated integers, got {a.iterations!r}") from None
    rows = uncertainty_study(model, windows, iters, seed=a.seed or 0)
    out = Path(a.out)
    if out.suffix != ".csv":
        out = _out_dir(out) / "uncertainty_study.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iterations", "mae_m", "rmse_m", "mean_u0"])
        for r in rows:
            w.writerow([r["iterations"], repr(r["mae"]), repr(r["rmse"]), repr(r["mean_u0"])])
    print(f"{len(rows)} rows -> {out}")


# ---------------------------------------------------------------- parser

ABLATE_CHOICES = ("no_diffusion", "no_temporal_cond", "no_spatial_cond", "no_coarse_embed", "no_uncertainty")


def build_parser() -> argparse.ArgumentParser:
    from .coarse import BACKBONES
    from .observations import SCENES
    p = _Parser(prog="diffgnss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, config=False, seed=True, out=True, checkpoint=False, ddim=False, scene=False, data=None):
        if config:
            sp.add_argument("--config", metavar="JSON", help="JSON config file; flags override its fields")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (integer)")
        if out:
            sp.add_argument("--out", required=True, metavar="PATH", help="output directory (or .csv file where noted)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, metavar="FILE", help="model checkpoint (.dgns)")
        if ddim:
            sp.add_argument("--ddim-steps", type=int, default=None, metavar="N",
                            help="denoiser evaluations at inference (count, default from checkpoint: 2)")
        if scene:
            sp.add_argument("--scene", choices=SCENES, default=None, help="restrict to one scene label")
        if data:
            sp.add_argument("--data", required=True, metavar="PATH", help=data)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark suite (CSV)")
    common(sp, config=True, scene=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("prepare", help="build feature windows and train-split normalisation stats")
    common(sp, seed=False, scene=True, data="directory holding train.csv, valid.csv, test.csv")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a model; writes model.dgns, history.csv, run_config.json")
    common(sp, config=True, ddim=True, data="prepared directory, or directory of suite CSVs")
    sp.add_argument("--ablate", action="append", choices=ABLATE_CHOICES, metavar="FLAG",
                    help=f"ablation switch, repeatable: {', '.join(ABLATE_CHOICES)}")
    sp.add_argument("--backbone", choices=BACKBONES, default=None, help="coarse-stage backbone")
    sp.add_argument("--epochs", type=int, default=None, metavar="N", help="training epochs (count)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="per-satellite predictions CSV (errors in m, u0 in [0, 1])")
    common(sp, checkpoint=True, ddim=True, scene=True, data="observation CSV, or directory with test.csv")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="metrics.csv, per_scene.csv, traces.csv, summary.json (+ cdf.csv)")
    common(sp, seed=False, scene=True)
    sp.add_argument("--predictions", required=True, metavar="CSV", help="output of `infer`")
    sp.add_argument("--data", default=None, metavar="PATH",
                    help="observation CSV (or directory with test.csv); adds the positioning block")
    sp.add_argument("--exclude-uncertain", action="store_true",
                    help="drop satellites with u0 >= 0.5 from corrected SPP (needs --data)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("position", help="raw vs corrected SPP: positioning.json and cdf.csv (errors in m)")
    common(sp, seed=False, scene=True, data="observation CSV, or directory with test.csv")
    sp.add_argument("--predictions", required=True, metavar="CSV", help="output of `infer`")
    sp.add_argument("--exclude-uncertain", action="store_true", help="drop satellites with u0 >= 0.5")
    sp.set_defaults(func=cmd_position)

    sp = sub.add_parser("study", help="MAE (m) and mean u0 against DDIM iteration count")
    common(sp, checkpoint=True, ddim=False, scene=True, data="observation CSV, or directory with test.csv")
    sp.add_argument("--iterations", default="1,2,3,5,10", metavar="LIST",
                    help="comma-separated DDIM iteration counts (default 1,2,3,5,10)")
    sp.set_defaults(func=cmd_study)
    return p


def _limit_threads():
    n = os.environ.get("DIFFGNSS_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"DIFFGNSS_THREADS must be a positive integer, got {n!r}") from None
    if k < 1:
        raise UsageError(f"DIFFGNSS_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limiter = _limit_threads()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:   # --help
        return int(e.code or 0)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
