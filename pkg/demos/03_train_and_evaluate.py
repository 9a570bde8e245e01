"""
Training on a synthetic benchmark and checking what the model learned
======================================================================

A small suite (four scenes, a few segments each) trained for a handful of
epochs. Expect a few minutes on one core.
"""

# %%
import numpy as np

from diffgnss.evaluation import evaluate_predictions, position_compare, predict
from diffgnss.features import build_windows, compute_stats, normalize_features
from diffgnss.model import ModelConfig
from diffgnss.synth import make_benchmark_suite
from diffgnss.training import TrainConfig, train

suite = make_benchmark_suite(seed=1, segments_per_scene=4)
raw = {k: [w for q in seqs for w in build_windows(q)] for k, seqs in suite.items()}
stats = compute_stats(raw["train"])
wins = {k: normalize_features(v, stats) for k, v in raw.items()}
print({k: len(v) for k, v in wins.items()}, "windows")

# %%
model_cfg = ModelConfig(hidden=32, state_dim=8, head_hidden=32)
cfg = TrainConfig(lr0=1e-3, batch=16, epochs=10)
ckpt, model = train(cfg, wins["train"], wins["valid"], stats, model_cfg,
                    progress=lambda r: print(f"epoch {r['epoch']:>2}  valid MAE {r['valid_mae']:.3f} m"))
print("best epoch", ckpt.epoch)

# %%
preds = predict(model, wins["test"])
report = evaluate_predictions(preds)
print(f"test MAE coarse {report.coarse_mae:.3f} m -> refined {report.mae:.3f} m, RMSE {report.rmse:.3f} m")
for row in report.per_scene:
    print(f"  {row['scene']:<10} MAE {row['mae']:.3f}  RMSE {row['rmse']:.3f}  n={row['n']}")

# %%
# Satellites flagged as uncertain should carry the larger errors.
err = np.abs(preds.fine - preds.gt)
flag = preds.u0 >= 0.5
print(f"MAE certain {err[~flag].mean():.3f} m ({(~flag).sum()}), uncertain {err[flag].mean():.3f} m ({flag.sum()})")

# %%
# Remove the predicted errors and re-solve the high-rise fixes.
high_rise = [q for q in suite["test"] if q[0].scene == "high_rise"]
block = position_compare(high_rise, preds.lookup("fine"))
print(f"high_rise horizontal error raw {block.mean_h_raw:.2f} m, corrected {block.mean_h_corrected:.2f} m")
