import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffgnss.evaluation import (EmptyMaskError, Predictions, cdf_table, empirical_cdf, evaluate_predictions,
                                 export_report, load_predictions, metrics, plug_and_play, position_compare, predict,
                                 save_predictions, scene_eval, uncertainty_study)
from diffgnss.features import build_windows, compute_stats, normalize_features
from diffgnss.model import DiffGNSS, ModelConfig
from diffgnss.synth import generate_scene, preset
from diffgnss.training import TrainConfig

TINY = ModelConfig(hidden=8, state_dim=4, head_hidden=8)


@pytest.fixture(scope="module")
def sequences():
    return [generate_scene(preset(scene, seed=20 + i, duration_s=12, seq_id=f"{scene}_x", t0=100.0 * i))
            for i, scene in enumerate(["open_sky", "high_rise", "bridge"])]


@pytest.fixture(scope="module")
def windows(sequences):
    wins = [w for q in sequences for w in build_windows(q)]
    return normalize_features(wins, compute_stats(wins))


@pytest.fixture(scope="module")
def preds(windows):
    return predict(DiffGNSS(TINY, seed=1), windows, seed=0)


def oracle_corrections(sequences, scale=1.0):
    return {(ep.seq_id, float(ep.epoch_time)): dict(zip(ep.sat_ids, scale * ep.gt_error))
            for q in sequences for ep in q}


# ---------------------------------------------------------------- metrics

@pytest.mark.parametrize("err,mae,rmse", [([0.0, 0.0], 0.0, 0.0), ([1.0, -1.0], 1.0, 1.0),
                                          ([0.0, 2.0], 1.0, np.sqrt(2))])
def test_metric_cases(err, mae, rmse):
    assert metrics(np.array(err), np.zeros(2)) == pytest.approx((mae, rmse))


def test_metrics_respect_mask():
    assert metrics([1.0, 100.0], [0.0, 0.0], [True, False]) == (1.0, 1.0)
    with pytest.raises(EmptyMaskError):
        metrics([1.0], [0.0], [False])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_rmse_never_below_mae(errs):
    mae, rmse = metrics(np.array(errs), np.zeros(len(errs)))
    assert rmse >= mae - 1e-12 * max(1.0, rmse) and mae >= 0


# ---------------------------------------------------------------- predictions and reports

def test_predictions_cover_last_epoch_of_every_window(preds, windows):
    assert len(preds) == sum(int(w.mask[:, -1].sum()) for w in windows)
    assert np.all(preds.labelled)
    np.testing.assert_array_equal(preds.fine, preds.init + 10.0 * preds.eps0)


def test_prediction_file_round_trip(preds, tmp_path):
    save_predictions(preds, tmp_path / "p.csv")
    back = load_predictions(tmp_path / "p.csv")
    assert back.sat_id == preds.sat_id and back.seq_id == preds.seq_id
    np.testing.assert_array_equal(back.fine, preds.fine)
    np.testing.assert_array_equal(back.gt, preds.gt)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="not a predictions file"):
        load_predictions(tmp_path / "bad.csv")


def test_scene_table_weights_back_to_overall(preds):
    report = evaluate_predictions(preds)
    rows = report.per_scene
    assert [r["scene"] for r in rows] == ["bridge", "high_rise", "open_sky"]
    weighted = sum(r["mae"] * r["n"] for r in rows) / sum(r["n"] for r in rows)
    assert weighted == pytest.approx(report.mae, abs=1e-9)
    assert all(r["rmse"] >= r["mae"] for r in rows)


def test_single_scene_matches_overall(preds):
    one = preds.select([s == "bridge" for s in preds.scene])
    report = evaluate_predictions(one)
    assert len(report.per_scene) == 1
    assert report.per_scene[0]["mae"] == report.mae and report.per_scene[0]["rmse"] == report.rmse


def test_empty_scene_is_noted(preds):
    rows, notes = scene_eval(preds, scenes=["open_sky", "wooded"])
    assert [r["scene"] for r in rows] == ["open_sky"]
    assert notes and "wooded" in notes[0]


def test_uncertainty_summary_counts(preds):
    u = evaluate_predictions(preds).uncertainty
    assert u["n_certain"] + u["n_uncertain"] == len(preds)
    assert 0 < u["mean_u0"] < 1


def test_uncertainty_study_rows(windows):
    model = DiffGNSS(TINY, seed=1)
    rows = uncertainty_study(model, windows[:10], iterations=[1])
    assert len(rows) == 1 and rows[0]["iterations"] == 1
    rows = uncertainty_study(model, windows[:10], iterations=[1, 2, 5])
    assert [r["iterations"] for r in rows] == [1, 2, 5]
    with pytest.raises(ValueError, match="refiner"):
        uncertainty_study(DiffGNSS(ModelConfig(hidden=8, state_dim=4, head_hidden=8, diffusion=False)),
                          windows[:5], [1])


def test_plug_and_play_contracts(windows):
    tr, va, te = windows[::2], windows[1::4], windows[3::4]
    stats = compute_stats(tr)
    cfg = TrainConfig(lr0=3e-3, epochs=1, batch=8)
    bare, ck_bare = plug_and_play("lstm_polyu_style", False, tr, va, te, stats, cfg, TINY)
    again, _ = plug_and_play("lstm_polyu_style", False, tr, va, te, stats, cfg, TINY)
    assert json.dumps(bare.summary(), sort_keys=True) == json.dumps(again.summary(), sort_keys=True)
    assert bare.mae == bare.coarse_mae
    _, ck_full = plug_and_play("lstm_polyu_style", True, tr, va, te, stats, cfg, TINY)
    added = set(ck_full.params) - set(ck_bare.params)
    assert added and all(k.startswith("refiner.") for k in added)
    assert set(ck_bare.params) <= set(ck_full.params)


# ---------------------------------------------------------------- positioning

def test_oracle_corrections_reach_the_zero_error_baseline(sequences):
    block = position_compare(sequences, oracle_corrections(sequences))
    assert block.n_failed == 0
    assert block.n_epochs == sum(len(q) for q in sequences)
    # without any injected error the solver lands on the truth, so the baseline is ~0
    assert np.all(block.h_corrected <= 1e-3)
    assert block.mean_h_corrected <= block.mean_h_raw


def test_oracle_corrections_never_increase_residual_norm(sequences):
    block = position_compare(sequences, oracle_corrections(sequences))
    assert np.all(block.residual_norm_corrected <= block.residual_norm_raw + 1e-9)


def test_zero_corrections_change_nothing(sequences):
    block = position_compare(sequences, oracle_corrections(sequences, scale=0.0))
    np.testing.assert_array_equal(block.h_corrected, block.h_raw)
    assert block.enu_rmse_corrected == block.enu_rmse_raw


def test_exclusion_mode_drops_flagged_satellites(sequences):
    corr = oracle_corrections(sequences)
    unc = {k: {s: (1.0 if i == 0 else 0.0) for i, s in enumerate(v)} for k, v in corr.items()}
    block = position_compare(sequences, corr, unc, exclude_uncertain=True)
    assert block.excluded_satellites == len(corr)
    plain = position_compare(sequences, corr, unc, exclude_uncertain=False)
    assert plain.excluded_satellites == 0


def test_cdf_is_a_distribution(sequences):
    block = position_compare(sequences, oracle_corrections(sequences, scale=0.5))
    table = cdf_table(block)
    err = [r[0] for r in table]
    assert err == sorted(err)
    for col in (1, 2):
        vals = [r[col] for r in table]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert 0 <= vals[0] and vals[-1] == 1.0
    assert empirical_cdf(block.h_raw, [np.inf])[0] == 1.0


def test_no_evaluable_epoch():
    with pytest.raises(ValueError, match="no epoch"):
        position_compare([], {})


# ---------------------------------------------------------------- export

def test_export_is_deterministic_and_parses(preds, sequences, tmp_path):
    report = evaluate_predictions(preds)
    report.positioning = position_compare(sequences, preds.lookup("fine"))
    files = export_report(report, tmp_path / "a")
    export_report(report, tmp_path / "b")
    assert sorted(p.name for p in files) == ["cdf.csv", "metrics.csv", "per_scene.csv", "summary.json",
                                              "traces.csv"]
    for p in files:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["mae_m"] == report.mae
    assert summary["positioning"]["n_epochs"] == report.positioning.n_epochs
    rows = (tmp_path / "a" / "cdf.csv").read_text().splitlines()[1:]
    errs = [float(r.split(",")[0]) for r in rows]
    assert errs == sorted(errs)


def test_lookup_keys(preds):
    table = preds.lookup("u0")
    key = (preds.seq_id[0], float(preds.epoch_time[0]))
    assert table[key][preds.sat_id[0]] == float(preds.u0[0])


def test_empty_predictions_select():
    p = Predictions([], np.zeros(0), [], [], *[np.zeros(0)] * 5)
    assert len(p) == 0 and not p.labelled.any()
