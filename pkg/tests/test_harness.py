import json

import numpy as np
import pytest

from adathresh.core import depth_to_disparity
from adathresh.harness.synth import MAX_DEPTH, MIN_DEPTH, corruption_masks, synth_scene
from adathresh.harness.train import (
    RunConfig, fit_oracle_refinement, make_scenes, predict_confidence, thresholded_confidence, train_depthnet,
    train_thresnet, train_toy,
)
from adathresh.metrics import metrics_from_csv
from adathresh.thresholding import gt_confidence


def test_synth_deterministic():
    a = synth_scene(11, (32, 64), 0.6)
    b = synth_scene(11, (32, 64), 0.6)
    assert np.array_equal(a.image.values, b.image.values)
    assert np.array_equal(a.pseudo.values, b.pseudo.values)
    c = synth_scene(12, (32, 64), 0.6)
    assert not np.array_equal(a.gt.values, c.gt.values)


def test_zero_noise_gives_clean_labels():
    sc = synth_scene(3, (32, 64), 0.0)
    assert np.array_equal(sc.pseudo.values, sc.gt.values)


def test_synth_ranges():
    for seed in range(100):
        sc = synth_scene(seed, (16, 32), 1.0)
        for m in (sc.gt, sc.pseudo):
            assert m.values.min() >= MIN_DEPTH and m.values.max() <= MAX_DEPTH
        assert sc.image.values.min() >= 0 and sc.image.values.max() <= 1


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_scene(0, (8, 64))
    with pytest.raises(ValueError):
        synth_scene(0, (32, 64), 1.5)


def _bad_fraction(seed, level):
    sc = synth_scene(seed, (32, 64), level)
    lab = gt_confidence(depth_to_disparity(sc.pseudo), depth_to_disparity(sc.gt))
    return 1.0 - lab.values.mean()


def test_bad_fraction_grows_with_noise():
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    for seed in range(20):
        fr = [_bad_fraction(seed, lvl) for lvl in levels]
        assert fr[0] == 0.0
        assert all(b >= a for a, b in zip(fr, fr[1:])), (seed, fr)
    mean_top = np.mean([_bad_fraction(s, 1.0) for s in range(20)])
    assert mean_top > 0.05


def test_labels_match_injected_corruption():
    for seed in range(20):
        sc = synth_scene(seed, (32, 64), 0.8)
        _, masks = corruption_masks(sc.gt, 0.8, seed)
        lab = gt_confidence(depth_to_disparity(sc.pseudo), depth_to_disparity(sc.gt)).values
        touched = masks["blur"] | masks["band"] | masks["outlier"]
        # every bad pixel was corrupted; bands and outliers are always bad.
        # blur may or may not cross the tolerance.
        assert np.all(touched[lab == 0])
        assert np.all(lab[masks["band"] | masks["outlier"]] == 0)


def test_corruption_masks_nest_across_levels():
    sc = synth_scene(5, (32, 64), 0.0)
    prev = None
    for lvl in (0.2, 0.5, 1.0):
        _, m = corruption_masks(sc.gt, lvl, 5)
        cur = m["band"] | m["outlier"]
        if prev is not None:
            assert np.all(cur[prev])
        prev = cur


# --- config ---------------------------------------------------------------------------


def test_config_defaults_traceable():
    c = RunConfig()
    assert (c.epsilon, c.lam, c.k, c.rho, c.lr) == (10.0, 1e-3, 1.0, 3.0, 1e-4)
    assert (c.height, c.width, c.batch) == (32, 64, 4)
    assert c.steps_thres <= 2000 and c.steps_depth <= 2000


def test_config_from_json_and_keyvalue(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "refine": False, "lam": 0.0}))
    c = RunConfig.from_file(p)
    assert (c.seed, c.refine, c.lam) == (4, False, 0.0)
    q = tmp_path / "c.txt"
    q.write_text("# toy\nseed = 7\nthreshold_mode=hard_fixed  # ablation\nrefine=no\nout_dir=none\n")
    c = RunConfig.from_file(q)
    assert (c.seed, c.threshold_mode, c.refine, c.out_dir) == (7, "hard_fixed", False, None)


@pytest.mark.parametrize("data,match", [
    ({"bogus": 1}, "unknown"),
    ({"threshold_mode": "median"}, "threshold_mode"),
    ({"optimizer": "lbfgs"}, "optimizer"),
    ({"height": 30}, "divisible"),
    ({"epsilon": "0"}, "epsilon"),
    ({"steps_depth": 2001}, "2000"),
    ({"lam": -1.0}, "lam"),
    ({"refine": "maybe"}, "boolean"),
    ({"noise_min": 0.8, "noise_max": 0.2}, "noise"),
])
def test_config_errors(data, match):
    with pytest.raises(ValueError, match=match):
        RunConfig.from_mapping(data)


def test_config_line_without_equals(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("seed 3\n")
    with pytest.raises(ValueError, match="without"):
        RunConfig.from_file(p)


# --- training -------------------------------------------------------------------------


def _tiny(**kw):
    base = dict(height=16, width=16, n_train=6, n_eval=2, n_sweep=4, steps_thres=5,
                steps_depth=5, batch=2, bins=10)
    base.update(kw)
    return RunConfig(**base)


def test_scene_batch_shapes_and_determinism():
    cfg = _tiny()
    a = make_scenes(cfg, "train", 3)
    b = make_scenes(cfg, "train", 3)
    assert a.image.shape == (3, 1, 16, 16) and a.thres_input.shape == (3, 2, 16, 16)
    assert np.array_equal(a.pseudo, b.pseudo)
    e = make_scenes(cfg, "eval", 3)
    assert not np.array_equal(a.gt, e.gt)
    assert len(a.take([0, 2])) == 2


def test_threshold_modes():
    cfg = _tiny(hard_tau=0.5)
    data = make_scenes(cfg, "train", 2)
    conf = np.full((2, 1, 16, 16), 0.4)
    tau = np.array([[0.4], [0.3]])
    soft = thresholded_confidence("soft", conf, tau, data, cfg)
    assert soft[0].max() == pytest.approx(0.5) and np.all(soft[1] > 0.5)
    assert np.all(thresholded_confidence("hard_fixed", conf, tau, data, cfg) == 0)
    assert np.all(thresholded_confidence("hard_learned", conf, tau, data, cfg) == 1)
    assert np.all(thresholded_confidence("none", conf, tau, data, cfg) == 1)
    assert np.array_equal(thresholded_confidence("oracle", conf, tau, data, cfg), data.label)


def test_divergence_guard():
    cfg = _tiny(thres_lr=1e6, steps_thres=50)
    data = make_scenes(cfg, "train", cfg.n_train)
    with pytest.raises(FloatingPointError):
        train_thresnet(cfg, data)


def test_depth_loss_decreases_without_refinement():
    cfg = _tiny(lam=0.0, refine=False, steps_depth=60, n_train=8)
    data = make_scenes(cfg, "train", cfg.n_train)
    ct = np.ones_like(data.pseudo)
    _, _, hist = train_depthnet(cfg, data, ct)
    assert np.mean(hist[-10:]) < np.mean(hist[:10])


def test_all_zero_confidence_rejected():
    cfg = _tiny()
    data = make_scenes(cfg, "train", cfg.n_train)
    with pytest.raises(ValueError, match="removed every"):
        train_depthnet(cfg, data, np.zeros_like(data.pseudo))


def test_oracle_refinement_only_moves_the_pac_head():
    cfg = _tiny(refine=False, steps_depth=20)
    data = make_scenes(cfg, "train", cfg.n_train)
    ct = np.ones_like(data.pseudo)
    net, mix, _ = train_depthnet(cfg, data, ct)
    head = fit_oracle_refinement(cfg, net, mix, data, ct)
    for name, value in net.params.items():
        assert np.array_equal(head.params[name], value), name
    assert not np.array_equal(head.params["pac.b"], np.zeros(1))


def test_thresnet_tau_in_open_interval():
    cfg = _tiny(steps_thres=10)
    data = make_scenes(cfg, "train", cfg.n_train)
    net, hist = train_thresnet(cfg, data)
    _, tau = predict_confidence(net, data)
    assert np.all((tau > 0) & (tau < 1)) and len(hist) == 10


def test_end_to_end_deterministic_with_artifacts(tmp_path):
    runs = [train_toy(_tiny(out_dir=str(tmp_path / f"r{i}"))) for i in range(2)]
    a, b = (tmp_path / "r0", tmp_path / "r1")
    for name in ("thresnet.ckpt", "depthnet.ckpt", "eval_metrics.csv", "curves.json"):
        assert (a / name).is_file()
    assert (a / "eval_metrics.csv").read_text() == (b / "eval_metrics.csv").read_text()
    assert (a / "depthnet.ckpt").read_bytes() == (b / "depthnet.ckpt").read_bytes()
    rows = metrics_from_csv((a / "eval_metrics.csv").read_text())
    assert len(rows) == 2 and rows == runs[0].eval_reports
    doc = json.loads((a / "curves.json").read_text())
    assert len(doc["thres_loss"]) == 5 and len(doc["tau_sweep"]["tau"]) == 4
    assert set(doc["extras"]["sparsification"]) == {"abs_rel", "rmse", "delta_complement"}
    assert "rmse_oracle_refined" in doc["extras"]


def test_stage_one_only():
    run = train_toy(_tiny(steps_depth=0))
    assert run.depth is None and run.eval_reports == []
    assert -1 <= run.tau_spearman <= 1
