"""Command-line entry point: ``adathresh <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..core import (ConfidenceMap, DepthMap, Grid2, depth_to_disparity, pfm_read, pfm_write,
                    read_depth_file, write_depth_file)
from ..losses import UncertaintyMap
from ..metrics import (confidence_roc_auc, curves_to_json, depth_metrics, median_scale,
                       metrics_to_csv, optimal_auc, uncertainty_sparsification)
from ..thresholding import (GtConfidenceParams, ThresholdParams, gt_confidence, hard_threshold,
                            soft_threshold)
from .synth import synth_scene
from .train import RunConfig, train_toy


def _read_grid(path) -> Grid2:
    return pfm_read(Path(path).read_bytes())


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_threshold(a) -> int:
    conf = ConfidenceMap(_read_grid(a.conf))
    if a.mode == "soft":
        out = soft_threshold(conf, ThresholdParams(a.tau, a.epsilon))
    else:
        out = hard_threshold(conf, a.tau)
    Path(a.out).write_bytes(pfm_write(out.grid))
    return 0


def cmd_eval_depth(a) -> int:
    pred = read_depth_file(a.pred)
    gt = read_depth_file(a.gt)
    ratio = None
    if a.median_scale:
        pred, ratio = median_scale(pred, gt)
        logging.info("median scale ratio %.6g", ratio)
    report = depth_metrics(pred, gt, a.cap)
    _emit(metrics_to_csv([report], [Path(a.pred).stem], header=not a.no_header), a.out)
    return 0


def cmd_eval_conf(a) -> int:
    conf = ConfidenceMap(_read_grid(a.conf))
    disp = read_depth_file(a.disp, "disparity")
    gt = read_depth_file(a.gt, "disparity")
    curve, auc = confidence_roc_auc(conf, disp, gt, a.rho, a.bins)
    bad = np.abs(disp.values - gt.values) > a.rho
    valid = disp.valid & gt.valid & conf.valid
    zeta = float(bad[valid].mean())
    _emit(curves_to_json(roc=curve, auc=auc, bad_rate=zeta, optimal_auc=optimal_auc(zeta)) + "\n",
          a.out)
    return 0


def cmd_sparsify(a) -> int:
    sigma = _read_grid(a.unc).values
    unc = UncertaintyMap(Grid2(sigma)) if a.log_sigma else UncertaintyMap.from_sigma(sigma)
    pred = read_depth_file(a.pred)
    gt = read_depth_file(a.gt)
    est, ora, ause, aurg = uncertainty_sparsification(unc, pred, gt, a.metric, a.bins)
    _emit(curves_to_json(metric=a.metric, estimated=est, oracle=ora, ause=ause, aurg=aurg) + "\n",
          a.out)
    return 0


def cmd_synth(a) -> int:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = synth_scene(a.seed, (a.height, a.width), a.noise)
    (out / "image.pfm").write_bytes(pfm_write(Grid2(sc.image.values[:, :, 0])))
    write_depth_file(out / f"gt.{a.format}", sc.gt)
    write_depth_file(out / f"pseudo.{a.format}", sc.pseudo)
    label = gt_confidence(depth_to_disparity(sc.pseudo), depth_to_disparity(sc.gt),
                          GtConfidenceParams(a.rho))
    (out / "conf_gt.pfm").write_bytes(pfm_write(label.grid))
    return 0


def _parse_overrides(pairs) -> dict:
    data = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = value.strip()
    return data


def cmd_train_toy(a) -> int:
    base = asdict(RunConfig.from_file(a.config)) if a.config else {}
    base.update(_parse_overrides(a.set))
    if a.out_dir:
        base["out_dir"] = a.out_dir
    cfg = RunConfig.from_mapping(base)
    run = train_toy(cfg)
    summary = {"tau_spearman": run.tau_spearman,
               "rmse": run.rmse if run.eval_reports else None,
               "out_dir": cfg.out_dir}
    sys.stdout.write(json.dumps(summary) + "\n")
    return 0


def cmd_grad_check(a) -> int:
    from ..autodiff.engine import forward_eval, grad_check
    from ..autodiff.nets import build_depthnet, build_thresnet, guide_mix

    rng = np.random.default_rng(a.seed)
    h, w = a.height, a.width
    if a.net == "thresnet":
        g = build_thresnet(a.seed)
        inputs = {"x": rng.uniform(size=(2, 2, h, w)),
                  "label": (rng.uniform(size=(2, 1, h, w)) < 0.7).astype(float),
                  "label_mask": np.ones((2, 1, h, w))}
        loss = "loss_T"
    else:
        g = build_depthnet(a.seed)
        inputs = {"image": rng.uniform(size=(2, 1, h, w)),
                  "pgt": rng.uniform(2, 40, size=(2, 1, h, w)),
                  "ct": rng.uniform(0.05, 1, size=(2, 1, h, w)),
                  "mask": np.ones((2, 1, h, w)),
                  "guide_mix": guide_mix(seed=a.seed)}
        # guidance is a stop-gradient constant, so hold it fixed while perturbing
        inputs["pac_kernels"] = forward_eval(g, inputs, ["pac_kernels"])["pac_kernels"]
        loss = "loss"
    err = grad_check(g, inputs, loss, samples=a.samples, seed=a.seed)
    ok = err <= a.tol
    sys.stdout.write(json.dumps({"net": a.net, "max_rel_error": err, "tol": a.tol, "pass": ok}) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adathresh", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("threshold", help="soft or hard threshold a confidence map")
    s.add_argument("--conf", required=True, help="confidence PFM, values in [0, 1]")
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--mode", choices=("soft", "hard"), default="soft")
    s.add_argument("--epsilon", type=float, default=10.0)
    s.add_argument("--out", required=True, help="output PFM")
    s.set_defaults(func=cmd_threshold)

    s = sub.add_parser("eval-depth", help="depth metrics of a prediction against GT")
    s.add_argument("--pred", required=True, help="depth map (.pfm or 16-bit .png)")
    s.add_argument("--gt", required=True)
    s.add_argument("--cap", type=float, default=80.0)
    s.add_argument("--median-scale", action="store_true")
    s.add_argument("--no-header", action="store_true")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("eval-conf", help="confidence ROC curve and AUC")
    s.add_argument("--conf", required=True)
    s.add_argument("--disp", required=True, help="disparity map being scored")
    s.add_argument("--gt", required=True, help="GT disparity")
    s.add_argument("--rho", type=float, default=3.0)
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--out", help="JSON path (default stdout)")
    s.set_defaults(func=cmd_eval_conf)

    s = sub.add_parser("sparsify", help="uncertainty sparsification curves, AUSE and AURG")
    s.add_argument("--unc", required=True, help="sigma map PFM (positive)")
    s.add_argument("--log-sigma", action="store_true", help="the map holds log sigma")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metric", choices=("abs_rel", "rmse", "delta_complement"), default="rmse")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--out", help="JSON path (default stdout)")
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("synth", help="write one synthetic scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--rho", type=float, default=3.0)
    s.add_argument("--format", choices=("pfm", "png"), default="pfm")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-toy", help="two-stage toy training run")
    s.add_argument("--config", help="JSON or key=value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("grad-check", help="finite-difference check of a toy network")
    s.add_argument("--net", choices=("thresnet", "depthnet"), default="thresnet")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=8)
    s.add_argument("--width", type=int, default=8)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"adathresh {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
