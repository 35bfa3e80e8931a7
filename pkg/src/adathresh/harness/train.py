"""End-to-end toy training: ThresNet on L_T, then DepthNet(+RefineNet) on pseudo labels."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..autodiff import checkpoint
from ..autodiff.engine import Adam, ToyGraph, backward_grads, forward_eval, sgd_step
from ..autodiff.nets import DISP_NORM, build_depthnet, build_thresnet, guide_mix
from ..core import FOCAL_BASELINE, DepthMap, Grid2, depth_to_disparity, derive_rng
from ..losses import UncertaintyMap
from ..metrics import (DepthMetricReport, curves_to_json, depth_metrics, metrics_to_csv,
                       uncertainty_sparsification)
from ..thresholding import GtConfidenceParams, gt_confidence, soft_threshold_array
from .synth import synth_scene

log = logging.getLogger(__name__)

THRESHOLD_MODES = ("soft", "hard_fixed", "hard_learned", "none", "oracle")


@dataclass
class RunConfig:
    seed: int = 0
    height: int = 32
    width: int = 64
    n_train: int = 200
    n_eval: int = 20
    n_sweep: int = 20
    noise_min: float = 0.0
    noise_max: float = 1.0
    epsilon: float = 10.0
    lam: float = 1e-3
    k: float = 1.0
    rho: float = 3.0
    lr: float = 1e-4
    optimizer: str = "adam"
    thres_lr: float = 3e-3
    depth_lr: float = 3e-3
    steps_thres: int = 1500
    steps_depth: int = 600
    batch: int = 4
    bins: int = 50
    threshold_mode: str = "soft"
    hard_tau: float = 0.3
    refine: bool = True
    pac_init: str = "delta"
    gt_density: float = 1.0
    out_dir: str | None = None

    def __post_init__(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.height < 16 or self.width < 16 or self.height % 4 or self.width % 4:
            raise ValueError("image dims must be >= 16 and divisible by 4")
        if not 0 <= self.noise_min <= self.noise_max <= 1:
            raise ValueError("noise range must satisfy 0 <= min <= max <= 1")
        for name in ("epsilon", "k", "rho", "lr", "thres_lr", "depth_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not (0 <= self.steps_thres <= 2000 and 0 <= self.steps_depth <= 2000):
            raise ValueError("step counts must be non-negative and at most 2000 per stage")
        if self.batch < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ValueError("batch, n_train and n_eval must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, raw in data.items():
            default = getattr(cls(), key)
            kw[key] = _coerce(raw, default)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Read JSON, or flat ``key=value`` lines (``#`` comments allowed)."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        data = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key] = value
        return cls.from_mapping(data)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None and raw.lower() in ("", "none", "null"):
        return None
    return raw


# --- data --------------------------------------------------------------------------


@dataclass
class SceneBatch:
    """Stacked per-scene arrays, all (N, 1, H, W) unless noted."""

    image: np.ndarray
    gt: np.ndarray
    pseudo: np.ndarray
    label: np.ndarray
    label_mask: np.ndarray
    noise: np.ndarray  # (N,)

    @property
    def thres_input(self) -> np.ndarray:
        return np.concatenate([FOCAL_BASELINE / self.pseudo / DISP_NORM, self.image], axis=1)

    def take(self, idx) -> "SceneBatch":
        return SceneBatch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def __len__(self):
        return self.image.shape[0]


def make_scenes(cfg: RunConfig, split: str, n: int, noise_levels=None) -> SceneBatch:
    rng = derive_rng(cfg.seed, "split", split)
    if noise_levels is None:
        noise_levels = rng.uniform(cfg.noise_min, cfg.noise_max, size=n)
    split_id = {"train": 1, "eval": 2, "sweep": 3}.get(split, 9)
    rows = []
    gtp = GtConfidenceParams(cfg.rho)
    for i, lvl in enumerate(noise_levels):
        scene_seed = int(derive_rng(cfg.seed, "scene-seed", split_id, i).integers(2 ** 31))
        sc = synth_scene(scene_seed, (cfg.height, cfg.width), float(lvl))
        lab = gt_confidence(depth_to_disparity(sc.pseudo), depth_to_disparity(sc.gt), gtp)
        mask = lab.valid.copy()
        if cfg.gt_density < 1.0:
            mask &= derive_rng(scene_seed, "lidar").uniform(size=mask.shape) < cfg.gt_density
        rows.append((sc.image.values[:, :, 0], sc.gt.values, sc.pseudo.values, lab.values, mask,
                     sc.noise_level))
    stack = lambda j: np.stack([r[j] for r in rows])[:, None].astype(np.float64)  # noqa: E731
    return SceneBatch(stack(0), stack(1), stack(2), stack(3), stack(4),
                      np.array([r[5] for r in rows]))


# --- optimisation loop ----------------------------------------------------------------


def _check_finite(value: float, stage: str, step: int):
    if not math.isfinite(value):
        raise FloatingPointError(f"{stage}: loss became {value} at step {step}; aborting")


def _optimise(graph: ToyGraph, feed, loss_node: str, steps: int, lr: float, cfg: RunConfig,
              stage: str, n_items: int, monitor=None):
    """Mini-batch descent with a fixed, seeded batch order. Returns (params, loss history)."""
    rng = derive_rng(cfg.seed, "batches", stage)
    opt = Adam(lr) if cfg.optimizer == "adam" else None
    params = graph.params
    history = []
    for step in range(steps):
        idx = rng.choice(n_items, size=min(cfg.batch, n_items), replace=False)
        inputs = feed(idx, graph.with_params(params))
        g = graph.with_params(params)
        values = forward_eval(g, inputs, outputs=[loss_node])
        loss = float(values[loss_node])
        _check_finite(loss, stage, step)
        history.append(loss)
        grads = backward_grads(g, inputs, loss_node, values=values)
        params = opt.step(params, grads) if opt is not None else sgd_step(params, grads, lr)
        if monitor is not None:
            monitor(values)
    return params, history


def train_thresnet(cfg: RunConfig, data: SceneBatch):
    graph = build_thresnet(seed=int(derive_rng(cfg.seed, "thresnet").integers(2 ** 31)),
                           epsilon=cfg.epsilon)
    x = data.thres_input

    def feed(idx, _g):
        return {"x": x[idx], "label": data.label[idx], "label_mask": data.label_mask[idx]}

    def monitor(values):
        tau = values["tau"]
        if not np.all((tau > 0) & (tau < 1)):
            raise FloatingPointError("tau left (0, 1)")

    lr = cfg.thres_lr if cfg.optimizer == "adam" else cfg.lr
    params, hist = _optimise(graph, feed, "loss_T", cfg.steps_thres, lr, cfg, "thres", len(data),
                             monitor)
    return graph.with_params(params), hist


def predict_confidence(thres: ToyGraph, data: SceneBatch, chunk: int = 32):
    """Frozen ThresNet outputs: (conf (N,1,H,W), tau (N,1))."""
    confs, taus = [], []
    x = data.thres_input
    for s in range(0, len(data), chunk):
        out = forward_eval(thres, {"x": x[s:s + chunk]}, outputs=["conf", "tau"])
        confs.append(out["conf"])
        taus.append(out["tau"])
    return np.concatenate(confs), np.concatenate(taus)


def thresholded_confidence(mode: str, conf, tau, data: SceneBatch, cfg: RunConfig) -> np.ndarray:
    if mode == "soft":
        return soft_threshold_array(conf, tau[:, :, None, None], cfg.epsilon)
    if mode == "hard_fixed":
        return (conf >= cfg.hard_tau).astype(np.float64)
    if mode == "hard_learned":
        return (conf >= tau[:, :, None, None]).astype(np.float64)
    if mode == "none":
        return np.ones_like(conf)
    if mode == "oracle":
        return data.label.copy()
    raise ValueError(f"unknown threshold mode {mode!r}")


def train_depthnet(cfg: RunConfig, data: SceneBatch, ct: np.ndarray):
    widths = (8, 16, 16)
    graph = build_depthnet(seed=int(derive_rng(cfg.seed, "depthnet").integers(2 ** 31)),
                           widths=widths, lam=cfg.lam, refine=cfg.refine, k=cfg.k,
                           pac_init=cfg.pac_init)
    mix = guide_mix(widths, seed=cfg.seed)
    mask = np.ones_like(data.pseudo)
    # images without any confidence mass carry no supervision under a hard mask
    usable = np.nonzero(ct.reshape(len(data), -1).sum(axis=1) > 1e-6)[0]
    if usable.size == 0:
        raise ValueError("thresholded confidence removed every training image")

    def feed(idx, _g):
        sel = usable[idx]
        inputs = {"image": data.image[sel], "pgt": data.pseudo[sel], "ct": ct[sel],
                  "mask": mask[sel]}
        if cfg.refine:
            inputs["guide_mix"] = mix
        return inputs

    def monitor(values):
        if np.any(values["d"] <= 0):
            raise FloatingPointError("depth head produced a non-positive depth")

    lr = cfg.depth_lr if cfg.optimizer == "adam" else cfg.lr
    params, hist = _optimise(graph, feed, "loss", cfg.steps_depth, lr, cfg, "depth", usable.size,
                             monitor)
    return graph.with_params(params), mix, hist


def fit_oracle_refinement(cfg: RunConfig, depth_net: ToyGraph, mix, data: SceneBatch,
                          ct: np.ndarray, chunk: int = 32) -> ToyGraph:
    """Train a fresh PAC head on top of a frozen depth net, gated by the true error.

    Depth, guidance kernels and sigma = |d - gt| are fixed, so only the PAC weights
    and bias learn, still against the thresholded pseudo labels.
    """
    widths = (depth_net.params["enc1a.w"].shape[0], depth_net.params["enc2.w"].shape[0],
              depth_net.params["enc3.w"].shape[0])
    graph = build_depthnet(seed=0, widths=widths, lam=0.0, refine=True, k=cfg.k,
                           pac_init=cfg.pac_init)
    frozen = {k: v for k, v in depth_net.params.items() if not k.startswith("pac.")}
    graph = graph.with_params({**graph.params, **frozen})
    ds, kerns = [], []
    for st in range(0, len(data), chunk):
        out = forward_eval(graph, {"image": data.image[st:st + chunk], "guide_mix": mix},
                           outputs=["d", "pac_kernels"])
        ds.append(out["d"])
        kerns.append(out["pac_kernels"])
    d, kern = np.concatenate(ds), np.concatenate(kerns)
    s = _oracle_log_sigma(d, data.gt)
    usable = np.nonzero(ct.reshape(len(data), -1).sum(axis=1) > 1e-6)[0]

    def feed(idx, _g):
        sel = usable[idx]
        return {"d": d[sel], "s": s[sel], "pac_kernels": kern[sel], "pgt": data.pseudo[sel],
                "ct": ct[sel], "mask": np.ones_like(d[sel])}

    lr = cfg.depth_lr if cfg.optimizer == "adam" else cfg.lr
    params, _ = _optimise(graph, feed, "L_D_refined", cfg.steps_depth, lr, cfg, "oracle-pac",
                          usable.size)
    return graph.with_params(params)


def _oracle_log_sigma(d, gt):
    return np.log(np.maximum(np.abs(d - gt), 1e-12))


def predict_depth(net: ToyGraph, mix, data: SceneBatch, refine: bool, oracle_unc: bool = False,
                  chunk: int = 32):
    """Return (d, s, d_final); d_final is the refined depth when ``refine``."""
    ds, ss, fs = [], [], []
    for st in range(0, len(data), chunk):
        img = data.image[st:st + chunk]
        inputs = {"image": img}
        out = forward_eval(net, inputs, outputs=["d", "s"])
        d, s = out["d"], out["s"]
        if refine:
            inputs = {"image": img, "guide_mix": mix}
            if oracle_unc:
                inputs["s"] = _oracle_log_sigma(d, data.gt[st:st + chunk])
                inputs["d"] = d
            out = forward_eval(net, inputs, outputs=["d_f"])
            fs.append(out["d_f"])
        else:
            fs.append(d)
        ds.append(d)
        ss.append(s)
    return np.concatenate(ds), np.concatenate(ss), np.concatenate(fs)


def evaluate(pred: np.ndarray, data: SceneBatch, cap: float = 80.0) -> list[DepthMetricReport]:
    reports = []
    for i in range(len(data)):
        p = pred[i, 0]
        pm = DepthMap(Grid2(np.where(p > 0, p, 1.0)), "depth", p > 0)
        reports.append(depth_metrics(pm, DepthMap(Grid2(data.gt[i, 0])), cap))
    return reports


def mean_report(reports: list[DepthMetricReport]) -> DepthMetricReport:
    arr = np.array([r.as_tuple() for r in reports])
    return DepthMetricReport(*arr.mean(axis=0).tolist())


def tau_sweep(cfg: RunConfig, thres: ToyGraph):
    """Learned tau on ``n_sweep`` fresh scenes with evenly spaced noise levels."""
    levels = np.linspace(cfg.noise_min, cfg.noise_max, cfg.n_sweep)
    sweep = make_scenes(cfg, "sweep", cfg.n_sweep, levels)
    _, tau = predict_confidence(thres, sweep)
    rho = spearmanr(levels, tau[:, 0]).statistic if np.ptp(tau) > 0 else 0.0
    return levels, tau[:, 0], float(rho)


@dataclass
class ToyRun:
    cfg: RunConfig
    thres: ToyGraph
    depth: ToyGraph | None
    thres_history: list[float]
    depth_history: list[float]
    eval_reports: list[DepthMetricReport]
    tau_levels: np.ndarray
    tau_values: np.ndarray
    tau_spearman: float
    extras: dict = field(default_factory=dict)

    @property
    def rmse(self) -> float:
        return mean_report(self.eval_reports).rmse


def train_toy(cfg: RunConfig, thres: ToyGraph | None = None, thres_history=None,
              train_data: SceneBatch | None = None, eval_data: SceneBatch | None = None) -> ToyRun:
    """Run both stages and the held-out evaluation; write artifacts if ``cfg.out_dir`` is set.

    A pre-trained ThresNet may be passed to share stage 1 across ablation runs.
    """
    train = train_data if train_data is not None else make_scenes(cfg, "train", cfg.n_train)
    held = eval_data if eval_data is not None else make_scenes(cfg, "eval", cfg.n_eval)
    if thres is None:
        thres, thres_history = train_thresnet(cfg, train)
    levels, taus, rho = tau_sweep(cfg, thres)
    log.info("stage 1 done: tau spearman %.3f", rho)

    depth_net, depth_hist, reports, extras = None, [], [], {}
    if cfg.steps_depth > 0:
        conf, tau = predict_confidence(thres, train)
        ct = thresholded_confidence(cfg.threshold_mode, conf, tau, train, cfg)
        depth_net, mix, depth_hist = train_depthnet(cfg, train, ct)
        d, s, d_final = predict_depth(depth_net, mix, held, cfg.refine)
        reports = evaluate(d_final, held)
        extras["rmse_unrefined"] = mean_report(evaluate(d, held)).rmse
        oracle_net = fit_oracle_refinement(cfg, depth_net, mix, train, ct)
        _, _, d_oracle = predict_depth(oracle_net, mix, held, True, oracle_unc=True)
        extras["rmse_oracle_refined"] = mean_report(evaluate(d_oracle, held)).rmse
        extras["sparsification"] = _sparsification(d, s, held, cfg.bins)
        extras["mix"] = mix

    run = ToyRun(cfg, thres, depth_net, list(thres_history or []), depth_hist, reports,
                 levels, taus, rho, extras)
    if cfg.out_dir:
        write_artifacts(run, Path(cfg.out_dir))
    return run


def _sparsification(d, s, data: SceneBatch, bins: int):
    out = {}
    for metric in ("abs_rel", "rmse", "delta_complement"):
        ause, aurg = [], []
        for i in range(len(data)):
            _, _, a, r = uncertainty_sparsification(
                UncertaintyMap(Grid2(s[i, 0])), DepthMap(Grid2(d[i, 0])),
                DepthMap(Grid2(data.gt[i, 0])), metric, bins)
            ause.append(a)
            aurg.append(r)
        out[metric] = {"ause": float(np.mean(ause)), "aurg": float(np.mean(aurg))}
    return out


def write_artifacts(run: ToyRun, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "thresnet.ckpt", run.thres.params)
    if run.depth is not None:
        checkpoint.save(out / "depthnet.ckpt", run.depth.params)
        ids = [f"eval_{i:03d}" for i in range(len(run.eval_reports))]
        (out / "eval_metrics.csv").write_text(metrics_to_csv(run.eval_reports, ids))
    cfg = asdict(run.cfg)
    extras = {k: v for k, v in run.extras.items() if k != "mix"}
    (out / "curves.json").write_text(curves_to_json(
        config=cfg,
        thres_loss=run.thres_history,
        depth_loss=run.depth_history,
        tau_sweep={"noise_level": run.tau_levels, "tau": run.tau_values,
                   "spearman": run.tau_spearman},
        extras=extras,
        mean_eval=mean_report(run.eval_reports) if run.eval_reports else None,
    ))
