"""Toy-scale threshold and depth networks expressed as ToyGraphs."""

from __future__ import annotations

import math

import numpy as np

from ..core import derive_rng
from ..refinement import delta_kernel
from .engine import Node, ToyGraph

# Depth head: d = DEPTH_SCALE * softplus(z), keeping d > 0 while starting near 7 m.
DEPTH_SCALE = 10.0
# ThresNet reads disparity divided by this constant.
DISP_NORM = 50.0


class GraphBuilder:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.inputs: list[str] = []
        self._rng = derive_rng(seed, "init")
        self._count = 0

    def input(self, name: str) -> str:
        self.inputs.append(name)
        return name

    def param(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        return name

    def glorot(self, shape, fan_in: int, fan_out: int) -> np.ndarray:
        r = math.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(-r, r, size=shape)

    def op(self, op: str, *inputs: str, name: str | None = None, **attrs) -> str:
        if name is None:
            self._count += 1
            name = f"{op}_{self._count}"
        self.nodes.append(Node(name, op, tuple(inputs), attrs))
        return name

    def conv(self, x: str, cin: int, cout: int, prefix: str, relu: bool = True) -> str:
        w = self.param(f"{prefix}.w", self.glorot((cout, cin, 3, 3), cin * 9, cout * 9))
        b = self.param(f"{prefix}.b", np.zeros(cout))
        h = self.op("conv2d", x, w, b, name=f"{prefix}.conv" if relu else prefix)
        return self.op("relu", h, name=prefix) if relu else h

    def affine(self, x: str, cin: int, cout: int, prefix: str, bias: float = 0.0) -> str:
        w = self.param(f"{prefix}.w", self.glorot((cout, cin), cin, cout))
        b = self.param(f"{prefix}.b", np.full(cout, bias))
        return self.op("affine", x, w, b, name=prefix)

    def build(self) -> ToyGraph:
        return ToyGraph(list(self.nodes), dict(self.params), tuple(self.inputs), self.seed)


def build_thresnet(seed: int = 0, in_channels: int = 2, width: int = 8, conf_layers: int = 2,
                   epsilon: float = 10.0) -> ToyGraph:
    """Confidence head plus threshold head.

    Inputs ``x`` (N, in_channels, H, W), and for training ``label`` / ``label_mask``
    (N, 1, H, W). Nodes: ``conf`` (N,1,H,W), ``tau`` (N,1), ``cT``, ``loss_T``.
    The threshold head is four 3x3 conv layers (with 2x average pooling after
    the first two), global average pooling, one affine layer and a sigmoid.
    """
    b = GraphBuilder(seed)
    x = b.input("x")
    b.input("label")
    b.input("label_mask")

    h, cin = x, in_channels
    for i in range(conf_layers):
        h = b.conv(h, cin, width, f"conf{i}")
        cin = width
    c = b.op("sigmoid", b.affine(h, width, 1, "conf_out"), name="conf")

    # full, half, quarter, quarter resolution
    h = b.conv(x, in_channels, width, "thr0")
    h = b.conv(b.op("avg_pool2x", h, name="thr_down1"), width, width, "thr1")
    h = b.conv(b.op("avg_pool2x", h, name="thr_down2"), width, width, "thr2")
    h = b.conv(h, width, width, "thr3")
    pooled = b.op("global_avg_pool", h, name="thr_pool")
    tau = b.op("sigmoid", b.affine(pooled, width, 1, "thr_out"), name="tau")

    ct = b.op("soft_threshold", c, tau, name="cT", epsilon=epsilon)
    b.op("bce", ct, "label", "label_mask", name="loss_T")
    return b.build()


def build_depthnet(seed: int = 0, in_channels: int = 1, widths=(8, 16, 16), lam: float = 1e-3,
                   refine: bool = True, k: float = 1.0, pac_window: int = 3,
                   pac_init: str = "box") -> ToyGraph:
    """3-level encoder-decoder with depth and log-sigma heads and optional PAC refinement.

    Inputs: ``image`` (N, C, H, W), ``pgt``, ``ct``, ``mask`` (N, 1, H, W) and,
    with refinement, ``guide_mix`` (8, sum of encoder channels). Outputs ``d``,
    ``s``; with refinement also ``d_prime`` and ``d_f``. ``loss_L`` is
    L_D + lam * L_U on ``d``; ``loss`` adds L_D on ``d_f`` when refining.
    Encoder features ``enc1``..``enc4`` feed the guidance.
    """
    w1, w2, w3 = widths
    b = GraphBuilder(seed)
    img = b.input("image")
    for name in ("pgt", "ct", "mask"):
        b.input(name)

    e1 = b.conv(b.conv(img, in_channels, w1, "enc1a"), w1, w1, "enc1")
    e2 = b.conv(b.op("avg_pool2x", e1, name="pool1"), w1, w2, "enc2")
    e3 = b.conv(b.op("avg_pool2x", e2, name="pool2"), w2, w3, "enc3")
    e4 = b.conv(e3, w3, w3, "enc4")

    u2 = b.op("upsample2x", e4, name="up2")
    d2 = b.conv(b.op("concat", u2, e2, name="cat2"), w3 + w2, w2, "dec2")
    u1 = b.op("upsample2x", d2, name="up1")
    d1 = b.conv(b.op("concat", u1, e1, name="cat1"), w2 + w1, w1, "dec1")

    zd = b.conv(d1, w1, 1, "head_d", relu=False)
    d = b.op("scale", b.op("softplus", zd, name="d_sp"), name="d", factor=DEPTH_SCALE)
    s = b.conv(d1, w1, 1, "s", relu=False)

    ld = b.op("depth_regression_loss", d, "pgt", "ct", "mask", name="L_D")
    lu = b.op("uncertainty_nll", d, "pgt", s, "mask", name="L_U")
    loss_l = b.op("add", ld, b.op("scale", lu, name="lam_L_U", factor=lam), name="loss_L")

    if not refine:
        b.op("scale", loss_l, name="loss", factor=1.0)
        return b.build()

    b.input("guide_mix")
    kern = b.op("guidance_kernels", e1, e2, e3, e4, "guide_mix", name="pac_kernels", window=pac_window)
    if pac_init == "box":
        w0 = np.full((pac_window, pac_window), 1.0 / pac_window ** 2)
    elif pac_init == "delta":
        w0 = delta_kernel(pac_window)
    else:
        raise ValueError(f"unknown pac_init {pac_init!r}")
    pw = b.param("pac.w", w0)
    pb = b.param("pac.b", np.zeros(1))
    dp = b.op("pac", d, kern, pw, pb, name="d_prime")
    df = b.op("residual_blend", d, dp, s, name="d_f", k=k)
    ldf = b.op("depth_regression_loss", df, "pgt", "ct", "mask", name="L_D_refined")
    b.op("add", loss_l, ldf, name="loss")
    return b.build()


GUIDE_CHANNELS = 8


def guide_mix(widths=(8, 16, 16), seed: int = 0, out_channels: int = GUIDE_CHANNELS) -> np.ndarray:
    """Fixed (untrained) 1x1 fusion matrix for the four encoder levels."""
    total = widths[0] + widths[1] + 2 * widths[2]
    r = math.sqrt(6.0 / (total + out_channels))
    return derive_rng(seed, "guide_mix").uniform(-r, r, size=(out_channels, total))
