"""Satellite branch: multi-level feature extraction and gated refinement.

The pyramid has five levels: r0 from a conv/maxpool stem interpolated to the
BEV grid, r1..r4 from residual stages at strides 4/8/16/32 of the patch.
Refinement walks top-down (r4 -> r0), at each level upsampling the running
feature, concatenating it with the pre-aligned lower level, and passing the
result through a gated block (or a plain conv in the ablation variant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("full", "gfr_star")


@dataclass(frozen=True)
class GatedCnnConfig:
    gamma: Fraction = Fraction(8, 3)   # expansion ratio
    alpha: Fraction = Fraction(1, 1)   # convolution ratio
    local_kernel: int = 3

    def channel_split(self, d: int) -> tuple[int, int, int]:
        """Exact (gate, global, local) widths for input width d."""
        g = self.gamma * d
        c = self.alpha * d
        i = (self.gamma - self.alpha) * d
        for name, v in (("g", g), ("i", i), ("c", c)):
            if v.denominator != 1 or v <= 0:
                raise ValueError(
                    f"gated channel arithmetic is not integral: {name}={v} "
                    f"for d={d}, gamma={self.gamma}, alpha={self.alpha}"
                )
        g, i, c = int(g), int(i), int(c)
        assert g == i + c
        return g, i, c

    def expanded_width(self, d: int) -> int:
        v = 2 * self.gamma * d
        if v.denominator != 1:
            raise ValueError(f"expanded width 2*gamma*d not integral for d={d}, gamma={self.gamma}")
        return int(v)


@dataclass(frozen=True)
class ChannelPlan:
    widths: tuple[int, int, int, int, int] = (12, 12, 24, 48, 96)  # d0..d4
    c_out: int = 24

    def __post_init__(self):
        if self.c_out <= 0:
            raise ValueError("ChannelPlan: C must be positive")
        for lo, hi in zip(self.widths[:-1], self.widths[1:]):
            if (lo + hi) % 3 != 0:
                raise ValueError(
                    f"ChannelPlan: concat width {lo}+{hi} not divisible by 3"
                )

    def concat_width(self, lower_level: int) -> int:
        return self.widths[lower_level] + self.widths[lower_level + 1]


@dataclass
class PyramidFeatures:
    r0: Tensor
    levels: list[Tensor]  # r1..r4

    def __post_init__(self):
        hs = [lv.shape[1] for lv in self.levels]
        if any(a <= b for a, b in zip(hs[:-1], hs[1:])):
            raise ValueError(f"PyramidFeatures: extents must shrink strictly, got {hs}")


def _kaiming_conv(rng, cout, cin, k):
    bound = np.sqrt(6.0 / (cin * k * k))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k))


def _kaiming_mat(rng, dout, din):
    bound = np.sqrt(6.0 / din)
    return rng.uniform(-bound, bound, size=(dout, din))


def _halving_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2 conv that halves even extents (asymmetric pad keeps the
    output arithmetic exact)."""
    k = w.shape[2]
    pad = k - 2  # total pad per axis for stride 2
    lead = (k - 1) // 2
    return T.conv2d(T.pad2d(x, lead, pad - lead, lead, pad - lead), w, b, stride=2, padding=0)


def init_sat_params(rng: np.random.Generator, plan: ChannelPlan, cfg: GatedCnnConfig,
                    variant: str = "full", refine: bool = True) -> dict[str, Tensor]:
    """Parameter tensors for the satellite branch, created in a fixed order.

    Gate expansion biases start at +0.5 so gates begin mostly open; all other
    biases start at zero.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown refinement variant {variant!r}")
    d = plan.widths
    p: dict[str, Tensor] = {}

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    add("sat.stem.w", _kaiming_conv(rng, d[0], 3, 7))
    add("sat.stem.b", np.zeros(d[0]))

    if refine:
        for lvl in range(1, 5):
            cin = d[lvl - 1] if lvl > 1 else d[0]
            add(f"sat.stage{lvl}.conv1.w", _kaiming_conv(rng, d[lvl], cin, 3))
            add(f"sat.stage{lvl}.conv1.b", np.zeros(d[lvl]))
            add(f"sat.stage{lvl}.conv2.w", _kaiming_conv(rng, d[lvl], d[lvl], 3))
            add(f"sat.stage{lvl}.conv2.b", np.zeros(d[lvl]))
            add(f"sat.stage{lvl}.skip.w", _kaiming_mat(rng, d[lvl], cin))
            add(f"sat.stage{lvl}.skip.b", np.zeros(d[lvl]))

        for lvl in range(4):  # pre-alignment convs, per level (r0..r3)
            add(f"sat.align{lvl}.w", _kaiming_conv(rng, d[lvl], d[lvl], 3))
            add(f"sat.align{lvl}.b", np.zeros(d[lvl]))

        for lvl in range(3, -1, -1):  # refinement steps keyed by the lower level
            dcat = plan.concat_width(lvl)
            if variant == "full":
                g, _i, c = cfg.channel_split(dcat)
                ex = cfg.expanded_width(dcat)
                add(f"sat.gfr{lvl}.expand.w", _kaiming_mat(rng, ex, dcat))
                eb = np.zeros(ex)
                eb[:g] = 0.5  # open gates at the start of training
                add(f"sat.gfr{lvl}.expand.b", eb)
                add(f"sat.gfr{lvl}.local.w", _kaiming_conv(rng, c, c, cfg.local_kernel))
                add(f"sat.gfr{lvl}.local.b", np.zeros(c))
                # the gate path is multiplicative, so a Kaiming back-projection
                # compounds quadratically across levels; start the residual
                # branch at zero and let it grow during training
                add(f"sat.gfr{lvl}.proj.w", np.zeros((dcat, g)))
                add(f"sat.gfr{lvl}.proj.b", np.zeros(dcat))
                add(f"sat.gfr{lvl}.out.w", _kaiming_mat(rng, d[lvl], dcat))
                add(f"sat.gfr{lvl}.out.b", np.zeros(d[lvl]))
            else:
                add(f"sat.gfr{lvl}.star.w", _kaiming_conv(rng, d[lvl], dcat, 3))
                add(f"sat.gfr{lvl}.star.b", np.zeros(d[lvl]))

    add("sat.out.w", _kaiming_mat(rng, plan.c_out, d[0]))
    add("sat.out.b", np.zeros(plan.c_out))
    return p


def _stage(x: Tensor, p: dict, name: str) -> Tensor:
    y = _halving_conv(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
    y = T.gelu(y)
    y = T.conv2d(y, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], stride=1, padding=1)
    skip = T.maxpool2d(T.channel_project(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"]), 1, 2)
    return T.gelu(T.add(y, skip))


def extract_pyramid(i_sat: Tensor, p: dict, plan: ChannelPlan, bev_hw: tuple[int, int],
                    with_stages: bool = True) -> PyramidFeatures:
    """Stem + four residual stages; r0 is the stem pooled and resized to the
    BEV grid."""
    _, h, w = i_sat.shape
    if h % 32 or w % 32:
        raise ValueError(f"extract_pyramid: patch extents {h}x{w} not divisible by 32")
    stem = _halving_conv(i_sat, p["sat.stem.w"], p["sat.stem.b"])
    r0 = T.bilinear_interp(T.maxpool2d(stem, 3, 2), bev_hw[0], bev_hw[1])
    levels = []
    if with_stages:
        x = T.gelu(stem)
        for lvl in range(1, 5):
            x = _stage(x, p, f"sat.stage{lvl}")
            levels.append(x)
    return PyramidFeatures(r0, levels)


def pre_align_conv(r: Tensor, p: dict, lvl: int) -> Tensor:
    """3x3 same-width conv that lets the network soak up small misalignments."""
    return T.conv2d(r, p[f"sat.align{lvl}.w"], p[f"sat.align{lvl}.b"], stride=1, padding=1)


def gated_cnn(x: Tensor, p: dict, name: str, cfg: GatedCnnConfig, d_next: int) -> Tensor:
    """Expand, split into (gate, global, local), modulate, project back with a
    residual, then a final 1x1 conv to d_next channels."""
    d = x.shape[0]
    g, i, c = cfg.channel_split(d)
    ex = T.channel_project(x, p[f"{name}.expand.w"], p[f"{name}.expand.b"])
    gate, glob, local_in = T.split_channels(ex, [g, i, c])
    local = T.conv2d(
        local_in, p[f"{name}.local.w"], p[f"{name}.local.b"],
        stride=1, padding=(cfg.local_kernel - 1) // 2,
    )
    s = T.mul(T.gelu(gate), T.concat_channels(glob, local))
    back = T.channel_project(s, p[f"{name}.proj.w"], p[f"{name}.proj.b"])
    res = T.add(x, back)
    return T.channel_project(res, p[f"{name}.out.w"], p[f"{name}.out.b"])


def gfr_step(r_in: Tensor, r_prev: Tensor, lvl: int, p: dict, plan: ChannelPlan,
             cfg: GatedCnnConfig, variant: str) -> Tensor:
    """One top-down refinement step producing the lower level's width."""
    _, h_lo, w_lo = r_prev.shape
    if h_lo < r_in.shape[1]:
        raise ValueError(
            f"gfr_step: lower level {r_prev.shape} not larger than upper {r_in.shape}"
        )
    up = T.bilinear_interp(r_in, h_lo, w_lo)
    cat = T.concat_channels(up, pre_align_conv(r_prev, p, lvl))
    if variant == "full":
        return gated_cnn(cat, p, f"sat.gfr{lvl}", cfg, plan.widths[lvl])
    return T.conv2d(cat, p[f"sat.gfr{lvl}.star.w"], p[f"sat.gfr{lvl}.star.b"],
                    stride=1, padding=1)


def gfr(pyr: PyramidFeatures, p: dict, plan: ChannelPlan, cfg: GatedCnnConfig,
        variant: str = "full") -> Tensor:
    """Full top-down recursion r4 -> r3 -> r2 -> r1 -> r0; returns refined r0."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown refinement variant {variant!r}")
    r_in = pyr.levels[3]
    for lvl in (3, 2, 1, 0):
        r_prev = pyr.levels[lvl - 1] if lvl >= 1 else pyr.r0
        r_in = gfr_step(r_in, r_prev, lvl, p, plan, cfg, variant)
    return r_in


def to_sat_feature(r0_out: Tensor, p: dict) -> Tensor:
    """1x1 channel lift from d0 to the shared feature width C."""
    return T.channel_project(r0_out, p["sat.out.w"], p["sat.out.b"])


def param_count(p: dict[str, Tensor]) -> int:
    return sum(t.size for t in p.values())
