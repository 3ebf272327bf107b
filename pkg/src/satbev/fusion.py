"""Grid-to-grid fusion of BEV and satellite features, plus the ablation
baselines: per-cell sum+MLP (the method), per-cell concat+MLP, and patch
cross-attention without spatial constraints.

The sum and concat variants never mix cells: every output cell is a function
of exactly the matching input cell. Cross-attention deliberately is not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

FUSION_KINDS = ("sum_mlp", "concat_mlp", "patch_cross_attention")
ATTN_EMBED = 64


@dataclass(frozen=True)
class FusionVariant:
    kind: str = "sum_mlp"
    patch_size: int = 5

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"FusionVariant: unknown kind {self.kind!r}")
        if self.patch_size <= 0:
            raise ValueError("FusionVariant: patch_size must be positive")


def _mat(rng, dout, din):
    bound = np.sqrt(6.0 / din)
    return rng.uniform(-bound, bound, size=(dout, din))


def init_fusion_params(rng: np.random.Generator, variant: FusionVariant, c: int,
                       grid_hw: tuple[int, int]) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    if variant.kind == "sum_mlp":
        add("fuse.l1.w", _mat(rng, 2 * c, c))
        add("fuse.l1.b", np.zeros(2 * c))
        add("fuse.l2.w", _mat(rng, c, 2 * c))
        add("fuse.l2.b", np.zeros(c))
    elif variant.kind == "concat_mlp":
        add("fuse.l1.w", _mat(rng, 2 * c, 2 * c))
        add("fuse.l1.b", np.zeros(2 * c))
        add("fuse.l2.w", _mat(rng, c, 2 * c))
        add("fuse.l2.b", np.zeros(c))
    else:
        h, w = grid_hw
        ps = variant.patch_size
        if h % ps or w % ps:
            raise ValueError(
                f"patch_cross_attention: patch size {ps} does not divide grid {h}x{w}"
            )
        tok = c * ps * ps
        for name in ("q", "k", "v"):
            add(f"fuse.attn.{name}.w", _mat(rng, ATTN_EMBED, tok))
            add(f"fuse.attn.{name}.b", np.zeros(ATTN_EMBED))
        add("fuse.attn.out.w", _mat(rng, tok, ATTN_EMBED))
        add("fuse.attn.out.b", np.zeros(tok))
    return p


def identity_mlp_params(c: int) -> dict[str, Tensor]:
    """Exact identity-composition init for the sum MLP: the hidden layer holds
    [x; -x] and the output takes gelu(x) - gelu(-x), which equals x for all x."""
    eye = np.eye(c)
    return {
        "fuse.l1.w": Tensor(np.concatenate([eye, -eye], axis=0), requires_grad=True),
        "fuse.l1.b": Tensor(np.zeros(2 * c), requires_grad=True),
        "fuse.l2.w": Tensor(np.concatenate([eye, -eye], axis=1), requires_grad=True),
        "fuse.l2.b": Tensor(np.zeros(c), requires_grad=True),
    }


def _per_cell_mlp(x: Tensor, p: dict) -> Tensor:
    h = T.gelu(T.channel_project(x, p["fuse.l1.w"], p["fuse.l1.b"]))
    return T.channel_project(h, p["fuse.l2.w"], p["fuse.l2.b"])


def fuse_sum_mlp(f_bev: Tensor, f_sat: Tensor, p: dict) -> Tensor:
    """Per-cell sum followed by a per-cell MLP; no spatial mixing at all."""
    if f_bev.shape != f_sat.shape:
        raise ValueError(f"fuse_sum_mlp: shape mismatch {f_bev.shape} vs {f_sat.shape}")
    return _per_cell_mlp(T.add(f_bev, f_sat), p)


def fuse_concat_mlp(f_bev: Tensor, f_sat: Tensor, p: dict) -> Tensor:
    if f_bev.shape != f_sat.shape:
        raise ValueError(f"fuse_concat_mlp: shape mismatch {f_bev.shape} vs {f_sat.shape}")
    return _per_cell_mlp(T.concat_channels(f_bev, f_sat), p)


def fuse_patch_cross_attention(f_bev: Tensor, f_sat: Tensor, variant: FusionVariant,
                               p: dict) -> Tensor:
    """Single-head cross-attention over non-overlapping patch embeddings with
    BEV queries and satellite keys/values; residual from the BEV feature."""
    if f_bev.shape != f_sat.shape:
        raise ValueError("fuse_patch_cross_attention: shape mismatch")
    c, h, w = f_bev.shape
    ps = variant.patch_size
    if h % ps or w % ps:
        raise ValueError(f"patch size {ps} does not divide grid {h}x{w}")
    q = T.linear(T.extract_patches(f_bev, ps), p["fuse.attn.q.w"], p["fuse.attn.q.b"])
    k = T.linear(T.extract_patches(f_sat, ps), p["fuse.attn.k.w"], p["fuse.attn.k.b"])
    v = T.linear(T.extract_patches(f_sat, ps), p["fuse.attn.v.w"], p["fuse.attn.v.b"])
    attn = T.softmax_lastdim(T.scale(T.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(ATTN_EMBED)))
    mixed = T.linear(T.matmul(attn, v), p["fuse.attn.out.w"], p["fuse.attn.out.b"])
    return T.add(f_bev, T.fold_patches(mixed, c, h, w, ps))


def fuse(f_bev: Tensor, f_sat: Tensor, variant: FusionVariant, p: dict) -> Tensor:
    if variant.kind == "sum_mlp":
        return fuse_sum_mlp(f_bev, f_sat, p)
    if variant.kind == "concat_mlp":
        return fuse_concat_mlp(f_bev, f_sat, p)
    return fuse_patch_cross_attention(f_bev, f_sat, variant, p)
