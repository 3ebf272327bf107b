"""BEV branch: encodes the degraded ego observation (plus its visibility
mask) into the shared C-channel grid feature."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

HIDDEN = (16, 24)


def init_bev_params(rng: np.random.Generator, c_out: int) -> dict[str, Tensor]:
    widths = (2,) + HIDDEN + (c_out,)
    p: dict[str, Tensor] = {}
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        bound = np.sqrt(6.0 / (cin * 9))
        p[f"bev.conv{i}.w"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)),
                                     requires_grad=True)
        p[f"bev.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return p


def encode_bev(obs_and_mask: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Three stride-1 3x3 convs (widths 16, 24, C) with GELU between.

    Input is the observation stacked with its visibility mask: [2, H, W].
    """
    if obs_and_mask.shape[0] != 2:
        raise ValueError(f"encode_bev: expected [2,H,W] input, got {obs_and_mask.shape}")
    x = T.conv2d(obs_and_mask, p["bev.conv1.w"], p["bev.conv1.b"], stride=1, padding=1)
    x = T.gelu(x)
    x = T.conv2d(x, p["bev.conv2.w"], p["bev.conv2.b"], stride=1, padding=1)
    x = T.gelu(x)
    return T.conv2d(x, p["bev.conv3.w"], p["bev.conv3.b"], stride=1, padding=1)
