"""Rasterized map decoder, vectorization, and Chamfer-distance AP.

The head predicts per-cell class probabilities; vectorization chains
thresholded components into polylines; evaluation matches predictions to
ground truth greedily by confidence and averages AP over the Chamfer
thresholds. Matching is threshold-independent: each prediction consumes its
nearest unmatched ground-truth instance once, and the thresholds only decide
which matches count as true positives (so looser thresholds never lose
matches).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .geo import GridGeometry
from .tensor import Tensor

N_CLASSES = 4  # background + divider + ped_crossing + boundary
_CONN8 = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class ApConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    resample_n: int = 20

    def __post_init__(self):
        if any(t <= 0 for t in self.thresholds) or list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("ApConfig: thresholds must be positive ascending")


@dataclass
class VectorPred:
    cls: int
    points: np.ndarray  # [N, 2] ego meters (forward, lateral)
    confidence: float


# ---------------------------------------------------------------------------
# decoder head

def init_head_params(rng: np.random.Generator, c: int) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    for i in (1, 2):
        bound = np.sqrt(6.0 / (c * 9))
        p[f"head.conv{i}.w"] = Tensor(rng.uniform(-bound, bound, size=(c, c, 3, 3)),
                                      requires_grad=True)
        p[f"head.conv{i}.b"] = Tensor(np.zeros(c), requires_grad=True)
    bound = np.sqrt(6.0 / c)
    p["head.out.w"] = Tensor(rng.uniform(-bound, bound, size=(N_CLASSES, c)), requires_grad=True)
    p["head.out.b"] = Tensor(np.zeros(N_CLASSES), requires_grad=True)
    return p


def segment_logits(f_enhanced: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Two 3x3 convs with GELU, then a 1x1 lift to 4 class logits."""
    x = T.gelu(T.conv2d(f_enhanced, p["head.conv1.w"], p["head.conv1.b"], 1, 1))
    x = T.gelu(T.conv2d(x, p["head.conv2.w"], p["head.conv2.b"], 1, 1))
    return T.channel_project(x, p["head.out.w"], p["head.out.b"])


def segment(f_enhanced: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Class-probability grid (softmax over the class axis)."""
    return T.softmax_channels(segment_logits(f_enhanced, p))


def class_weights_from_counts(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency class weights clamped to [1, 20]."""
    total = counts.sum()
    weights = np.ones(N_CLASSES)
    for c in range(N_CLASSES):
        if counts[c] > 0:
            weights[c] = total / (N_CLASSES * counts[c])
    return np.clip(weights, 1.0, 20.0)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted per-cell cross entropy on class logits (stable log-softmax)."""
    h, w = labels.shape
    onehot = np.zeros((N_CLASSES, h, w))
    cell_w = weights[labels]
    for c in range(N_CLASSES):
        onehot[c][labels == c] = 1.0
    pick = T.mul(T.log_softmax_channels(logits), Tensor(onehot * cell_w[None]))
    return T.scale(T.sum_all(pick), -1.0 / float(cell_w.sum()))


# ---------------------------------------------------------------------------
# vectorization

def _chain_cells(cells_ij: np.ndarray, f_axis: np.ndarray, l_axis: np.ndarray) -> np.ndarray:
    """Nearest-neighbor chain starting from the most extremal cell; ties break
    toward the lowest row-major cell index."""
    pts = np.stack([f_axis[cells_ij[:, 0]], l_axis[cells_ij[:, 1]]], axis=1)
    order_key = cells_ij[:, 0] * (cells_ij[:, 1].max() + 1) + cells_ij[:, 1]
    centroid = pts.mean(axis=0)
    d_centroid = np.linalg.norm(pts - centroid, axis=1)
    start = int(np.lexsort((order_key, -d_centroid))[0])

    n = len(pts)
    visited = np.zeros(n, dtype=bool)
    chain = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        d = np.linalg.norm(pts - pts[cur], axis=1)
        d[visited] = np.inf
        nxt = int(np.lexsort((order_key, d))[0])
        chain.append(nxt)
        visited[nxt] = True
        cur = nxt
    return pts[chain]


def _simplify(points: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker with perpendicular-distance tolerance."""
    if len(points) <= 2:
        return points
    a, b = points[0], points[-1]
    ab = b - a
    norm = np.linalg.norm(ab)
    if norm == 0.0:
        d = np.linalg.norm(points - a, axis=1)
    else:
        rel = points - a
        d = np.abs(ab[0] * rel[:, 1] - ab[1] * rel[:, 0]) / norm
    idx = int(np.argmax(d))
    if d[idx] <= tol:
        return np.stack([a, b])
    left = _simplify(points[: idx + 1], tol)
    right = _simplify(points[idx:], tol)
    return np.concatenate([left[:-1], right], axis=0)


def vectorize(prob_grid: np.ndarray, geom: GridGeometry, min_prob: float = 0.5,
              min_cells: int = 4) -> list[VectorPred]:
    """Threshold, 8-connected components, chain, simplify; confidence is the
    mean class probability over the component."""
    f_axis, l_axis = geom.axes()
    tol = 0.5 * max(geom.cell_f, geom.cell_l)
    preds: list[VectorPred] = []
    for cid in range(1, N_CLASSES):
        mask = prob_grid[cid] >= min_prob
        lab, n_comp = ndimage.label(mask, structure=_CONN8)
        for comp in range(1, n_comp + 1):
            cells = np.argwhere(lab == comp)
            if len(cells) < min_cells:
                continue
            chained = _chain_cells(cells, f_axis, l_axis)
            simplified = _simplify(chained, tol)
            if len(simplified) < 2:
                continue
            conf = float(prob_grid[cid][lab == comp].mean())
            preds.append(VectorPred(cid, simplified, conf))
    preds.sort(key=lambda p: (p.cls, -p.confidence))
    return preds


# ---------------------------------------------------------------------------
# Chamfer distance

def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """n points equidistant in arc length, endpoints included."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("resample_polyline: need at least 2 points")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total == 0.0:
        raise ValueError("resample_polyline: degenerate zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    t = (targets - cum[idx]) / seg[idx]
    return points[idx] + t[:, None] * (points[idx + 1] - points[idx])


def chamfer_distance(a: np.ndarray, b: np.ndarray, resample_n: int = 20) -> float:
    """Symmetric mean nearest-point distance over arc-length resampled sets."""
    ra = resample_polyline(a, resample_n)
    rb = resample_polyline(b, resample_n)
    d = np.linalg.norm(ra[:, None, :] - rb[None, :, :], axis=2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# average precision

def _greedy_match(preds: list[tuple[int, VectorPred]], gts: list[tuple[int, np.ndarray]],
                  resample_n: int) -> tuple[list[float | None], int]:
    """Confidence-ordered greedy matching within samples.

    preds: (sample_id, prediction); gts: (sample_id, polyline). Returns the
    matched Chamfer distance per prediction (None when no ground truth was
    left) in confidence order, plus the ground-truth count.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].confidence)
    unmatched: dict[int, list[int]] = {}
    for gi, (sid, _) in enumerate(gts):
        unmatched.setdefault(sid, []).append(gi)
    matched_cd: list[float | None] = []
    for i in order:
        sid, pred = preds[i]
        candidates = unmatched.get(sid, [])
        if not candidates:
            matched_cd.append(None)
            continue
        best_gi = None
        best_cd = np.inf
        for gi in candidates:
            cd = chamfer_distance(pred.points, gts[gi][1], resample_n)
            if cd < best_cd:
                best_cd = cd
                best_gi = gi
        candidates.remove(best_gi)
        matched_cd.append(best_cd)
    return matched_cd, len(gts)


def _ap_from_matches(matched_cd: list[float | None], n_gt: int, tau: float) -> float:
    """Area under the precision-recall step curve with precision envelope."""
    if n_gt == 0:
        return 1.0 if not matched_cd else 0.0
    if not matched_cd:
        return 0.0
    tp = np.array([cd is not None and cd <= tau for cd in matched_cd], dtype=float)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # envelope from the right, integrate at recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def ap_at_threshold(preds: list[tuple[int, VectorPred]], gts: list[tuple[int, np.ndarray]],
                    tau: float, resample_n: int = 20) -> float:
    matched_cd, n_gt = _greedy_match(preds, gts, resample_n)
    return _ap_from_matches(matched_cd, n_gt, tau)


def map_metric(preds_by_sample: list[list[VectorPred]],
               gts_by_sample: list[list[tuple[int, np.ndarray]]],
               cfg: ApConfig = ApConfig()) -> dict[str, float]:
    """Per-class AP averaged over Chamfer thresholds, plus their mean."""
    out: dict[str, float] = {}
    names = {1: "AP_div", 2: "AP_ped", 3: "AP_bou"}
    for cid, name in names.items():
        preds = [
            (sid, p)
            for sid, sample in enumerate(preds_by_sample)
            for p in sample
            if p.cls == cid
        ]
        gts = [
            (sid, pts)
            for sid, sample in enumerate(gts_by_sample)
            for gcid, pts in sample
            if gcid == cid
        ]
        matched_cd, n_gt = _greedy_match(preds, gts, cfg.resample_n)
        out[name] = float(
            np.mean([_ap_from_matches(matched_cd, n_gt, tau) for tau in cfg.thresholds])
        )
    out["mAP"] = float(np.mean([out["AP_div"], out["AP_ped"], out["AP_bou"]]))
    return out
