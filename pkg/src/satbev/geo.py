"""Ego-pose geometry: satellite patch cropping, ego alignment, pose noise.

World frame is planar metric (x east, y north, meters). The ego frame has
+forward along the heading and +lateral to the right; BEV grids and patches
put row 0 at the forward edge and column 0 at the left edge.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


def normalize_heading(h: float) -> float:
    """Wrap an angle into [-pi, pi); already-normalized values pass through bitwise."""
    h = float(h)
    if -math.pi <= h < math.pi:
        return h
    r = math.fmod(h + math.pi, _TWO_PI)
    if r < 0.0:
        r += _TWO_PI
    r -= math.pi
    if r >= math.pi:
        r -= _TWO_PI
    elif r < -math.pi:
        r += _TWO_PI
    return r


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError(f"EgoPose: non-finite pose ({self.x}, {self.y}, {self.heading})")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    def forward_dir(self) -> tuple[float, float]:
        return math.cos(self.heading), math.sin(self.heading)

    def right_dir(self) -> tuple[float, float]:
        return math.sin(self.heading), -math.cos(self.heading)


@dataclass
class SatTile:
    """World-registered RGB raster; pixel (iy, ix) center sits at
    (origin_x + ix*resolution, origin_y + iy*resolution)."""

    raster: np.ndarray  # [3, H_t, W_t], values in [0, 1]
    origin_x: float
    origin_y: float
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"SatTile: resolution must be positive, got {self.resolution}")
        if self.raster.ndim != 3 or self.raster.shape[0] != 3:
            raise ValueError(f"SatTile: raster must be [3,H,W], got {self.raster.shape}")

    def world_to_pixel(self, wx, wy):
        """Continuous pixel coordinates (px along x, py along y)."""
        return (np.asarray(wx) - self.origin_x) / self.resolution, (
            np.asarray(wy) - self.origin_y
        ) / self.resolution

    def pixel_to_world(self, px, py):
        return (
            self.origin_x + np.asarray(px) * self.resolution,
            self.origin_y + np.asarray(py) * self.resolution,
        )


@dataclass(frozen=True)
class PatchSpec:
    range_forward: float = 60.0
    range_lateral: float = 30.0
    out_h: int = 200
    out_w: int = 100

    def __post_init__(self):
        if self.range_forward <= 0 or self.range_lateral <= 0:
            raise ValueError("PatchSpec: ranges must be positive")
        if self.out_h <= 0 or self.out_w <= 0:
            raise ValueError("PatchSpec: output extents must be positive")


@dataclass(frozen=True)
class GridGeometry:
    """Ego-centered raster geometry shared by BEV grids and satellite patches.

    Cell (i, j) center: forward = (h/2 - (i+0.5))*cell_f,
    lateral-right = ((j+0.5) - w/2)*cell_l.
    """

    range_forward: float
    range_lateral: float
    h: int
    w: int

    @property
    def cell_f(self) -> float:
        return self.range_forward / self.h

    @property
    def cell_l(self) -> float:
        return self.range_lateral / self.w

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """1-D forward axis (descending over rows) and lateral axis (ascending)."""
        f = (self.h / 2.0 - (np.arange(self.h) + 0.5)) * self.cell_f
        l = (np.arange(self.w) + 0.5 - self.w / 2.0) * self.cell_l
        return f, l

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(forward, lateral) coordinate maps of shape [h, w]."""
        f, l = self.axes()
        return (
            np.ascontiguousarray(np.broadcast_to(f[:, None], (self.h, self.w))),
            np.ascontiguousarray(np.broadcast_to(l[None, :], (self.h, self.w))),
        )

    def ego_to_cell(self, fwd, lat):
        """Continuous (row, col) for ego coordinates (vectorized)."""
        i = self.h / 2.0 - np.asarray(fwd) / self.cell_f - 0.5
        j = np.asarray(lat) / self.cell_l + self.w / 2.0 - 0.5
        return i, j


def world_to_ego(pose: EgoPose, xs, ys):
    """Project world points into (forward, lateral-right) ego coordinates."""
    fx, fy = pose.forward_dir()
    rx, ry = pose.right_dir()
    dx = np.asarray(xs) - pose.x
    dy = np.asarray(ys) - pose.y
    return dx * fx + dy * fy, dx * rx + dy * ry


def ego_to_world(pose: EgoPose, fwd, lat):
    fx, fy = pose.forward_dir()
    rx, ry = pose.right_dir()
    return (
        pose.x + np.asarray(fwd) * fx + np.asarray(lat) * rx,
        pose.y + np.asarray(fwd) * fy + np.asarray(lat) * ry,
    )


def _sample_tile_bilinear(tile: SatTile, wx: np.ndarray, wy: np.ndarray) -> np.ndarray:
    """Bilinear samples at world points; contributions outside the tile are zero."""
    px, py = tile.world_to_pixel(wx, wy)
    _, th, tw = tile.raster.shape
    j0 = np.floor(px).astype(np.int64)
    i0 = np.floor(py).astype(np.int64)
    out = np.zeros((3,) + px.shape)
    for di in (0, 1):
        for dj in (0, 1):
            ii = i0 + di
            jj = j0 + dj
            wgt = (1.0 - np.abs(py - ii)) * (1.0 - np.abs(px - jj))
            ok = (ii >= 0) & (ii < th) & (jj >= 0) & (jj < tw)
            iic = np.clip(ii, 0, th - 1)
            jjc = np.clip(jj, 0, tw - 1)
            out += np.where(ok, wgt, 0.0) * tile.raster[:, iic, jjc]
    return out


def crop_patch(tile: SatTile, pose: EgoPose, spec: PatchSpec) -> np.ndarray:
    """Pose-centered, heading-rotated crop resampled to spec extents.

    Output rows span the forward axis (row 0 at the forward edge), columns
    the lateral axis (column 0 leftmost). Out-of-tile samples are zero.
    """
    geom = GridGeometry(spec.range_forward, spec.range_lateral, spec.out_h, spec.out_w)
    f, l = geom.cell_centers()
    wx, wy = ego_to_world(pose, f, l)
    px, py = tile.world_to_pixel(wx, wy)
    _, th, tw = tile.raster.shape
    inside = (px >= 0) & (px <= tw - 1) & (py >= 0) & (py <= th - 1)
    if not inside.any():
        raise ValueError(
            f"crop_patch: patch at pose ({pose.x:.2f}, {pose.y:.2f}, {pose.heading:.3f}) "
            "does not intersect the tile"
        )
    return _sample_tile_bilinear(tile, wx, wy)


class AlignTransform(enum.Enum):
    """Dataset-specific satellite-to-ego affines. Only the flip+rotate of the
    synthetic tile convention is implemented; other conventions would add
    members here."""

    VFLIP_ROT90CW = "vflip_rot90cw"


def align_to_ego(patch: np.ndarray, transform: AlignTransform = AlignTransform.VFLIP_ROT90CW) -> np.ndarray:
    """Vertical flip followed by a 90-degree clockwise rotation: [3,H,W] -> [3,W,H]."""
    if transform is not AlignTransform.VFLIP_ROT90CW:
        raise NotImplementedError(f"alignment transform {transform} not implemented")
    flipped = patch[:, ::-1, :]
    return np.ascontiguousarray(np.rot90(flipped, k=-1, axes=(1, 2)))


def align_to_ego_inverse(patch: np.ndarray, transform: AlignTransform = AlignTransform.VFLIP_ROT90CW) -> np.ndarray:
    """Inverse of align_to_ego: rotate 90 degrees counter-clockwise, then flip."""
    if transform is not AlignTransform.VFLIP_ROT90CW:
        raise NotImplementedError(f"alignment transform {transform} not implemented")
    unrot = np.rot90(patch, k=1, axes=(1, 2))
    return np.ascontiguousarray(unrot[:, ::-1, :])


def crop_patch_image(tile: SatTile, pose: EgoPose, spec: PatchSpec) -> np.ndarray:
    """Crop in the synthetic tile-service convention ([3, out_w, out_h]).

    Served crops come out with axes permuted relative to the ego frame, so
    align_to_ego(crop_patch_image(...)) == crop_patch(...).
    """
    ego = crop_patch(tile, pose, spec)
    return np.ascontiguousarray(ego.transpose(0, 2, 1))


def perturb_pose(pose: EgoPose, sigma_t: float, sigma_r: float, rng: np.random.Generator) -> EgoPose:
    """Gaussian localization noise on translation and heading."""
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError(f"perturb_pose: negative sigma ({sigma_t}, {sigma_r})")
    dx, dy = rng.normal(0.0, sigma_t, size=2)
    dh = rng.normal(0.0, sigma_r)
    return EgoPose(pose.x + dx, pose.y + dy, normalize_heading(pose.heading + dh))
