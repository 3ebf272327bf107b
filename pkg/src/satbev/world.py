"""Procedural driving scenes: vector ground truth, satellite renders with
map-irrelevant nuisance, degraded ego observations, and GT rasterization.

Every generator is a pure function of its seed; rendering is deterministic
given the scene. Degradations touch observations only, never ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import EgoPose, GridGeometry, SatTile, normalize_heading, world_to_ego

CLASS_IDS = {"divider": 1, "ped_crossing": 2, "boundary": 3}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}

# satellite render albedos (RGB); nuisance tones
ALBEDO = {
    "base": np.array([0.32, 0.32, 0.34]),
    "divider": np.array([0.85, 0.85, 0.80]),
    "ped_crossing": np.array([0.75, 0.72, 0.35]),
    "boundary": np.array([0.55, 0.28, 0.18]),
    "vegetation": np.array([0.18, 0.38, 0.16]),
    "building": np.array([0.46, 0.44, 0.43]),
}

# ego-observation intensity per class id (background 0)
OBS_INTENSITY = np.array([0.0, 0.45, 0.70, 1.00])

VIS_FULL_RANGE = 20.0  # meters of full visibility before the falloff starts
VIS_FLOOR = 0.2
OBS_NOISE_SIGMA = 0.02

DEGRADATION_KINDS = ("none", "fog", "snow", "frame_lost", "camera_crash", "low_light")

# fixed camera ring for the camera_crash degradation: centers of the sectors
# that die, in crash order
CRASH_SECTOR_CENTERS = (0.0, 2.0 * math.pi / 3.0, -2.0 * math.pi / 3.0)
CRASH_SECTOR_WIDTH = math.pi / 3.0


@dataclass
class MapInstance:
    cls: str
    points: np.ndarray  # [N, 2] world meters
    width: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.cls not in CLASS_IDS:
            raise ValueError(f"MapInstance: unknown class {self.cls!r}")
        if len(self.points) < 2:
            raise ValueError("MapInstance: needs at least 2 points")
        if self.width <= 0:
            raise ValueError("MapInstance: width must be positive")
        deltas = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(deltas == 0.0):
            raise ValueError("MapInstance: consecutive points must be distinct")


@dataclass
class Nuisance:
    kind: str  # shadow | vegetation | building | cloud
    polygon: np.ndarray  # [N, 2] world meters


@dataclass
class SceneSpec:
    seed: int
    instances: list[MapInstance]
    nuisances: list[Nuisance]
    ego_track: list[EgoPose]


@dataclass(frozen=True)
class TileConfig:
    resolution: float = 0.3
    margin: float = 25.0


@dataclass
class DegradationSpec:
    kind: str = "none"
    severity: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(f"DegradationSpec: unknown kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"DegradationSpec: severity {self.severity} outside [0, 1]")
        if self.kind == "none":
            self.severity = 0.0


# ---------------------------------------------------------------------------
# scene generation

def _road_instances(rng, center, direction, half_len, half_width, n_div, n_cross):
    """Boundaries, dividers and crossings of one straight road."""
    ux, uy = math.cos(direction), math.sin(direction)
    n = np.array([-uy, ux])
    c = np.asarray(center, dtype=float)

    def line(lateral):
        s = np.linspace(-half_len, half_len, 5)
        return c + np.outer(s, [ux, uy]) + lateral * n

    out = [
        MapInstance("boundary", line(+half_width), 0.5),
        MapInstance("boundary", line(-half_width), 0.5),
    ]
    offsets = np.linspace(-half_width + 2.5, half_width - 2.5, n_div + 2)[1:-1]
    for off in offsets:
        out.append(MapInstance("divider", line(off + rng.uniform(-0.8, 0.8)), 0.3))
    for s in rng.uniform(-0.75 * half_len, 0.75 * half_len, size=n_cross):
        axis = c + s * np.array([ux, uy])
        out.append(
            MapInstance(
                "ped_crossing",
                np.stack([axis - half_width * n, axis + half_width * n]),
                rng.uniform(3.0, 4.0),
            )
        )
    return out


def _nuisance_polygon(rng, center, mean_radius):
    k = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = rng.uniform(0.55, 1.45, size=k) * mean_radius
    return np.asarray(center) + np.stack(
        [radii * np.cos(angles), radii * np.sin(angles)], axis=1
    )


def gen_scene(seed: int) -> SceneSpec:
    """Deterministic road scene: straight segment or intersection, with 1-3
    dividers, 1-4 crossings per road, and 3-10 nuisance polygons."""
    rng = np.random.default_rng([0x5EED, int(seed)])
    direction = rng.uniform(0.0, 2.0 * math.pi)
    center = rng.uniform(-8.0, 8.0, size=2)
    half_len = rng.uniform(75.0, 95.0)
    half_width = rng.uniform(6.0, 8.5)

    instances = _road_instances(
        rng, center, direction, half_len, half_width,
        n_div=int(rng.integers(1, 4)), n_cross=int(rng.integers(1, 5)),
    )

    if rng.random() < 0.35:  # intersection: a second road crossing the first
        cross_dir = direction + math.pi / 2.0 + rng.uniform(-0.25, 0.25)
        cross_center = center + rng.uniform(-15.0, 15.0) * np.array(
            [math.cos(direction), math.sin(direction)]
        )
        instances += _road_instances(
            rng, cross_center, cross_dir, rng.uniform(40.0, 60.0),
            rng.uniform(5.0, 7.0), n_div=int(rng.integers(1, 3)),
            n_cross=int(rng.integers(1, 3)),
        )

    ux, uy = math.cos(direction), math.sin(direction)
    n = np.array([-uy, ux])
    ego_track = []
    for s in np.linspace(-0.45 * half_len, 0.45 * half_len, 5):
        p = center + s * np.array([ux, uy]) + rng.uniform(-1.5, 1.5) * n
        ego_track.append(EgoPose(p[0], p[1], normalize_heading(direction + rng.uniform(-0.06, 0.06))))

    nuisances = []
    for _ in range(int(rng.integers(3, 11))):
        kind = rng.choice(["shadow", "vegetation", "building", "cloud"],
                          p=[0.38, 0.27, 0.17, 0.18])
        s = rng.uniform(-0.8 * half_len, 0.8 * half_len)
        if kind in ("shadow", "cloud"):
            lat = rng.uniform(-half_width - 4.0, half_width + 4.0)
            radius = rng.uniform(4.0, 13.0)
        else:  # vegetation/building hug the road edges
            side = rng.choice([-1.0, 1.0])
            lat = side * (half_width + rng.uniform(-1.0, 9.0))
            radius = rng.uniform(3.0, 10.0)
        c = center + s * np.array([ux, uy]) + lat * n
        nuisances.append(Nuisance(str(kind), _nuisance_polygon(rng, c, radius)))

    return SceneSpec(int(seed), instances, nuisances, ego_track)


# ---------------------------------------------------------------------------
# raster helpers

def _axis_window(axis: np.ndarray, lo: float, hi: float) -> slice:
    """Index slice of a monotonic 1-D axis with values in [lo, hi]."""
    if len(axis) < 2 or axis[0] <= axis[-1]:
        return slice(np.searchsorted(axis, lo, "left"), np.searchsorted(axis, hi, "right"))
    rev = axis[::-1]
    a = np.searchsorted(rev, lo, "left")
    b = np.searchsorted(rev, hi, "right")
    return slice(len(axis) - b, len(axis) - a)


def _polygon_mask(poly: np.ndarray, x_axis: np.ndarray, y_axis: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test on the grid spanned by two axes."""
    inside = np.zeros((len(y_axis), len(x_axis)), dtype=bool)
    sx = _axis_window(x_axis, poly[:, 0].min(), poly[:, 0].max())
    sy = _axis_window(y_axis, poly[:, 1].min(), poly[:, 1].max())
    xs = x_axis[sx][None, :]
    ys = y_axis[sy][:, None]
    if xs.size == 0 or ys.size == 0:
        return inside
    win = np.zeros((ys.size, xs.size), dtype=bool)
    n = len(poly)
    for e in range(n):
        x1, y1 = poly[e]
        x2, y2 = poly[(e + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        xcut = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        win ^= crosses & (xs < xcut)
    inside[sy, sx] = win
    return inside


def _segment_distance(px, py, ax, ay, bx, by):
    """Distance from points to segment ab (vectorized over points)."""
    vx, vy = bx - ax, by - ay
    seg2 = vx * vx + vy * vy
    if seg2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / seg2, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _stroke_mask(points: np.ndarray, radius: float, x_axis: np.ndarray,
                 y_axis: np.ndarray) -> np.ndarray:
    """Cells within radius of the polyline, evaluated per segment window."""
    mask = np.zeros((len(y_axis), len(x_axis)), dtype=bool)
    for a, b in zip(points[:-1], points[1:]):
        sx = _axis_window(x_axis, min(a[0], b[0]) - radius, max(a[0], b[0]) + radius)
        sy = _axis_window(y_axis, min(a[1], b[1]) - radius, max(a[1], b[1]) + radius)
        xs = x_axis[sx][None, :]
        ys = y_axis[sy][:, None]
        if xs.size == 0 or ys.size == 0:
            continue
        d = _segment_distance(xs, ys, a[0], a[1], b[0], b[1])
        mask[sy, sx] |= d <= radius
    return mask


# ---------------------------------------------------------------------------
# satellite render

def render_satellite(scene: SceneSpec, tile_cfg: TileConfig = TileConfig()) -> SatTile:
    """Asphalt-toned base, class-albedo strokes, then nuisance compositing
    (shadow: multiply 0.4; vegetation/building: opaque texture noise;
    cloud: additive white with a soft edge)."""
    if not scene.instances:
        raise ValueError("render_satellite: scene has no instances")
    pts = np.concatenate([inst.points for inst in scene.instances], axis=0)
    lo = pts.min(axis=0) - tile_cfg.margin
    hi = pts.max(axis=0) + tile_cfg.margin
    res = tile_cfg.resolution
    tw = int(math.ceil((hi[0] - lo[0]) / res)) + 1
    th = int(math.ceil((hi[1] - lo[1]) / res)) + 1

    xs = lo[0] + np.arange(tw) * res
    ys = lo[1] + np.arange(th) * res

    raster = np.empty((3, th, tw))
    raster[:] = ALBEDO["base"][:, None, None]

    # paint order fixes overlap priority: boundary > ped_crossing > divider
    for cls in ("divider", "ped_crossing", "boundary"):
        color = ALBEDO[cls]
        for inst in scene.instances:
            if inst.cls != cls:
                continue
            m = _stroke_mask(inst.points, max(inst.width, res) / 2.0, xs, ys)
            raster[:, m] = color[:, None]

    tex_rng = np.random.default_rng([0x7EC5, scene.seed])
    for nuis in scene.nuisances:
        m = _polygon_mask(nuis.polygon, xs, ys)
        if not m.any():
            continue
        if nuis.kind == "shadow":
            raster[:, m] *= 0.4
        elif nuis.kind in ("vegetation", "building"):
            tone = ALBEDO[nuis.kind]
            noise = tex_rng.uniform(-0.13, 0.13, size=(3, int(m.sum())))
            raster[:, m] = np.clip(tone[:, None] + noise, 0.0, 1.0)
        elif nuis.kind == "cloud":
            # soft edge: ramp of the interior distance to the polygon outline
            poly = nuis.polygon
            rows, cols = np.nonzero(m)
            px = xs[cols]
            py = ys[rows]
            edge = np.full(px.shape, np.inf)
            for e in range(len(poly)):
                a, b = poly[e], poly[(e + 1) % len(poly)]
                edge = np.minimum(edge, _segment_distance(px, py, a[0], a[1], b[0], b[1]))
            soft = np.clip(edge / 3.0, 0.0, 1.0)
            raster[:, m] = np.clip(raster[:, m] + 0.55 * soft, 0.0, 1.0)
        else:
            raise ValueError(f"render_satellite: unknown nuisance kind {nuis.kind!r}")

    return SatTile(raster, float(lo[0]), float(lo[1]), res)


# ---------------------------------------------------------------------------
# ground-truth rasterization

def _clip_polyline(points: np.ndarray, half_f: float, half_l: float) -> list[np.ndarray]:
    """Liang-Barsky clip of an ego-frame polyline to the perception rectangle,
    split into contiguous pieces."""
    pieces: list[list[np.ndarray]] = []
    cur: list[np.ndarray] = []

    def flush():
        nonlocal cur
        if len(cur) >= 2:
            pieces.append(cur)
        cur = []

    for p, q in zip(points[:-1], points[1:]):
        d = q - p
        t0, t1 = 0.0, 1.0
        ok = True
        for axis, (lo, hi) in enumerate(((-half_f, half_f), (-half_l, half_l))):
            delta = d[axis]
            pos = p[axis]
            if delta == 0.0:
                if pos < lo or pos > hi:
                    ok = False
                    break
            else:
                ta = (lo - pos) / delta
                tb = (hi - pos) / delta
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
                if t0 > t1:
                    ok = False
                    break
        if not ok:
            flush()
            continue
        a = p + t0 * d
        b = p + t1 * d
        if np.allclose(a, b, atol=1e-12):
            continue
        if cur and np.allclose(cur[-1], a, atol=1e-9):
            cur.append(b)
        else:
            flush()
            cur = [a, b]
    flush()
    return [np.asarray(piece) for piece in pieces]


def rasterize_gt(scene: SceneSpec, pose: EgoPose, geom: GridGeometry):
    """Ego-frame label grid plus clipped vector instances.

    Returns (labels [h, w] uint8, instances list of (class_id, points [N, 2]
    in ego (forward, lateral) meters)). Overlap priority: boundary >
    ped_crossing > divider.
    """
    f_axis, l_axis = geom.axes()
    labels = np.zeros((geom.h, geom.w), dtype=np.uint8)
    ego_instances: list[tuple[int, np.ndarray]] = []
    half_f = geom.range_forward / 2.0
    half_l = geom.range_lateral / 2.0
    min_radius = 0.5 * max(geom.cell_f, geom.cell_l)

    for cls in ("divider", "ped_crossing", "boundary"):
        cid = CLASS_IDS[cls]
        for inst in scene.instances:
            if inst.cls != cls:
                continue
            f, l = world_to_ego(pose, inst.points[:, 0], inst.points[:, 1])
            ego_pts = np.stack([f, l], axis=1)
            for piece in _clip_polyline(ego_pts, half_f, half_l):
                # stroke in (x=lateral, y=forward) axis order
                m = _stroke_mask(
                    piece[:, ::-1], max(inst.width / 2.0, min_radius), l_axis, f_axis
                )
                labels[m] = cid
                ego_instances.append((cid, piece))
    return labels, ego_instances


# ---------------------------------------------------------------------------
# ego observation

def _cell_range_bearing(geom: GridGeometry):
    ff, ll = geom.cell_centers()
    return np.hypot(ff, ll), np.arctan2(ll, ff)


def visibility_falloff(rng_m: np.ndarray, range_edge: float) -> np.ndarray:
    """Full visibility within VIS_FULL_RANGE, linear to VIS_FLOOR at range_edge."""
    if range_edge <= VIS_FULL_RANGE:
        return np.ones_like(rng_m)
    t = (rng_m - VIS_FULL_RANGE) / (range_edge - VIS_FULL_RANGE)
    return np.clip(1.0 - (1.0 - VIS_FLOOR) * t, VIS_FLOOR, 1.0)


def _ang_in_sector(bearing: np.ndarray, center: float, half_width: float) -> np.ndarray:
    d = np.abs(np.mod(bearing - center + math.pi, 2.0 * math.pi) - math.pi)
    return d <= half_width


def render_ego_observation(scene: SceneSpec, pose: EgoPose, geom: GridGeometry,
                           rng: np.random.Generator):
    """Degraded-GT observation: range falloff, 0-3 occlusion wedges, pixel noise.

    Returns (obs [h, w], visibility mask [h, w] in [0, 1]).
    """
    labels, _ = rasterize_gt(scene, pose, geom)
    rng_m, bearing = _cell_range_bearing(geom)
    vis = visibility_falloff(rng_m, geom.range_forward / 2.0)

    for _ in range(int(rng.integers(0, 4))):
        d0 = rng.uniform(4.0, 0.7 * geom.range_forward / 2.0)
        center = rng.uniform(-math.pi, math.pi)
        half_angle = rng.uniform(0.10, 0.40)
        vis = np.where((rng_m > d0) & _ang_in_sector(bearing, center, half_angle), 0.0, vis)

    obs = OBS_INTENSITY[labels] * vis + rng.normal(0.0, OBS_NOISE_SIGMA, size=labels.shape)
    return obs, vis


# ---------------------------------------------------------------------------
# degradations

def apply_degradation(raster: np.ndarray, geom: GridGeometry, spec: DegradationSpec,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """MapBench-style adverse-condition analogs on an ego observation raster."""
    if rng is None:
        rng = np.random.default_rng([0xDE64, spec.rng_seed])
    s = spec.severity
    if spec.kind == "none":
        return raster.copy()

    rng_m, bearing = _cell_range_bearing(geom)
    if spec.kind == "fog":
        range_frac = np.clip(rng_m / (geom.range_forward / 2.0), 0.0, 1.0)
        w = s * (0.3 + 0.5 * range_frac)
        return raster + w * (1.0 - raster)
    if spec.kind == "snow":
        out = raster.copy()
        n = int(round(s * 0.15 * raster.size))
        idx = rng.choice(raster.size, size=n, replace=False)
        out.reshape(-1)[idx] = 1.0
        return out
    if spec.kind == "frame_lost":
        # four equally spaced sectors with a random offset; widths always
        # total severity * 50% of the azimuth and never overlap
        out = raster.copy()
        offset = rng.uniform(0.0, 2.0 * math.pi)
        half_width = s * math.pi / 8.0
        for i in range(4):
            center = offset + i * math.pi / 2.0
            out[_ang_in_sector(bearing, center, half_width)] = 0.0
        return out
    if spec.kind == "camera_crash":
        out = raster.copy()
        count = int(math.ceil(s * 3.0))
        for center in CRASH_SECTOR_CENTERS[:count]:
            out[_ang_in_sector(bearing, center, CRASH_SECTOR_WIDTH / 2.0)] = 0.0
        return out
    if spec.kind == "low_light":
        return raster * (1.0 - 0.8 * s) + rng.normal(0.0, 0.05 * s, size=raster.shape)
    raise ValueError(f"apply_degradation: unknown kind {spec.kind!r}")
