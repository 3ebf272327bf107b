"""Sample construction and the SFL1 dataset file format.

Layout: magic "SFL1", u32 version, u32 record count; each record is a
payload (u64 seed, grid geometry header, pose, length-prefixed f32 rasters,
length-prefixed vector-GT block) followed by its CRC32. Everything is
little-endian; rasters are stored as 32-bit floats, which is also their
in-memory precision so round trips are bitwise.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import EgoPose, GridGeometry, PatchSpec, crop_patch_image
from .world import SceneSpec, TileConfig, gen_scene, rasterize_gt, render_ego_observation, render_satellite

MAGIC = b"SFL1"
VERSION = 1


class DatasetError(Exception):
    pass


@dataclass
class Sample:
    seed: int
    pose: EgoPose
    geom: GridGeometry
    patch_spec: PatchSpec
    sat_patch: np.ndarray  # [3, out_w, out_h] f32, tile-service convention
    ego_obs: np.ndarray    # [h, w] f32
    vis_mask: np.ndarray   # [h, w] f32
    labels: np.ndarray     # [h, w] uint8, values 0..3
    instances: list[tuple[int, np.ndarray]]  # (class id, [N, 2] f32 ego meters)

    def __post_init__(self):
        g = (self.geom.h, self.geom.w)
        if self.ego_obs.shape != g or self.vis_mask.shape != g or self.labels.shape != g:
            raise ValueError("Sample: raster shapes disagree with grid geometry")
        if self.sat_patch.shape != (3, self.patch_spec.out_w, self.patch_spec.out_h):
            raise ValueError(
                f"Sample: sat_patch shape {self.sat_patch.shape} disagrees with patch spec"
            )
        if self.labels.max(initial=0) > 3:
            raise ValueError("Sample: label values outside 0..3")


def make_sample(seed: int, geom: GridGeometry, patch_spec: PatchSpec,
                tile_cfg: TileConfig = TileConfig(),
                scene: SceneSpec | None = None) -> Sample:
    """Deterministic sample for one record seed."""
    if scene is None:
        scene = gen_scene(seed)
    pose_rng = np.random.default_rng([seed, 2])
    pose = scene.ego_track[int(pose_rng.integers(len(scene.ego_track)))]

    tile = render_satellite(scene, tile_cfg)
    sat = crop_patch_image(tile, pose, patch_spec).astype(np.float32)

    labels, instances = rasterize_gt(scene, pose, geom)
    obs_rng = np.random.default_rng([seed, 1])
    obs, vis = render_ego_observation(scene, pose, geom, obs_rng)

    return Sample(
        seed=int(seed),
        pose=pose,
        geom=geom,
        patch_spec=patch_spec,
        sat_patch=sat,
        ego_obs=obs.astype(np.float32),
        vis_mask=vis.astype(np.float32),
        labels=labels,
        instances=[(cid, pts.astype(np.float32)) for cid, pts in instances],
    )


def _pack_raster(arr: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
    return struct.pack("<I", flat.size) + flat.tobytes()


def _record_payload(s: Sample) -> bytes:
    parts = [
        struct.pack("<Q", s.seed),
        struct.pack("<IIdd", s.geom.h, s.geom.w, s.geom.range_forward, s.geom.range_lateral),
        struct.pack(
            "<IIdd",
            s.patch_spec.out_h, s.patch_spec.out_w,
            s.patch_spec.range_forward, s.patch_spec.range_lateral,
        ),
        struct.pack("<ddd", s.pose.x, s.pose.y, s.pose.heading),
        _pack_raster(s.sat_patch),
        _pack_raster(s.ego_obs),
        _pack_raster(s.vis_mask),
        _pack_raster(s.labels.astype(np.float32)),
        struct.pack("<I", len(s.instances)),
    ]
    for cid, pts in s.instances:
        parts.append(struct.pack("<BH", cid, len(pts)))
        parts.append(np.ascontiguousarray(pts, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(samples: list[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(samples)))
        for s in samples:
            payload = _record_payload(s)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise DatasetError("truncated record")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_raster(r: _Reader, shape: tuple[int, ...]) -> np.ndarray:
    (count,) = r.unpack("<I")
    expected = int(np.prod(shape))
    if count != expected:
        raise DatasetError(f"raster length {count} != expected {expected}")
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr)


def read_dataset(path: str | Path) -> list[Sample]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DatasetError(f"bad magic {data[:4]!r}")
    version, count = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise DatasetError(f"version mismatch: file {version}, reader {VERSION}")
    off = 12
    samples: list[Sample] = []
    for idx in range(count):
        start = off
        r = _Reader(data)
        r.off = start
        try:
            (seed,) = r.unpack("<Q")
            gh, gw, rf, rl = r.unpack("<IIdd")
            ph, pw, prf, prl = r.unpack("<IIdd")
            px, py, heading = r.unpack("<ddd")
            geom = GridGeometry(rf, rl, gh, gw)
            spec = PatchSpec(prf, prl, ph, pw)
            sat = _read_raster(r, (3, pw, ph))
            obs = _read_raster(r, (gh, gw))
            vis = _read_raster(r, (gh, gw))
            labels_f = _read_raster(r, (gh, gw))
            (n_inst,) = r.unpack("<I")
            instances = []
            for _ in range(n_inst):
                cid, npts = r.unpack("<BH")
                pts = np.frombuffer(r.take(8 * npts), dtype="<f4").reshape(npts, 2)
                instances.append((int(cid), np.ascontiguousarray(pts)))
            payload_end = r.off
            (crc,) = r.unpack("<I")
        except (struct.error, DatasetError) as exc:
            raise DatasetError(f"record {idx}: {exc}") from None
        if zlib.crc32(data[start:payload_end]) != crc:
            raise DatasetError(f"record {idx}: checksum failure")
        off = r.off
        samples.append(
            Sample(
                seed=int(seed),
                pose=EgoPose(px, py, heading),
                geom=geom,
                patch_spec=spec,
                sat_patch=sat,
                ego_obs=obs,
                vis_mask=vis,
                labels=labels_f.astype(np.uint8),
                instances=instances,
            )
        )
    if off != len(data):
        raise DatasetError(f"{len(data) - off} trailing bytes after last record")
    return samples


def generate_split(base_seed: int, count: int, geom: GridGeometry, patch_spec: PatchSpec,
                   tile_cfg: TileConfig = TileConfig()) -> list[Sample]:
    """Record seeds are base_seed + index; each sample is pure in its seed."""
    return [make_sample(base_seed + i, geom, patch_spec, tile_cfg) for i in range(count)]
