"""Metric tables (CSV + JSON) and side-by-side PPM renders.

The CSV column set is fixed; JSON rows additionally carry the config hash and
seed so any number can be reproduced from the row alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import Sample
from .geo import align_to_ego

CSV_HEADER = "scenario,variant,seed,AP_div,AP_ped,AP_bou,mAP"

# render palette (RGB in [0,1]); class colors match the satellite albedos
PALETTE = np.array(
    [
        [0.10, 0.10, 0.12],  # background
        [0.85, 0.85, 0.80],  # divider
        [0.75, 0.72, 0.35],  # ped_crossing
        [0.55, 0.28, 0.18],  # boundary
    ]
)


@dataclass
class MetricRow:
    scenario: str
    variant: str
    seed: int
    ap_div: float
    ap_ped: float
    ap_bou: float
    map: float
    config_hash: str = ""

    @classmethod
    def from_metrics(cls, scenario: str, variant: str, seed: int, metrics: dict,
                     config_hash: str = "") -> "MetricRow":
        return cls(scenario, variant, seed, metrics["AP_div"], metrics["AP_ped"],
                   metrics["AP_bou"], metrics["mAP"], config_hash)

    def csv_line(self) -> str:
        return (
            f"{self.scenario},{self.variant},{self.seed},"
            f"{self.ap_div:.6f},{self.ap_ped:.6f},{self.ap_bou:.6f},{self.map:.6f}"
        )


def write_csv(rows: list[MetricRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([CSV_HEADER] + [r.csv_line() for r in rows]) + "\n")


def write_json(rows: list[MetricRow], path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"rows": [asdict(r) for r in rows]}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    data["rows"] = [MetricRow(**r) for r in data.get("rows", [])]
    return data


# ---------------------------------------------------------------------------
# renders

def render_labels(labels: np.ndarray) -> np.ndarray:
    """Label grid to an RGB u8 panel."""
    return (PALETTE[labels] * 255.0).round().astype(np.uint8)


def render_prediction(prob_grid: np.ndarray) -> np.ndarray:
    """Argmax class render, same palette/rasterizer as the GT panel."""
    return render_labels(np.argmax(prob_grid, axis=0))


def render_patch(sat_served: np.ndarray) -> np.ndarray:
    """Served satellite crop, ego-aligned, as an RGB u8 panel."""
    aligned = align_to_ego(sat_served.astype(np.float64))
    return (np.clip(aligned, 0.0, 1.0).transpose(1, 2, 0) * 255.0).round().astype(np.uint8)


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def side_by_side(sample: Sample, prob_grid: np.ndarray) -> np.ndarray:
    """GT | prediction | satellite patch, heights matched by integer upscaling."""
    gt = render_labels(sample.labels)
    pred = render_prediction(prob_grid)
    patch = render_patch(sample.sat_patch)
    target_h = max(gt.shape[0], patch.shape[0])
    panels = []
    for img in (gt, pred, patch):
        f = max(1, target_h // img.shape[0])
        up = _upscale(img, f)
        pad = target_h - up.shape[0]
        if pad > 0:
            up = np.pad(up, ((0, pad), (0, 0), (0, 0)))
        panels.append(up)
    sep = np.full((target_h, 2, 3), 255, dtype=np.uint8)
    strip = [panels[0]]
    for panel in panels[1:]:
        strip += [sep, panel]
    return np.concatenate(strip, axis=1)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Binary P6 image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.astype(np.uint8).tobytes())
