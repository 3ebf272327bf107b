"""Ablation and robustness studies with trend-level gates.

The ablation crosses model variants with fusion kinds over several run seeds
and checks the orderings: full gated refinement beats the plain-conv variant,
which beats unrefined satellite features, which beat BEV-only; sum and concat
fusion track each other and both beat patch cross-attention. The robustness
studies compare degradation and pose-noise drops between the fused model and
the BEV-only baseline.
"""

from __future__ import annotations

import json
import multiprocessing as mp
from pathlib import Path

import numpy as np

from . import world
from .config import ExperimentConfig
from .dataset import Sample
from .geo import crop_patch_image, perturb_pose
from .maphead import map_metric, vectorize
from .model import forward_sample
from .report import MetricRow, write_csv, write_json
from .train import ensure_dataset, evaluate, load_params, load_split, train

SIGMA_T_GRID = (0.0, 0.05, 0.1, 0.2)
SIGMA_R_GRID = (0.0, 0.005, 0.01, 0.02)
DEGRADE_KINDS = ("fog", "snow", "frame_lost", "camera_crash", "low_light")


def ablation_cells() -> list[tuple[str, str]]:
    """(variant, fusion) grid; the BEV-only baseline ignores fusion."""
    cells = [("bev_only", "sum_mlp")]
    for variant in ("no_refine", "gfr_star", "gfr_full"):
        for kind in ("sum_mlp", "concat_mlp", "patch_cross_attention"):
            cells.append((variant, kind))
    return cells


def cell_config(base: ExperimentConfig, variant: str, fusion_kind: str,
                seed: int) -> ExperimentConfig:
    return base.with_overrides({
        "model.variant": variant,
        "fusion.kind": fusion_kind,
        "run.seed": str(seed),
    })


def _run_cell(args: tuple[str, str, str, int, str]) -> dict:
    base_text, variant, fusion_kind, seed, out_root = args
    cfg = cell_config(ExperimentConfig.from_text(base_text), variant, fusion_kind, seed)
    result = train(cfg, out_root)
    metrics = evaluate(result.params, cfg, load_split(cfg, Path(out_root), "eval"))
    return {
        "variant": variant,
        "fusion": fusion_kind,
        "seed": seed,
        "metrics": metrics,
        "checkpoint": str(result.checkpoint),
        "config_hash": cfg.hash_hex(),
        "final_loss": result.losses[-1],
    }


def _mean_map(rows: list[dict], variant: str, fusion: str) -> float:
    vals = [r["metrics"]["mAP"] for r in rows if r["variant"] == variant and r["fusion"] == fusion]
    return float(np.mean(vals))


def ablation_gates(rows: list[dict]) -> dict:
    """Ordering gates on mean mAP (refinement at sum fusion, fusion at full
    refinement)."""
    m = {
        "bev_only": _mean_map(rows, "bev_only", "sum_mlp"),
        "no_refine": _mean_map(rows, "no_refine", "sum_mlp"),
        "gfr_star": _mean_map(rows, "gfr_star", "sum_mlp"),
        "gfr_full": _mean_map(rows, "gfr_full", "sum_mlp"),
        "fusion_sum": _mean_map(rows, "gfr_full", "sum_mlp"),
        "fusion_concat": _mean_map(rows, "gfr_full", "concat_mlp"),
        "fusion_patchca": _mean_map(rows, "gfr_full", "patch_cross_attention"),
    }
    margin = 0.5 / 100.0  # mAP points on the [0, 1] scale
    gates = {
        "means": m,
        "refine_ordering": (
            m["gfr_full"] >= m["gfr_star"] + margin
            and m["gfr_star"] >= m["no_refine"] + margin
            and m["no_refine"] >= m["bev_only"] + margin
        ),
        "sum_concat_within_2": abs(m["fusion_sum"] - m["fusion_concat"]) <= 2.0 / 100.0,
        "both_beat_patchca_by_2": (
            m["fusion_sum"] >= m["fusion_patchca"] + 2.0 / 100.0
            and m["fusion_concat"] >= m["fusion_patchca"] + 2.0 / 100.0
        ),
    }
    gates["all_pass"] = bool(
        gates["refine_ordering"] and gates["sum_concat_within_2"] and gates["both_beat_patchca_by_2"]
    )
    return gates


def run_ablation(base: ExperimentConfig, out_root: str | Path,
                 seeds: tuple[int, ...] = (0, 1, 2), workers: int = 2) -> dict:
    """Trains and evaluates every (variant, fusion, seed) cell; writes
    reports/ablation.{json,csv} and returns the summary."""
    out_root = Path(out_root)
    ensure_dataset(base, out_root, "train")
    ensure_dataset(base, out_root, "eval")
    jobs = [
        (base.text(), variant, fusion_kind, seed, str(out_root))
        for variant, fusion_kind in ablation_cells()
        for seed in seeds
    ]
    if workers > 1:
        with mp.get_context("spawn").Pool(workers) as pool:
            rows = pool.map(_run_cell, jobs)
    else:
        rows = [_run_cell(j) for j in jobs]

    gates = ablation_gates(rows)
    summary = {}
    for variant, fusion_kind in ablation_cells():
        vals = [r["metrics"]["mAP"] for r in rows
                if r["variant"] == variant and r["fusion"] == fusion_kind]
        summary[f"{variant}/{fusion_kind}"] = {
            "mean_mAP": float(np.mean(vals)),
            "std_mAP": float(np.std(vals)),
            "n": len(vals),
        }

    payload = {"rows": rows, "summary": summary, "gates": gates, "seeds": list(seeds)}
    report_dir = out_root / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    csv_rows = [
        MetricRow.from_metrics("ablation", f"{r['variant']}+{r['fusion']}", r["seed"],
                               r["metrics"], r["config_hash"])
        for r in rows
    ]
    write_csv(csv_rows, report_dir / "ablation.csv")
    return payload


# ---------------------------------------------------------------------------
# degradation robustness

def run_degradation_study(base: ExperimentConfig, out_root: str | Path,
                          ablation: dict, severity: float = 0.5) -> dict:
    """Evaluates the fused (gfr_full+sum) and BEV-only checkpoints from an
    ablation run under every adverse scenario; gates on relative drops."""
    out_root = Path(out_root)
    rows_out: list[dict] = []
    csv_rows: list[MetricRow] = []
    drops: dict[str, dict[str, float]] = {}

    for label, variant, fusion_kind in (
        ("fused", "gfr_full", "sum_mlp"),
        ("bev_only", "bev_only", "sum_mlp"),
    ):
        cell_rows = [r for r in ablation["rows"]
                     if r["variant"] == variant and r["fusion"] == fusion_kind]
        clean_mean = float(np.mean([r["metrics"]["mAP"] for r in cell_rows]))
        drops[label] = {"normal": clean_mean}
        for kind in DEGRADE_KINDS:
            maps = []
            for r in cell_rows:
                cfg = cell_config(base, variant, fusion_kind, r["seed"]).with_overrides({
                    "degrade.kind": kind,
                    "degrade.severity": str(severity),
                })
                params = load_params(cell_config(base, variant, fusion_kind, r["seed"]),
                                     Path(r["checkpoint"]))
                metrics = evaluate(params, cfg, load_split(cfg, out_root, "eval"))
                maps.append(metrics["mAP"])
                rows_out.append({"scenario": kind, "model": label, "seed": r["seed"],
                                 "metrics": metrics})
                csv_rows.append(MetricRow.from_metrics(kind, f"{variant}+{fusion_kind}",
                                                       r["seed"], metrics, cfg.hash_hex()))
            mean = float(np.mean(maps))
            drops[label][kind] = mean

    gates = {}
    for kind in DEGRADE_KINDS:
        fused_drop = (drops["fused"]["normal"] - drops["fused"][kind]) / max(drops["fused"]["normal"], 1e-12)
        bev_drop = (drops["bev_only"]["normal"] - drops["bev_only"][kind]) / max(drops["bev_only"]["normal"], 1e-12)
        gates[kind] = {
            "fused_rel_drop": fused_drop,
            "bev_rel_drop": bev_drop,
            "fused_smaller": bool(fused_drop < bev_drop),
        }
    gates["all_pass"] = all(g["fused_smaller"] for g in gates.values() if isinstance(g, dict))

    payload = {"rows": rows_out, "means": drops, "gates": gates, "severity": severity}
    report_dir = out_root / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "degradation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_csv(csv_rows, report_dir / "degradation.csv")
    return payload


# ---------------------------------------------------------------------------
# pose-noise robustness

def _grid_eval(params, cfg: ExperimentConfig, samples: list[Sample]) -> dict[tuple, float]:
    """mAP per (sigma_t, sigma_r) grid point; each sample's tile is rendered
    once and re-cropped for every perturbed pose."""
    grid = [(st, sr) for sr in SIGMA_R_GRID for st in SIGMA_T_GRID]
    preds: dict[tuple, list] = {g: [] for g in grid}
    gts = []
    geom = cfg.geometry()
    for sample in samples:
        gts.append([(cid, pts.astype(np.float64)) for cid, pts in sample.instances])
        scene = world.gen_scene(sample.seed)
        tile = world.render_satellite(scene, cfg.tile_config())
        for st, sr in grid:
            if st == 0.0 and sr == 0.0:
                served = None
            else:
                rng = np.random.default_rng(
                    [0x9E16, int(st * 1e6), int(sr * 1e6), sample.seed]
                )
                pose = perturb_pose(sample.pose, st, sr, rng)
                served = crop_patch_image(tile, pose, sample.patch_spec)
            probs = forward_sample(params, cfg, sample, sat_served=served)
            preds[(st, sr)].append(
                vectorize(probs.data, geom, cfg["eval.min_prob"], cfg["eval.min_cells"])
            )
    return {g: map_metric(preds[g], gts, cfg.ap_config()) for g in grid}


def run_perturb_study(base: ExperimentConfig, out_root: str | Path, ablation: dict) -> dict:
    """Pose-noise grid for the fused model vs the noise-free BEV-only mean."""
    out_root = Path(out_root)
    fused_rows = [r for r in ablation["rows"]
                  if r["variant"] == "gfr_full" and r["fusion"] == "sum_mlp"]
    bev_rows = [r for r in ablation["rows"]
                if r["variant"] == "bev_only" and r["fusion"] == "sum_mlp"]
    bev_clean = float(np.mean([r["metrics"]["mAP"] for r in bev_rows]))

    per_seed: dict[tuple, list[dict]] = {}
    csv_rows: list[MetricRow] = []
    for r in fused_rows:
        cfg = cell_config(base, "gfr_full", "sum_mlp", r["seed"])
        params = load_params(cfg, Path(r["checkpoint"]))
        samples = load_split(cfg, out_root, "eval")
        grid = _grid_eval(params, cfg, samples)
        for g, metrics in grid.items():
            per_seed.setdefault(g, []).append(metrics)
            csv_rows.append(MetricRow.from_metrics(
                f"noise_t{g[0]}_r{g[1]}", "gfr_full+sum_mlp", r["seed"], metrics,
                cfg.hash_hex()))

    table = {
        f"{st}|{sr}": float(np.mean([m["mAP"] for m in ms]))
        for (st, sr), ms in per_seed.items()
    }
    clean = table["0.0|0.0"]
    mid = table["0.1|0.01"]
    extreme = table["0.2|0.02"]
    gates = {
        "clean_mAP": clean,
        "mid_rel_drop": (clean - mid) / max(clean, 1e-12),
        "mid_drop_under_5pct": bool((clean - mid) / max(clean, 1e-12) < 0.05),
        "extreme_mAP": extreme,
        "bev_only_clean_mAP": bev_clean,
        "extreme_beats_bev_only": bool(extreme > bev_clean),
    }
    gates["all_pass"] = gates["mid_drop_under_5pct"] and gates["extreme_beats_bev_only"]

    payload = {
        "grid_mAP": table,
        "sigma_t": list(SIGMA_T_GRID),
        "sigma_r": list(SIGMA_R_GRID),
        "gates": gates,
        "seeds": [r["seed"] for r in fused_rows],
    }
    report_dir = out_root / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "pose_noise.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_csv(csv_rows, report_dir / "pose_noise.csv")
    return payload
