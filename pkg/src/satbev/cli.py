"""Command-line harness.

Subcommands: gen-data, train, eval, ablate, perturb-study, report. Every
config key is exposed as a dotted flag (e.g. ``--fusion.kind concat_mlp``);
``--config FILE`` loads a key = value file first, flags override it. The
output root comes from --out or the SATBEV_OUT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import SCHEMA, ExperimentConfig
from .report import MetricRow, side_by_side, write_csv, write_json, write_ppm
from .studies import run_ablation, run_degradation_study, run_perturb_study
from .train import (
    checkpoint_path,
    ensure_dataset,
    evaluate,
    load_params,
    load_split,
    predict_sample,
    train,
)

OUT_ENV = "SATBEV_OUT"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or ./satbev-out)")
    p.add_argument("--config", default=None, help="key = value config file")
    for key in SCHEMA:
        p.add_argument(f"--{key}", dest=f"cfg:{key}", default=None, metavar="V")


def _build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.default()
    overrides = {
        name.split(":", 1)[1]: value
        for name, value in vars(args).items()
        if name.startswith("cfg:") and value is not None
    }
    return cfg.with_overrides(overrides)


def _out_root(args) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or "satbev-out"
    return Path(root)


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    for split in ("train", "eval"):
        path = ensure_dataset(cfg, out, split)
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    resume = Path(args.resume) if args.resume else None
    result = train(cfg, out, resume_from=resume, quiet=False)
    print(f"checkpoint: {result.checkpoint}")
    print(f"final loss: {result.losses[-1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg, out)
    params = load_params(cfg, ckpt)
    metrics = evaluate(params, cfg, load_split(cfg, out, "eval"))
    row = MetricRow.from_metrics(
        args.scenario, cfg["model.variant"], cfg["run.seed"], metrics, cfg.hash_hex()
    )
    print(",".join(["scenario", "variant", "seed", "AP_div", "AP_ped", "AP_bou", "mAP"]))
    print(row.csv_line())
    if args.json_out:
        write_json([row], args.json_out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    payload = run_ablation(cfg, out, seeds=seeds, workers=args.workers)
    print(json.dumps(payload["gates"], indent=2, sort_keys=True))
    return 0 if payload["gates"]["all_pass"] else 1


def cmd_perturb_study(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    ablation_path = Path(out) / "reports" / "ablation.json"
    if not ablation_path.exists():
        print("run `satbev ablate` first (reports/ablation.json missing)", file=sys.stderr)
        return 2
    ablation = json.loads(ablation_path.read_text())
    noise = run_perturb_study(cfg, out, ablation)
    degrade = run_degradation_study(cfg, out, ablation)
    print(json.dumps({"pose_noise": noise["gates"], "degradation": degrade["gates"]},
                     indent=2, sort_keys=True))
    ok = noise["gates"]["all_pass"] and degrade["gates"]["all_pass"]
    return 0 if ok else 1


def cmd_report(args) -> int:
    cfg = _build_config(args)
    out = _out_root(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg, out)
    params = load_params(cfg, ckpt)
    samples = load_split(cfg, out, "eval")[: args.count]
    render_dir = Path(out) / "reports" / "renders"
    rows = []
    preds_all, gts_all = [], []
    for i, sample in enumerate(samples):
        probs, preds = predict_sample(params, cfg, sample)
        write_ppm(render_dir / f"sample-{sample.seed}.ppm", side_by_side(sample, probs))
        preds_all.append(preds)
        gts_all.append([(cid, pts.astype(float)) for cid, pts in sample.instances])
    from .maphead import map_metric

    metrics = map_metric(preds_all, gts_all, cfg.ap_config())
    rows.append(MetricRow.from_metrics("report", cfg["model.variant"], cfg["run.seed"],
                                       metrics, cfg.hash_hex()))
    write_csv(rows, Path(out) / "reports" / "report.csv")
    write_json(rows, Path(out) / "reports" / "report.json")
    print(f"renders: {render_dir} ({len(samples)} samples)")
    print(rows[0].csv_line())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="satbev",
                                     description="satellite-enhanced BEV map construction harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the train/eval dataset files")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenario", default="normal")
    p.add_argument("--json-out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="variant x fusion ablation over seeds")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("perturb-study", help="pose-noise grid and degradation robustness")
    _add_common(p)
    p.set_defaults(fn=cmd_perturb_study)

    p = sub.add_parser("report", help="metric tables and side-by-side renders")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
