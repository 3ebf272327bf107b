"""Training and evaluation loops.

A run is a pure function of (config, run seed): batch order, parameter init,
and all data are seeded, and BLAS is pinned to one thread, so repeated runs
produce bitwise-identical loss traces, checkpoints, and reports. Checkpoint
saves round the live state through f32 (see checkpoint module), which keeps
resumed trajectories bitwise equal to uninterrupted ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import maphead, model, world
from .checkpoint import load_checkpoint, quantize_inplace, restore_into, save_checkpoint
from .config import ExperimentConfig
from .dataset import Sample, generate_split, read_dataset, write_dataset
from .geo import crop_patch_image, perturb_pose
from .maphead import class_weights_from_counts, cross_entropy_loss, vectorize
from .optim import AdamWState, adamw_step, lr_at, scale_grads, zero_grads
from .tensor import Tape, Tensor

EVAL_SEED_OFFSET = 100_000


# ---------------------------------------------------------------------------
# datasets

def _data_tag(cfg: ExperimentConfig, split: str) -> str:
    keys = [k for k in cfg.values if k.startswith(("grid.", "patch.", "tile.", "data."))]
    text = "".join(f"{k}={cfg[k]!r};" for k in sorted(keys))
    import hashlib

    return f"{split}-{hashlib.sha256(text.encode()).hexdigest()[:12]}"


def ensure_dataset(cfg: ExperimentConfig, out_root: Path, split: str) -> Path:
    """Generate the split file if missing; returns its path."""
    path = Path(out_root) / "data" / f"{_data_tag(cfg, split)}.sfl"
    if path.exists():
        return path
    if split == "train":
        base, count = cfg["data.seed"], cfg["data.train"]
    elif split == "eval":
        base, count = cfg["data.seed"] + EVAL_SEED_OFFSET, cfg["data.eval"]
    else:
        raise ValueError(f"unknown split {split!r}")
    samples = generate_split(base, count, cfg.geometry(), cfg.patch_spec(), cfg.tile_config())
    tmp = path.with_suffix(".tmp")
    write_dataset(samples, tmp)
    tmp.replace(path)
    return path


def load_split(cfg: ExperimentConfig, out_root: Path, split: str) -> list[Sample]:
    return read_dataset(ensure_dataset(cfg, out_root, split))


def label_counts(samples: list[Sample]) -> np.ndarray:
    counts = np.zeros(maphead.N_CLASSES, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels.reshape(-1), minlength=maphead.N_CLASSES)
    return counts


# ---------------------------------------------------------------------------
# batching

def batch_indices(seed: int, step: int, batch: int, n: int) -> list[int]:
    """Pure function of (seed, step): per-epoch shuffles consumed in order."""
    out = []
    for k in range(batch):
        g = step * batch + k
        epoch, pos = divmod(g, n)
        perm = np.random.default_rng([0xBA7C, seed, epoch]).permutation(n)
        out.append(int(perm[pos]))
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    cfg: ExperimentConfig
    params: dict[str, Tensor]
    state: AdamWState
    losses: list[float]
    checkpoint: Path
    class_weights: np.ndarray


def _loss_for_sample(params, cfg, sample, weights) -> Tensor:
    logits = model.forward_logits(params, cfg, sample)
    return cross_entropy_loss(logits, sample.labels, weights)


def checkpoint_path(cfg: ExperimentConfig, out_root: Path) -> Path:
    return Path(out_root) / "checkpoints" / f"{cfg.hash_hex()}.sfck"


def train(cfg: ExperimentConfig, out_root: str | Path, resume_from: Path | None = None,
          save_at: int | None = None, quiet: bool = True) -> TrainResult:
    out_root = Path(out_root)
    train_samples = load_split(cfg, out_root, "train")
    weights = class_weights_from_counts(label_counts(train_samples))

    params = model.build_params(cfg)
    state = AdamWState.for_params(params)
    start_step = 0
    if resume_from is not None:
        tensors, start_step, cfg_hash = load_checkpoint(resume_from)
        if cfg_hash != cfg.hash64():
            raise ValueError(
                f"checkpoint config hash {cfg_hash:#x} does not match config {cfg.hash64():#x}"
            )
        restore_into(tensors, params, state)
        state.step = start_step

    total = cfg["opt.steps"]
    batch = cfg["opt.batch"]
    losses: list[float] = []
    log_path = out_root / "logs" / f"train-{cfg.hash_hex()}.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if resume_from is not None else "w"
    t0 = time.perf_counter()
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,loss,lr\n")
        for step in range(start_step, total):
            zero_grads(params)
            batch_loss = 0.0
            for idx in batch_indices(cfg["run.seed"], step, batch, len(train_samples)):
                sample = train_samples[idx]
                with Tape() as tape:
                    loss = _loss_for_sample(params, cfg, sample, weights)
                    tape.backward(loss)
                batch_loss += loss.item()
            scale_grads(params, 1.0 / batch)
            lr = lr_at(step, total, cfg["opt.lr0"], cfg["opt.lr_floor"], cfg["opt.warmup"])
            adamw_step(params, state, lr, cfg["opt.weight_decay"])
            batch_loss /= batch
            losses.append(batch_loss)
            log.write(f"{step},{batch_loss!r},{lr!r}\n")
            if not quiet and (step % cfg["train.log_every"] == 0 or step == total - 1):
                rate = (step - start_step + 1) / (time.perf_counter() - t0)
                print(f"step {step}/{total} loss {batch_loss:.4f} lr {lr:.2e} ({rate:.2f} it/s)")
            if save_at is not None and step + 1 == save_at:
                quantize_inplace(params, state)
                save_checkpoint(checkpoint_path(cfg, out_root).with_suffix(f".s{save_at}.sfck"),
                                params, step + 1, cfg.hash64(), state)

    quantize_inplace(params, state)
    ckpt = checkpoint_path(cfg, out_root)
    save_checkpoint(ckpt, params, total, cfg.hash64(), state)
    return TrainResult(cfg, params, state, losses, ckpt, weights)


def load_params(cfg: ExperimentConfig, ckpt_path: Path) -> dict[str, Tensor]:
    tensors, _step, cfg_hash = load_checkpoint(ckpt_path)
    if cfg_hash != cfg.hash64():
        raise ValueError("checkpoint/config hash mismatch")
    params = model.build_params(cfg)
    state = AdamWState.for_params(params)
    restore_into(tensors, params, state)
    return params


# ---------------------------------------------------------------------------
# evaluation

def _degraded_obs(cfg: ExperimentConfig, sample: Sample) -> np.ndarray:
    obs = sample.ego_obs.astype(np.float64)
    spec = cfg.degradation()
    if spec.kind == "none":
        return obs
    rng = np.random.default_rng([0xE7A1, spec.rng_seed, sample.seed])
    return world.apply_degradation(obs, cfg.geometry(), spec, rng)


def _noisy_sat(cfg: ExperimentConfig, sample: Sample) -> np.ndarray | None:
    sigma_t, sigma_r = cfg["noise.sigma_t"], cfg["noise.sigma_r"]
    if sigma_t == 0.0 and sigma_r == 0.0:
        return None
    scene = world.gen_scene(sample.seed)
    tile = world.render_satellite(scene, cfg.tile_config())
    rng = np.random.default_rng([0x9E16, cfg["noise.seed"], sample.seed])
    pose = perturb_pose(sample.pose, sigma_t, sigma_r, rng)
    return crop_patch_image(tile, pose, sample.patch_spec)


def predict_sample(params, cfg: ExperimentConfig, sample: Sample,
                   sat_served: np.ndarray | None = None) -> tuple[np.ndarray, list]:
    """Probability grid and vectorized predictions under the configured
    perturbations (observations only; GT untouched)."""
    obs = _degraded_obs(cfg, sample)
    if sat_served is None:
        sat_served = _noisy_sat(cfg, sample)
    probs = model.forward_sample(params, cfg, sample, obs=obs, sat_served=sat_served)
    preds = vectorize(probs.data, cfg.geometry(), cfg["eval.min_prob"], cfg["eval.min_cells"])
    return probs.data, preds


def evaluate(params, cfg: ExperimentConfig, samples: list[Sample]) -> dict[str, float]:
    """Metric over a split with the config's degradation/pose-noise applied."""
    preds_by_sample = []
    gts_by_sample = []
    for sample in samples:
        _probs, preds = predict_sample(params, cfg, sample)
        preds_by_sample.append(preds)
        gts_by_sample.append([(cid, pts.astype(np.float64)) for cid, pts in sample.instances])
    return maphead.map_metric(preds_by_sample, gts_by_sample, cfg.ap_config())
