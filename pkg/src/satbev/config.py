"""Experiment configuration: a flat dotted-key schema with a diff-friendly
``key = value`` text format, CLI-overridable values, and a stable 64-bit hash
recorded in every artifact."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .fusion import FUSION_KINDS, FusionVariant
from .geo import GridGeometry, PatchSpec
from .maphead import ApConfig
from .satnet import ChannelPlan, GatedCnnConfig
from .world import DEGRADATION_KINDS, DegradationSpec, TileConfig

MODEL_VARIANTS = ("bev_only", "no_refine", "gfr_star", "gfr_full")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(","))


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(","))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _choice(options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


# key -> (parser from string, default)
SCHEMA: dict[str, tuple] = {
    "grid.range_forward": (float, 60.0),
    "grid.range_lateral": (float, 30.0),
    "grid.h": (int, 100),
    "grid.w": (int, 50),
    "patch.h": (int, 224),
    "patch.w": (int, 96),
    "tile.resolution": (float, 0.3),
    "tile.margin": (float, 25.0),
    "plan.widths": (_parse_ints, (12, 12, 24, 48, 96)),
    "plan.c": (int, 24),
    "gated.gamma": (str, "8/3"),
    "gated.alpha": (str, "1"),
    "gated.local_kernel": (int, 3),
    "model.variant": (_choice(MODEL_VARIANTS), "gfr_full"),
    "fusion.kind": (_choice(FUSION_KINDS), "sum_mlp"),
    "fusion.patch_size": (int, 5),
    "data.seed": (int, 9000),
    "data.train": (int, 500),
    "data.eval": (int, 100),
    "degrade.kind": (_choice(DEGRADATION_KINDS), "none"),
    "degrade.severity": (float, 0.0),
    "degrade.seed": (int, 0),
    "noise.sigma_t": (float, 0.0),
    "noise.sigma_r": (float, 0.0),
    "noise.seed": (int, 0),
    "opt.lr0": (float, 2e-4),
    "opt.lr_floor": (float, 2e-6),
    "opt.steps": (int, 3000),
    "opt.warmup": (int, 0),
    "opt.batch": (int, 4),
    "opt.weight_decay": (float, 0.01),
    "eval.thresholds": (_parse_floats, (0.5, 1.0, 1.5)),
    "eval.resample_n": (int, 20),
    "eval.min_prob": (float, 0.5),
    "eval.min_cells": (int, 4),
    "train.log_every": (int, 50),
    "run.seed": (int, 0),
}


@dataclass
class ExperimentConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        for key, (_parser, default) in SCHEMA.items():
            self.values.setdefault(key, default)

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls({})

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise KeyError(f"config line {lineno}: unknown key {key!r}")
            values[key] = SCHEMA[key][0](val.strip())
        return cls(values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """New config with string overrides parsed per schema."""
        values = dict(self.values)
        for key, val in overrides.items():
            if key not in SCHEMA:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = SCHEMA[key][0](val) if isinstance(val, str) else val
        return ExperimentConfig(values)

    def text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def hash64(self) -> int:
        digest = hashlib.sha256(self.text().encode()).digest()
        return int.from_bytes(digest[:8], "big")

    def hash_hex(self) -> str:
        return f"{self.hash64():016x}"

    # ---- derived objects -------------------------------------------------

    def geometry(self) -> GridGeometry:
        return GridGeometry(self["grid.range_forward"], self["grid.range_lateral"],
                            self["grid.h"], self["grid.w"])

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self["grid.range_forward"], self["grid.range_lateral"],
                         self["patch.h"], self["patch.w"])

    def tile_config(self) -> TileConfig:
        return TileConfig(self["tile.resolution"], self["tile.margin"])

    def channel_plan(self) -> ChannelPlan:
        return ChannelPlan(tuple(self["plan.widths"]), self["plan.c"])

    def gated_config(self) -> GatedCnnConfig:
        return GatedCnnConfig(Fraction(self["gated.gamma"]), Fraction(self["gated.alpha"]),
                              self["gated.local_kernel"])

    def fusion_variant(self) -> FusionVariant:
        return FusionVariant(self["fusion.kind"], self["fusion.patch_size"])

    def degradation(self) -> DegradationSpec:
        return DegradationSpec(self["degrade.kind"], self["degrade.severity"],
                               self["degrade.seed"])

    def ap_config(self) -> ApConfig:
        return ApConfig(tuple(self["eval.thresholds"]), self["eval.resample_n"])
