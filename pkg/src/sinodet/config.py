"""Run configuration: one JSON document covering geometry, phantom
generation, both networks, sampling, training and evaluation.

Unknown keys are rejected so typos fail loudly.  Three named profiles
ship as starting points: ``full`` (full-scale defaults), ``desk``
(small grids that train in minutes on one core) and ``tiny`` (the
smallest end-to-end exercise of the whole chain).
"""

from __future__ import annotations

import copy
import json

from .geometry import FanbeamGeometry, ImageGrid


class ConfigError(ValueError):
    pass


FULL_PROFILE = {
    "geometry": {
        "n_views": 144,
        "n_channels": 736,
        "channel_arc_width": 1.2858,
        "row_height": 2.0,
        "dist_source_center": 595.0,
        "dist_source_detector": 1086.5,
        "auto_channels": False,
    },
    "phantom": {
        "extents": [256, 256, 64],
        "spacing": [1.2, 1.2, 2.0],
        "nodule_count": [2, 5],
        "diameter_range": [6.0, 16.0],
        "vessel_count": 12,
        "small_marker_count": 3,
        "n_train": 20,
        "n_test": 6,
    },
    "recon": {"n_iters": 5, "hidden": 32},
    "detector": {
        "patch_shape": [32, 32, 16],
        "stage_channels": [32, 64, 128],
        "head_channels": 256,
    },
    "sampling": {
        "n_lung": 400,
        "n_edge": 100,
        "per_nonnodule": 5,
        "pos_aug": 20,
        "translate_mm": 8.0,
        "margin_mm": 64.0,
    },
    "train": {
        "seed": 0,
        "stage1": {"epochs": 1, "samples_per_scan": 50, "lr": 1e-4},
        "stage2": {"epochs": 10, "minibatch": 50, "lr": 1e-4},
        "stage3": {"epochs": 1, "lr": 1e-4},
    },
    "eval": {
        "step_mm": 4.0,
        "iou_threshold": 0.5,
        "n_boot": 1000,
        "noise_levels": [None, 1e5, 5e4],
        "seed": 0,
    },
}

DESK_PROFILE = {
    "geometry": {
        "n_views": 48,
        "n_channels": None,
        "channel_arc_width": 1.2858,
        "row_height": 4.0,
        "dist_source_center": 595.0,
        "dist_source_detector": 1086.5,
        "auto_channels": True,
    },
    "phantom": {
        "extents": [48, 48, 16],
        "spacing": [4.0, 4.0, 4.0],
        "nodule_count": [2, 4],
        "diameter_range": [8.0, 16.0],
        "vessel_count": 8,
        "small_marker_count": 2,
        "n_train": 20,
        "n_test": 6,
    },
    "recon": {"n_iters": 2, "hidden": 16},
    "detector": {
        "patch_shape": [12, 12, 6],
        "stage_channels": [8, 16, 32],
        "head_channels": 64,
    },
    "sampling": {
        "n_lung": 40,
        "n_edge": 10,
        "per_nonnodule": 2,
        "pos_aug": 8,
        "translate_mm": 8.0,
        "margin_mm": 24.0,
    },
    "train": {
        "seed": 0,
        "stage1": {"epochs": 1, "samples_per_scan": 50, "lr": 1e-4},
        "stage2": {"epochs": 10, "minibatch": 50, "lr": 1e-3},
        "stage3": {"epochs": 1, "lr": 1e-4},
    },
    "eval": {
        "step_mm": 8.0,
        "iou_threshold": 0.5,
        "n_boot": 1000,
        "noise_levels": [None, 1e5, 5e4],
        "seed": 0,
    },
}

TINY_PROFILE = {
    "geometry": {
        "n_views": 72,
        "n_channels": None,
        "channel_arc_width": 1.2858,
        "row_height": 2.0,
        "dist_source_center": 595.0,
        "dist_source_detector": 1086.5,
        "auto_channels": True,
    },
    "phantom": {
        "extents": [128, 128, 32],
        "spacing": [1.5, 1.5, 2.0],
        "nodule_count": [2, 4],
        "diameter_range": [8.0, 16.0],
        "vessel_count": 8,
        "small_marker_count": 2,
        "n_train": 4,
        "n_test": 2,
    },
    "recon": {"n_iters": 2, "hidden": 8},
    "detector": {
        "patch_shape": [32, 32, 16],
        "stage_channels": [8, 16, 32],
        "head_channels": 64,
    },
    "sampling": {
        "n_lung": 30,
        "n_edge": 10,
        "per_nonnodule": 2,
        "pos_aug": 5,
        "translate_mm": 8.0,
        "margin_mm": 48.0,
    },
    "train": {
        "seed": 0,
        "stage1": {"epochs": 1, "samples_per_scan": 10, "lr": 1e-4},
        "stage2": {"epochs": 3, "minibatch": 50, "lr": 1e-3},
        "stage3": {"epochs": 1, "lr": 1e-4},
    },
    "eval": {
        "step_mm": 8.0,
        "iou_threshold": 0.5,
        "n_boot": 1000,
        "noise_levels": [None, 1e5, 5e4],
        "seed": 0,
    },
}

PROFILES = {"full": FULL_PROFILE, "desk": DESK_PROFILE, "tiny": TINY_PROFILE}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {here!r} must be a mapping")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


class RunConfig:
    """Resolved configuration document."""

    def __init__(self, doc: dict):
        self.doc = doc

    @classmethod
    def from_profile(cls, profile="desk", overrides=None) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {profile!r}, expected one of {sorted(PROFILES)}")
        doc = copy.deepcopy(PROFILES[profile])
        if overrides:
            doc = _merge(doc, overrides)
        return cls(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        profile = raw.pop("profile", "desk")
        return cls.from_profile(profile, raw)

    def dump(self, path):
        from .io import _atomic_write
        payload = json.dumps(self.doc, indent=2, sort_keys=True).encode() + b"\n"
        _atomic_write(path, payload)

    def __getitem__(self, key):
        return self.doc[key]

    # -- derived objects ------------------------------------------------------

    def grid(self) -> ImageGrid:
        ph = self.doc["phantom"]
        return ImageGrid(ph["extents"][0], ph["extents"][1],
                         ph["spacing"][0], ph["spacing"][1])

    def geometry(self) -> FanbeamGeometry:
        g = self.doc["geometry"]
        base = FanbeamGeometry(
            n_views=g["n_views"],
            n_channels=g["n_channels"] or 1,
            channel_arc_width=g["channel_arc_width"],
            row_height=g["row_height"],
            dist_source_center=g["dist_source_center"],
            dist_source_detector=g["dist_source_detector"],
        )
        if g["auto_channels"]:
            from .projector import geometry_for_grid
            return geometry_for_grid(self.grid(), n_views=g["n_views"], base=base)
        return base

    def patch_shape(self) -> tuple:
        return tuple(self.doc["detector"]["patch_shape"])
