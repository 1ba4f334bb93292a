"""Merged run configuration: desk-scale defaults, YAML config file and
``--key value`` command-line overrides, hashed into every output artifact."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .core import ModelConfig, TrainConfig
from .datasynth import OrganSpec, PhantomSpec, TumorSpec, default_phantom_spec
from .errors import ConfigError


def _phantom_defaults() -> dict:
    spec = default_phantom_spec()
    return {
        "grid": list(spec.grid),
        "center_jitter": spec.center_jitter,
        "radius_jitter": spec.radius_jitter,
        "noise_sd": spec.noise_sd,
        "background_mean": spec.background_mean,
        "spacing_mm": list(spec.spacing_mm),
        "organs": [
            {
                "name": o.name,
                "center": list(o.center),
                "radii": list(o.radii),
                "intensity_mean": o.intensity_mean,
                "intensity_sd": o.intensity_sd,
            }
            for o in spec.organ_specs
        ],
        "tumors": [
            {
                "name": t.name,
                "host_organ": t.host_organ,
                "radius_range": list(t.radius_range),
                "intensity_offset": t.intensity_offset,
                "presence_prob": t.presence_prob,
            }
            for t in spec.tumor_specs
        ],
    }


def default_config() -> dict:
    """Desk-scale defaults; paper-scale values stay reachable by override."""
    return {
        "model": {
            "L": 4,
            "C_tok": 16,
            "d_text": 64,
            "encoder_widths": [8, 16, 32, 64],
            "router_hidden": 64,
            "head_channels": [8, 8, 1],
            "K_active": None,
            "topk_inference_only": False,
        },
        "train": {
            "lr": 2e-3,
            "weight_decay": 1e-5,
            "beta1": 0.9,
            "epochs": 12,
            "warmup_fraction": 0.1,
            "patch": [32, 32, 32],
            "seed": 0,
            "batch_size": 1,
            "checkpoint_every": 1,
        },
        "data": {
            "n_train": 40,
            "n_eval": 10,
            "n_datasets": 3,
            "annotation_plan": [[0, 4], [1, 2, 5], [0, 1, 3]],
            "phantom": _phantom_defaults(),
        },
        "preprocess": {"target_spacing": 1.5, "window": [-175.0, 250.0]},
        "eval": {"overlap": 0.25, "threshold": 0.5, "min_voxels": 8},
        "embedding": {"provider": "stub", "file": None},
        "workers": 1,
    }


def _deep_merge(base: dict, extra: dict, path: str = "") -> None:
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def load_config(path: str | Path | None, overrides: list[tuple[str, str]] | None = None) -> dict:
    """Defaults, then the YAML file, then dotted-key overrides."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        _deep_merge(cfg, loaded)
    for dotted, raw in overrides or []:
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {dotted}={raw!r}: {exc}") from exc
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        L=m["L"],
        C_tok=m["C_tok"],
        d_text=m["d_text"],
        encoder_widths=tuple(m["encoder_widths"]) if m["encoder_widths"] else (),
        router_hidden=m["router_hidden"],
        head_channels=tuple(m["head_channels"]),
        K_active=m["K_active"],
        topk_inference_only=m["topk_inference_only"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def phantom_spec(cfg: dict) -> PhantomSpec:
    d = cfg["data"]["phantom"]
    return PhantomSpec(
        grid=tuple(d["grid"]),
        organ_specs=tuple(
            OrganSpec(
                name=o["name"],
                center=tuple(o["center"]),
                radii=tuple(o["radii"]),
                intensity_mean=o["intensity_mean"],
                intensity_sd=o["intensity_sd"],
            )
            for o in d["organs"]
        ),
        tumor_specs=tuple(
            TumorSpec(
                name=t["name"],
                host_organ=t["host_organ"],
                radius_range=tuple(t["radius_range"]),
                intensity_offset=t["intensity_offset"],
                presence_prob=t.get("presence_prob", 0.7),
            )
            for t in d["tumors"]
        ),
        center_jitter=d["center_jitter"],
        radius_jitter=d["radius_jitter"],
        noise_sd=d["noise_sd"],
        background_mean=d["background_mean"],
        spacing_mm=tuple(d["spacing_mm"]),
    )
