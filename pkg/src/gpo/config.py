"""Flat key=value run configuration with defaults, file and override layers.

Precedence: built-in defaults < config file < ``--set`` overrides. The fully
resolved configuration is echoed into run metadata so a run is reproducible
from its artifacts alone.
"""

from __future__ import annotations

import hashlib

from .coarse import RansacConfig
from .loss import LossWeights
from .nodes import RadiusConfig
from .optim import OptimConfig, PipelineConfig, PreprocConfig
from .synth import SynthConfig


class UsageError(ValueError):
    """Bad command line, config key or value; maps to exit status 2."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


# key -> (default, caster, constraint, constraint description)
_SCHEMA = {
    "run.seed": (0, int, lambda v: True, ""),
    "run.mode": ("gcn", str, lambda v: v in ("dcn", "gcn"), "must be dcn or gcn"),
    "preproc.blur_sigma": (1.0, float, lambda v: v >= 0, "must be >= 0"),
    "preproc.resize_w": (1024, int, lambda v: v >= 0, "must be >= 0 (0 keeps native size)"),
    "preproc.resize_h": (1024, int, lambda v: v >= 0, "must be >= 0 (0 keeps native size)"),
    "coarse.ransac_iters": (2000, int, lambda v: v >= 1, "must be >= 1"),
    "coarse.ransac_thresh_px": (3.0, float, lambda v: v > 0, "must be > 0"),
    "coarse.min_inliers": (0, int, lambda v: v >= 0,
                           "must be >= 0 (0 -> max(10, 30% of pairs))"),
    "coarse.affine_fallback": (True, _parse_bool, lambda v: True, ""),
    "nodes.r_min": (8.0, float, lambda v: v >= 0, "must be >= 0"),
    "nodes.r_max": (256.0, float, lambda v: v > 0, "must be > 0"),
    "nodes.count": (1000, int, lambda v: v >= 1, "must be >= 1"),
    "nodes.grid_n": (20, int, lambda v: v >= 2, "must be >= 2"),
    "nodes.init_radius": (0.0, float, lambda v: v >= 0,
                          "must be >= 0 (0 -> automatic per mode)"),
    "optim.K": (10, int, lambda v: v >= 1, "must be >= 1"),
    "optim.tau_max": (100, int, lambda v: v >= 1, "must be >= 1"),
    "optim.eta_g": (1.0, float, lambda v: v > 0, "must be > 0"),
    "optim.eta_t": (0.01, float, lambda v: v > 0, "must be > 0"),
    "optim.eta_r": (0.01, float, lambda v: v > 0, "must be > 0"),
    "optim.adam_beta1": (0.9, float, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "optim.adam_beta2": (0.999, float, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "optim.adam_eps": (1e-8, float, lambda v: v > 0, "must be > 0"),
    "optim.snapshot_every": (10, int, lambda v: v >= 0, "must be >= 0 (0 disables)"),
    "loss.alpha_gcc": (0.4, float, lambda v: v >= 0, "must be >= 0"),
    "loss.alpha_ncc": (1.0, float, lambda v: v >= 0, "must be >= 0"),
    "loss.norm_len": (0.0, float, lambda v: v >= 0,
                      "must be >= 0 (0 -> image width)"),
    "synth.seed": (0, int, lambda v: True, ""),
    "synth.size": (256, int, lambda v: v >= 64, "must be >= 64"),
    "synth.n_vessels": (5, int, lambda v: v >= 0, "must be >= 0"),
    "synth.vessel_width_min": (0.8, float, lambda v: v > 0, "must be > 0"),
    "synth.vessel_width_max": (2.0, float, lambda v: v > 0, "must be > 0"),
    "synth.deform_nodes": (6, int, lambda v: v >= 1, "must be >= 1"),
    "synth.deform_max_px": (12.0, float, lambda v: v >= 0, "must be >= 0"),
    "synth.intensity_jitter": (0.02, float, lambda v: 0 <= v <= 0.2,
                               "must lie in [0, 0.2]"),
    "synth.landmark_count": (10, int, lambda v: v >= 1, "must be >= 1"),
    "synth.match_noise_px": (0.0, float, lambda v: v >= 0, "must be >= 0"),
    "synth.transform_frac": (0.03, float, lambda v: 0 <= v <= 0.2,
                             "must lie in [0, 0.2] (0 -> identity)"),
}


def defaults() -> dict:
    return {k: spec[0] for k, spec in _SCHEMA.items()}


def _cast(key: str, raw) -> object:
    if key not in _SCHEMA:
        raise UsageError(f"unknown config key '{key}'")
    _, caster, check, why = _SCHEMA[key]
    if isinstance(raw, str):
        try:
            value = caster(raw)
        except ValueError as exc:
            raise UsageError(f"{key}: {exc}") from exc
    else:
        value = raw
    if not check(value):
        raise UsageError(f"{key}: {why} (got {value})")
    return value


def parse_config_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment, blank lines ignored."""
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = body.partition("=")
                out[key.strip()] = raw.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file '{path}': {exc}") from exc
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None,
            command_defaults: dict | None = None) -> dict:
    """Layer defaults, per-command defaults, a config file and --set values."""
    cfg = defaults()
    for layer in (command_defaults, file_values, overrides):
        if not layer:
            continue
        for key, raw in layer.items():
            cfg[key] = _cast(key, raw)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: dict) -> None:
    if not cfg["nodes.r_min"] < cfg["nodes.r_max"]:
        raise UsageError("nodes.r_min must be strictly below nodes.r_max")
    if cfg["loss.alpha_gcc"] == 0 and cfg["loss.alpha_ncc"] == 0:
        raise UsageError("loss.alpha_gcc and loss.alpha_ncc cannot both be 0")
    if cfg["synth.vessel_width_min"] > cfg["synth.vessel_width_max"]:
        raise UsageError("synth.vessel_width_min must be <= synth.vessel_width_max")


def parse_set_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got '{item}'")
        key, _, raw = item.partition("=")
        out[key.strip()] = raw.strip()
    return out


def resolved_lines(cfg: dict) -> list:
    return [f"{key} = {cfg[key]}" for key in sorted(cfg)]


def config_hash(cfg: dict) -> str:
    blob = "\n".join(resolved_lines(cfg)).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def to_pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig(
        optim=OptimConfig(
            eta_g=cfg["optim.eta_g"], eta_t=cfg["optim.eta_t"],
            eta_r=cfg["optim.eta_r"], tau_max=cfg["optim.tau_max"],
            K=cfg["optim.K"], adam_beta1=cfg["optim.adam_beta1"],
            adam_beta2=cfg["optim.adam_beta2"], adam_eps=cfg["optim.adam_eps"],
            loss_weights=LossWeights(cfg["loss.alpha_gcc"], cfg["loss.alpha_ncc"]),
            gcc_norm_len=cfg["loss.norm_len"], seed=cfg["run.seed"],
            snapshot_every=cfg["optim.snapshot_every"],
        ),
        preproc=PreprocConfig(
            blur_sigma=cfg["preproc.blur_sigma"],
            resize_w=cfg["preproc.resize_w"], resize_h=cfg["preproc.resize_h"],
        ),
        radius_cfg=RadiusConfig(cfg["nodes.r_min"], cfg["nodes.r_max"]),
        n_nodes=cfg["nodes.count"],
        grid_n=cfg["nodes.grid_n"],
        init_radius=cfg["nodes.init_radius"],
        ransac=RansacConfig(
            iters=cfg["coarse.ransac_iters"],
            inlier_thresh_px=cfg["coarse.ransac_thresh_px"],
            min_inliers=cfg["coarse.min_inliers"], seed=cfg["run.seed"],
        ),
        affine_fallback=cfg["coarse.affine_fallback"],
    )


def to_synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        seed=cfg["synth.seed"], size=cfg["synth.size"],
        n_vessels=cfg["synth.n_vessels"],
        vessel_width_min=cfg["synth.vessel_width_min"],
        vessel_width_max=cfg["synth.vessel_width_max"],
        deform_nodes=cfg["synth.deform_nodes"],
        deform_max_px=cfg["synth.deform_max_px"],
        intensity_jitter=cfg["synth.intensity_jitter"],
        landmark_count=cfg["synth.landmark_count"],
        match_noise_px=cfg["synth.match_noise_px"],
        transform_frac=cfg["synth.transform_frac"],
    )
