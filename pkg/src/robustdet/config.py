"""YAML config file loading for the pipeline and CLI.

The file mirrors PipelineConfig: nested sections for world, anchors and
the schedules, plus scalar hyperparameters at top level and an optional
`seeds` list. Unknown keys are hard errors so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .detector import AnchorConfig
from .fusion import AlphaSchedule
from .pipeline import AblationFlags, LrSchedule, PipelineConfig
from .world import DomainShift, WorldConfig, random_prototypes

__all__ = ["ConfigError", "load_config", "default_config_dict"]


class ConfigError(ValueError):
    """Bad or unknown field in a config file."""


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


_WORLD_KEYS = {
    "scene_width", "scene_height", "feature_dim", "num_classes",
    "objects_per_scene", "class_prototypes", "prototype_seed",
    "prototype_scale", "appearance_noise", "object_jitter", "background_level",
    "object_size_range", "domain_shift",
}
_SHIFT_KEYS = {"prototype_shift", "extra_noise", "size_scale"}
_ANCHOR_KEYS = {"stride", "scales", "ratios"}
_ALPHA_KEYS = {"alpha_start", "alpha_end", "anneal_steps"}
_LR_KEYS = {"initial", "drop_step", "dropped"}
_ABLATION_KEYS = {"cls_cor", "box_r", "fn_cor"}
_TOP_KEYS = {
    "world", "anchors", "alpha_schedule", "lr_schedule", "ablation",
    "n_source_scenes", "n_target_scenes", "n_eval_scenes",
    "phase1_steps", "phase2_steps", "phase3_steps",
    "mining_score_threshold", "nms_iou", "eval_score_threshold",
    "epsilon_fn", "epsilon_aux", "batch_mix", "hard_negative_count",
    "use_aux", "warm_start", "background_crops_per_scene", "aux_lr",
    "reg_weight", "seed", "seeds",
}


def _world_from_dict(d: dict) -> WorldConfig:
    _check_keys(d, _WORLD_KEYS, "world")
    d = dict(d)
    shift_d = d.pop("domain_shift", None)
    shift = DomainShift()
    if shift_d is not None:
        _check_keys(shift_d, _SHIFT_KEYS, "world.domain_shift")
        ps = shift_d.get("prototype_shift", 0.0)
        shift = DomainShift(
            prototype_shift=ps if np.isscalar(ps) else tuple(ps),
            extra_noise=shift_d.get("extra_noise", 0.0),
            size_scale=shift_d.get("size_scale", 1.0),
        )
    proto_seed = d.pop("prototype_seed", None)
    proto_scale = d.pop("prototype_scale", 2.0)
    if d.get("class_prototypes") is not None:
        d["class_prototypes"] = np.asarray(d["class_prototypes"], dtype=np.float64)
    elif proto_seed is not None:
        d["class_prototypes"] = random_prototypes(
            d.get("num_classes", 3), d.get("feature_dim", 8),
            proto_seed, proto_scale)
    for key in ("objects_per_scene", "object_size_range"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return WorldConfig(domain_shift=shift, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad world section: {exc}") from exc


def load_config(path) -> tuple[PipelineConfig, list[int]]:
    """Parse a YAML config file into (PipelineConfig, seeds list)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    _check_keys(raw, _TOP_KEYS, "config")

    kwargs: dict = {}
    if "world" in raw:
        kwargs["world"] = _world_from_dict(raw["world"])
    if "anchors" in raw:
        _check_keys(raw["anchors"], _ANCHOR_KEYS, "anchors")
        a = raw["anchors"]
        default_anchors = AnchorConfig()
        kwargs["anchors"] = AnchorConfig(
            stride=a.get("stride", default_anchors.stride),
            scales=tuple(a.get("scales", default_anchors.scales)),
            ratios=tuple(a.get("ratios", default_anchors.ratios)),
        )
    if "alpha_schedule" in raw:
        _check_keys(raw["alpha_schedule"], _ALPHA_KEYS, "alpha_schedule")
        kwargs["alpha_schedule"] = AlphaSchedule(**raw["alpha_schedule"])
    if "lr_schedule" in raw:
        _check_keys(raw["lr_schedule"], _LR_KEYS, "lr_schedule")
        kwargs["lr_schedule"] = LrSchedule(**raw["lr_schedule"])
    if "ablation" in raw:
        _check_keys(raw["ablation"], _ABLATION_KEYS, "ablation")
        kwargs["ablation"] = AblationFlags(**raw["ablation"])

    scalar_keys = _TOP_KEYS - {"world", "anchors", "alpha_schedule",
                               "lr_schedule", "ablation", "seeds"}
    for key in scalar_keys:
        if key in raw:
            kwargs[key] = tuple(raw[key]) if key == "batch_mix" else raw[key]

    seeds = raw.get("seeds")
    if seeds is None:
        seeds = [kwargs.get("seed", 0)]
    seeds = [int(s) for s in seeds]

    try:
        config = PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return config, seeds


def default_config_dict() -> dict:
    """Echo-able dict of the default configuration."""
    cfg = PipelineConfig()
    return _config_to_dict(cfg)


def _config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "world": cfg.world.to_dict(),
        "anchors": {"stride": cfg.anchors.stride,
                    "scales": list(cfg.anchors.scales),
                    "ratios": list(cfg.anchors.ratios)},
        "alpha_schedule": {"alpha_start": cfg.alpha_schedule.alpha_start,
                           "alpha_end": cfg.alpha_schedule.alpha_end,
                           "anneal_steps": cfg.alpha_schedule.anneal_steps},
        "lr_schedule": {"initial": cfg.lr_schedule.initial,
                        "drop_step": cfg.lr_schedule.drop_step,
                        "dropped": cfg.lr_schedule.dropped},
        "ablation": {"cls_cor": cfg.ablation.cls_cor,
                     "box_r": cfg.ablation.box_r,
                     "fn_cor": cfg.ablation.fn_cor},
        "n_source_scenes": cfg.n_source_scenes,
        "n_target_scenes": cfg.n_target_scenes,
        "n_eval_scenes": cfg.n_eval_scenes,
        "phase1_steps": cfg.phase1_steps,
        "phase2_steps": cfg.phase2_steps,
        "phase3_steps": cfg.phase3_steps,
        "mining_score_threshold": cfg.mining_score_threshold,
        "nms_iou": cfg.nms_iou,
        "eval_score_threshold": cfg.eval_score_threshold,
        "epsilon_fn": cfg.epsilon_fn,
        "epsilon_aux": cfg.epsilon_aux,
        "batch_mix": list(cfg.batch_mix),
        "hard_negative_count": cfg.hard_negative_count,
        "use_aux": cfg.use_aux,
        "warm_start": cfg.warm_start,
        "background_crops_per_scene": cfg.background_crops_per_scene,
        "aux_lr": cfg.aux_lr,
        "reg_weight": cfg.reg_weight,
        "seed": cfg.seed,
    }
