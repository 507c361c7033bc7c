"""Synthetic detection worlds with a controllable source/target shift.

Scenes are feature grids: Gaussian background plus rectangular objects
whose cells carry a per-class prototype vector with appearance noise.
The target domain differs from the source by a parametric shift:
prototype displacement, extra appearance noise, and object size scaling.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .detector import Annotation, Scene, iou_matrix
from .fusion import BoundingBox

__all__ = [
    "DomainShift",
    "WorldConfig",
    "LabeledDataset",
    "random_prototypes",
    "sample_scene",
    "apply_domain_shift",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Placed objects may overlap at most this much; keeps greedy AP matching
# unambiguous at this scale.
MAX_OBJECT_IOU = 0.3


@dataclass(frozen=True)
class DomainShift:
    """Parametric source-to-target difference.

    prototype_shift: scalar L2 magnitude applied along a fixed direction
    (so every prototype moves by exactly that distance), or a length-F
    vector added to every prototype.
    """

    prototype_shift: float | tuple = 1.0
    extra_noise: float = 0.15
    size_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.extra_noise < 0:
            raise ValueError("extra_noise must be >= 0")
        if self.size_scale <= 0:
            raise ValueError("size_scale must be > 0")
        if not np.isscalar(self.prototype_shift):
            object.__setattr__(self, "prototype_shift",
                               tuple(float(v) for v in self.prototype_shift))


@dataclass(frozen=True)
class WorldConfig:
    scene_width: int = 32
    scene_height: int = 32
    feature_dim: int = 8
    num_classes: int = 3
    objects_per_scene: tuple[int, int] = (1, 4)
    class_prototypes: np.ndarray = None  # C x F; defaults from seed 7
    appearance_noise: float = 0.25
    # Per-object feature offset, constant over the object's cells. Unlike
    # the per-cell noise it survives average pooling, giving every object
    # a persistent appearance of its own.
    object_jitter: float = 0.15
    background_level: float = 0.25
    # Kept within an area factor of ~2 so that a box fully contained in
    # another still has IoU >= 0.5 with it; mean pooling cannot tell a
    # contained box from a fitted one, and this keeps matching and NMS
    # coherent for those cases.
    object_size_range: tuple[float, float] = (6.5, 9.0)
    domain_shift: DomainShift = field(default_factory=DomainShift)

    def __post_init__(self) -> None:
        if self.scene_width < 1 or self.scene_height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("feature_dim and num_classes must be positive")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        smin, smax = self.object_size_range
        if smin < 1 or smax < smin:
            raise ValueError(f"bad object_size_range {self.object_size_range}")
        if smax > min(self.scene_width, self.scene_height):
            raise ValueError("object sizes must fit in the scene")
        if self.appearance_noise < 0 or self.background_level < 0 or self.object_jitter < 0:
            raise ValueError("noise levels must be >= 0")
        protos = self.class_prototypes
        if protos is None:
            protos = random_prototypes(self.num_classes, self.feature_dim, seed=7)
        protos = np.asarray(protos, dtype=np.float64)
        if protos.shape != (self.num_classes, self.feature_dim):
            raise ValueError(
                f"class_prototypes must be {self.num_classes} x {self.feature_dim}, "
                f"got {protos.shape}")
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                if np.array_equal(protos[i], protos[j]):
                    raise ValueError(f"prototypes {i} and {j} are identical")
        object.__setattr__(self, "class_prototypes", protos)
        object.__setattr__(self, "objects_per_scene", (int(lo), int(hi)))
        object.__setattr__(self, "object_size_range", (float(smin), float(smax)))

    def to_dict(self) -> dict:
        shift = self.domain_shift
        return {
            "scene_width": self.scene_width,
            "scene_height": self.scene_height,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "objects_per_scene": list(self.objects_per_scene),
            "class_prototypes": self.class_prototypes.tolist(),
            "appearance_noise": self.appearance_noise,
            "object_jitter": self.object_jitter,
            "background_level": self.background_level,
            "object_size_range": list(self.object_size_range),
            "domain_shift": {
                "prototype_shift": (shift.prototype_shift
                                    if np.isscalar(shift.prototype_shift)
                                    else list(shift.prototype_shift)),
                "extra_noise": shift.extra_noise,
                "size_scale": shift.size_scale,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        shift_d = d.pop("domain_shift", {})
        shift = DomainShift(
            prototype_shift=(shift_d.get("prototype_shift", 0.0)
                             if np.isscalar(shift_d.get("prototype_shift", 0.0))
                             else tuple(shift_d["prototype_shift"])),
            extra_noise=shift_d.get("extra_noise", 0.0),
            size_scale=shift_d.get("size_scale", 1.0),
        )
        if d.get("class_prototypes") is not None:
            d["class_prototypes"] = np.asarray(d["class_prototypes"], dtype=np.float64)
        d["objects_per_scene"] = tuple(d.get("objects_per_scene", (1, 4)))
        d["object_size_range"] = tuple(d.get("object_size_range", (6.5, 9.0)))
        return cls(domain_shift=shift, **d)


def random_prototypes(num_classes: int, feature_dim: int, seed: int,
                      scale: float = 2.0) -> np.ndarray:
    """Seeded prototype vectors, each rescaled to L2 norm `scale`."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(num_classes, feature_dim))
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    return protos / norms * scale


@dataclass
class LabeledDataset:
    scenes: list[Scene]
    annotations: list[list[Annotation]]
    domain_tag: str  # "source" or "target"
    seed: int
    config: Optional[WorldConfig] = None

    def __post_init__(self) -> None:
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be source or target, got {self.domain_tag}")
        if len(self.scenes) != len(self.annotations):
            raise ValueError("scenes and annotations length mismatch")

    def __len__(self) -> int:
        return len(self.scenes)


def sample_scene(config: WorldConfig, rng: np.random.Generator
                 ) -> tuple[Scene, list[Annotation]]:
    """One scene: noisy background plus rejection-placed prototype rectangles."""
    h, w, f = config.scene_height, config.scene_width, config.feature_dim
    if config.background_level > 0:
        features = rng.normal(0.0, config.background_level, size=(h, w, f))
    else:
        features = np.zeros((h, w, f))

    lo, hi = config.objects_per_scene
    n_objects = int(rng.integers(lo, hi + 1))
    smin, smax = config.object_size_range

    placed: list[np.ndarray] = []
    annotations: list[Annotation] = []
    for _ in range(n_objects):
        box = None
        for _try in range(100):
            bw = int(np.clip(round(rng.uniform(smin, smax)), 1, w))
            bh = int(np.clip(round(rng.uniform(smin, smax)), 1, h))
            x = int(rng.integers(0, w - bw + 1))
            y = int(rng.integers(0, h - bh + 1))
            cand = np.array([[x, y, bw, bh]], dtype=np.float64)
            if placed:
                ious = iou_matrix(cand, np.stack(placed).reshape(-1, 4))
                if ious.max() >= MAX_OBJECT_IOU:
                    continue
            box = cand[0]
            break
        if box is None:
            logger.debug("object placement failed after 100 tries; scene gets fewer objects")
            continue
        cls = int(rng.integers(1, config.num_classes + 1))
        proto = config.class_prototypes[cls - 1]
        if config.object_jitter > 0:
            proto = proto + rng.normal(0.0, config.object_jitter, size=f)
        x, y, bw, bh = (int(v) for v in box)
        patch = np.broadcast_to(proto, (bh, bw, f)).copy()
        if config.appearance_noise > 0:
            patch += rng.normal(0.0, config.appearance_noise, size=(bh, bw, f))
        features[y:y + bh, x:x + bw] = patch
        placed.append(box)
        annotations.append(Annotation(cls, BoundingBox(float(x), float(y),
                                                       float(bw), float(bh))))
    return Scene(features), annotations


def apply_domain_shift(config: WorldConfig) -> WorldConfig:
    """Target-domain config: shifted prototypes, extra noise, scaled sizes."""
    shift = config.domain_shift
    protos = config.class_prototypes.copy()
    if np.isscalar(shift.prototype_shift):
        # Scalar magnitude: move every prototype exactly that L2 distance
        # toward the next class's prototype (cyclically). This drags each
        # class's appearance toward a neighboring class, so a source-trained
        # classifier starts confusing adjacent classes -- the label-noise
        # regime the robust retraining is built for.
        mag = float(shift.prototype_shift)
        if mag != 0.0:
            fallback = np.ones(config.feature_dim) / np.sqrt(config.feature_dim)
            shifted = []
            for i, p in enumerate(protos):
                delta = protos[(i + 1) % len(protos)] - p
                norm = np.linalg.norm(delta)
                direction = delta / norm if norm > 1e-12 else fallback
                shifted.append(p + mag * direction)
            protos = np.stack(shifted)
    else:
        protos = protos + np.asarray(shift.prototype_shift, dtype=np.float64)
    smin, smax = config.object_size_range
    scaled = (smin * shift.size_scale, smax * shift.size_scale)
    limit = float(min(config.scene_width, config.scene_height))
    scaled = (min(scaled[0], limit), min(scaled[1], limit))
    return replace(
        config,
        class_prototypes=protos,
        appearance_noise=config.appearance_noise + shift.extra_noise,
        object_size_range=scaled,
    )


def generate_dataset(config: WorldConfig, n_scenes: int, seed: int,
                     domain_tag: str = "source") -> LabeledDataset:
    """Deterministic dataset from (config, seed)."""
    if n_scenes <= 0:
        raise ValueError("n_scenes must be positive")
    rng = np.random.default_rng(seed)
    scenes, annotations = [], []
    for _ in range(n_scenes):
        scene, anns = sample_scene(config, rng)
        scenes.append(scene)
        annotations.append(anns)
    return LabeledDataset(scenes, annotations, domain_tag, seed, config)


class DatasetFormatError(ValueError):
    """Malformed or unsupported dataset file."""


def _encode_features(features: np.ndarray) -> dict:
    return {
        "shape": list(features.shape),
        "data": base64.b64encode(features.astype(np.float64).tobytes()).decode("ascii"),
    }


def _decode_features(payload: dict, line_no: int) -> np.ndarray:
    try:
        shape = tuple(payload["shape"])
        raw = base64.b64decode(payload["data"])
        arr = np.frombuffer(raw, dtype=np.float64).reshape(shape)
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetFormatError(f"bad feature payload at line {line_no}: {exc}") from exc
    return arr.copy()


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write the line-delimited JSON format described in FORMAT.md."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format_version": FORMAT_VERSION,
            "domain_tag": dataset.domain_tag,
            "seed": dataset.seed,
            "n_scenes": len(dataset),
            "config": dataset.config.to_dict() if dataset.config else None,
        }
        fh.write(json.dumps(header) + "\n")
        for scene, anns in zip(dataset.scenes, dataset.annotations):
            record = {
                "features": _encode_features(scene.features),
                "annotations": [
                    {"class_index": a.class_index,
                     "box": [a.box.x, a.box.y, a.box.w, a.box.h]}
                    for a in anns
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> LabeledDataset:
    """Lossless inverse of :func:`save_dataset`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")

    def parse(line: str, line_no: int) -> dict:
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"parse error at line {line_no}, offset {exc.pos}: {exc.msg}") from exc

    header = parse(lines[0], 1)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    n_scenes = header.get("n_scenes")
    if n_scenes != len(lines) - 1:
        raise DatasetFormatError(
            f"truncated file: header promises {n_scenes} scenes, found {len(lines) - 1}")

    scenes, annotations = [], []
    for i, line in enumerate(lines[1:], start=2):
        record = parse(line, i)
        scenes.append(Scene(_decode_features(record["features"], i)))
        anns = [
            Annotation(int(a["class_index"]), BoundingBox.from_array(a["box"]))
            for a in record.get("annotations", [])
        ]
        annotations.append(anns)
    config = (WorldConfig.from_dict(header["config"])
              if header.get("config") else None)
    return LabeledDataset(scenes, annotations, header["domain_tag"],
                          int(header["seed"]), config)
