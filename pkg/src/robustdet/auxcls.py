"""Auxiliary crop classifier for rescoring mined boxes.

A linear softmax over pooled crop features (crop expanded by one cell of
context, so its view differs from the detector's). Trained semi-supervised:
clean source crops and mined background crops use hard one-hot targets;
noisy target crops use the KL-fusion of the model's current prediction with
a softened one-hot of the noisy label, annealed from trusting the label to
trusting the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Scene, iou_matrix, roi_pool
from .fusion import (
    AlphaSchedule,
    BoundingBox,
    CategoricalDistribution,
    fuse_categorical,
    softened_one_hot,
)

__all__ = [
    "CropSample",
    "AuxParams",
    "crop_features",
    "mine_background_boxes",
    "train_aux",
    "score",
    "score_logits",
]

CONTEXT_MARGIN = 1.0  # cells of context around a crop


@dataclass
class CropSample:
    pooled_features: np.ndarray  # length F
    label: int  # 0 = background, 1..C foreground
    provenance: str  # source_clean | target_noisy | mined_background

    def __post_init__(self) -> None:
        self.pooled_features = np.asarray(self.pooled_features, dtype=np.float64)
        if not np.all(np.isfinite(self.pooled_features)):
            raise ValueError("crop features must be finite")
        if self.provenance not in ("source_clean", "target_noisy", "mined_background"):
            raise ValueError(f"unknown provenance {self.provenance}")


@dataclass
class AuxParams:
    weights: np.ndarray  # (F+1) x (C+1)

    def copy(self) -> "AuxParams":
        return AuxParams(self.weights.copy())


def crop_features(scene: Scene, box: BoundingBox,
                  margin: float = CONTEXT_MARGIN) -> np.ndarray:
    """Mean features over the box grown by `margin` cells on each side."""
    x = max(box.x - margin, 0.0)
    y = max(box.y - margin, 0.0)
    x2 = min(box.x + box.w + margin, float(scene.width))
    y2 = min(box.y + box.h + margin, float(scene.height))
    return roi_pool(scene, BoundingBox(x, y, x2 - x, y2 - y))


def mine_background_boxes(scene: Scene, known_boxes: list[BoundingBox],
                          count: int, rng: np.random.Generator,
                          size_range: tuple[float, float] = (3.0, 8.0)
                          ) -> list[BoundingBox]:
    """Rejection-sample boxes with zero IoU against every known box.

    At most 100 tries per box; may return fewer than `count`.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    known = (np.stack([b.as_array() for b in known_boxes])
             if known_boxes else np.zeros((0, 4)))
    smin, smax = size_range
    mined: list[BoundingBox] = []
    for _ in range(count):
        for _try in range(100):
            bw = int(np.clip(round(rng.uniform(smin, smax)), 1, scene.width))
            bh = int(np.clip(round(rng.uniform(smin, smax)), 1, scene.height))
            x = int(rng.integers(0, scene.width - bw + 1))
            y = int(rng.integers(0, scene.height - bh + 1))
            cand = np.array([[x, y, bw, bh]], dtype=np.float64)
            if known.shape[0] and iou_matrix(cand, known).max() > 0:
                continue
            mined.append(BoundingBox(float(x), float(y), float(bw), float(bh)))
            break
    return mined


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def score_logits(params: AuxParams, pooled_features: np.ndarray) -> np.ndarray:
    feat = np.concatenate([np.asarray(pooled_features, dtype=np.float64), [1.0]])
    return feat @ params.weights


def score(params: AuxParams, pooled_features: np.ndarray) -> CategoricalDistribution:
    return CategoricalDistribution(score_logits(params, pooled_features))


def train_aux(
    source_crops: list[CropSample],
    target_crops: list[CropSample],
    num_classes: int,
    schedule: AlphaSchedule,
    epsilon: float,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 16,
    init_scale: float = 0.01,
) -> AuxParams:
    """SGD on soft-target cross entropy over mixed clean/noisy crops.

    Clean samples (source_clean, mined_background) train against their hard
    one-hot label. Noisy samples train against
    fuse_categorical(model prediction, softened_one_hot(label), alpha(step)).
    """
    if not source_crops:
        raise ValueError("source_crops must be nonempty")
    pool = list(source_crops) + list(target_crops)
    feature_dim = pool[0].pooled_features.size
    feats = np.stack([np.concatenate([c.pooled_features, [1.0]]) for c in pool])
    labels = np.array([c.label for c in pool])
    noisy = np.array([c.provenance == "target_noisy" for c in pool])

    hard_targets = np.zeros((len(pool), num_classes + 1))
    hard_targets[np.arange(len(pool)), labels] = 1.0
    soft_noisy = np.stack([
        softened_one_hot(int(lab), epsilon, num_classes).probabilities()
        for lab in labels
    ])

    weights = rng.uniform(-init_scale, init_scale,
                          size=(feature_dim + 1, num_classes + 1))
    for step in range(steps):
        idx = rng.integers(0, len(pool), size=batch_size)
        x = feats[idx]
        logits = x @ weights
        probs = _softmax_rows(logits)
        alpha = schedule.alpha_at(step)

        targets = hard_targets[idx].copy()
        noisy_rows = np.nonzero(noisy[idx])[0]
        for r in noisy_rows:
            fused = fuse_categorical(
                CategoricalDistribution(logits[r]),
                CategoricalDistribution.from_probabilities(soft_noisy[idx[r]]),
                alpha,
            )
            targets[r] = fused.probabilities()

        grad = x.T @ (probs - targets) / batch_size
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite aux gradient at step {step}")
        weights = weights - lr * grad
    return AuxParams(weights)
