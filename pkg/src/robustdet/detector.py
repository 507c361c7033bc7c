"""Minimal two-stage-style detector over synthetic feature grids.

Proposals come from a fixed anchor grid (no learned proposal network).
Each proposal is average-pooled over the feature cells it covers, then a
linear softmax head classifies it and a linear head regresses box offsets
in the usual parameterization (center shifts scaled by proposal size,
log width/height ratios). Gradients are analytic; training is plain SGD.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import BoundingBox, CategoricalDistribution

__all__ = [
    "Scene",
    "Annotation",
    "AnchorConfig",
    "Proposal",
    "DetectorParams",
    "TrainingInstance",
    "Detection",
    "generate_proposals",
    "roi_pool",
    "encode_box",
    "decode_box",
    "init_params",
    "forward",
    "loss_and_gradients",
    "pooled_loss_and_gradients",
    "sgd_step",
    "nms",
    "detect",
]


@dataclass(eq=False)
class Scene:
    """A feature-grid image: height x width x feature_dim array."""

    features: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.features, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"features must be H x W x F, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("scene features must be finite")
        self.features = arr
        self._integral: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def integral(self) -> np.ndarray:
        """Summed-area table, shape (H+1, W+1, F); cached."""
        if self._integral is None:
            h, w, f = self.features.shape
            table = np.zeros((h + 1, w + 1, f), dtype=np.float64)
            table[1:, 1:] = self.features.cumsum(axis=0).cumsum(axis=1)
            self._integral = table
        return self._integral


@dataclass
class Annotation:
    """A labeled box: class 1..C for foreground, 0 for mined negatives."""

    class_index: int
    box: BoundingBox
    soft_label: Optional[CategoricalDistribution] = None
    box_target_initial: Optional[BoundingBox] = None


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 2
    scales: tuple = (7.0, 8.5)
    ratios: tuple = (0.8, 1.25)

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    @property
    def boxes_per_position(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    source: str = "anchor"  # "anchor" or "mined"


@dataclass
class DetectorParams:
    """Linear head weights; last row of each matrix is the bias."""

    cls_weights: np.ndarray  # (F+1) x (C+1)
    reg_weights: np.ndarray  # (F+1) x 4

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.cls_weights.copy(), self.reg_weights.copy())

    @property
    def num_classes(self) -> int:
        """Number of foreground classes C."""
        return self.cls_weights.shape[1] - 1


@dataclass
class TrainingInstance:
    scene: Scene
    proposal: Proposal
    soft_label: CategoricalDistribution
    box_target: Optional[BoundingBox] = None


@dataclass(frozen=True)
class Detection:
    class_index: int
    score: float
    box: BoundingBox


def _clamp_box(x: float, y: float, w: float, h: float,
               scene_w: int, scene_h: int) -> BoundingBox:
    x1 = max(x, 0.0)
    y1 = max(y, 0.0)
    x2 = min(x + w, float(scene_w))
    y2 = min(y + h, float(scene_h))
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)


_GRID_CACHE: dict = {}


def anchor_grid(scene_h: int, scene_w: int, config: AnchorConfig) -> np.ndarray:
    """Anchor boxes as an N x 4 array (x, y, w, h), clamped to the scene.

    One position per stride cell (ceil division), centers at the middle of
    each stride block; every (scale, ratio) pair per position. The returned
    array is cached and read-only.
    """
    key = (scene_h, scene_w, config)
    cached = _GRID_CACHE.get(key)
    if cached is not None:
        return cached
    rows = -(-scene_h // config.stride)
    cols = -(-scene_w // config.stride)
    boxes = []
    for r in range(rows):
        cy = r * config.stride + config.stride / 2.0
        for c in range(cols):
            cx = c * config.stride + config.stride / 2.0
            for s in config.scales:
                for ratio in config.ratios:
                    w = s * np.sqrt(ratio)
                    h = s / np.sqrt(ratio)
                    b = _clamp_box(cx - w / 2.0, cy - h / 2.0, w, h, scene_w, scene_h)
                    boxes.append([b.x, b.y, b.w, b.h])
    grid = np.asarray(boxes, dtype=np.float64)
    grid.flags.writeable = False
    _GRID_CACHE[key] = grid
    return grid


def generate_proposals(scene: Scene, config: AnchorConfig) -> list[Proposal]:
    grid = anchor_grid(scene.height, scene.width, config)
    return [Proposal(BoundingBox.from_array(row), source="anchor") for row in grid]


def _cell_range(lo: float, size: float, n_cells: int) -> tuple[int, int]:
    """Inclusive index range of cells whose centers fall in [lo, lo+size)."""
    first = int(np.ceil(lo - 0.5))
    last = int(np.ceil(lo + size - 0.5)) - 1
    return max(first, 0), min(last, n_cells - 1)


def _nearest_cell(lo: float, size: float, n_cells: int) -> int:
    center = lo + size / 2.0
    return int(np.clip(round(center - 0.5), 0, n_cells - 1))


def roi_pool(scene: Scene, box: BoundingBox) -> np.ndarray:
    """Mean feature vector over cells whose centers fall inside the box.

    Falls back to the single cell nearest the box center when no cell
    center is covered.
    """
    if box.w <= 0 or box.h <= 0:
        raise ValueError("zero-area box")
    r0, r1 = _cell_range(box.y, box.h, scene.height)
    c0, c1 = _cell_range(box.x, box.w, scene.width)
    if r1 < r0 or c1 < c0:
        r = _nearest_cell(box.y, box.h, scene.height)
        c = _nearest_cell(box.x, box.w, scene.width)
        return scene.features[r, c].copy()
    table = scene.integral()
    total = table[r1 + 1, c1 + 1] - table[r0, c1 + 1] - table[r1 + 1, c0] + table[r0, c0]
    count = (r1 - r0 + 1) * (c1 - c0 + 1)
    return total / count


def pooled_features_for_boxes(scene: Scene, boxes: np.ndarray) -> np.ndarray:
    """Vectorized roi_pool for an N x 4 array of boxes; returns N x F."""
    h, w = scene.height, scene.width
    y, bh = boxes[:, 1], boxes[:, 3]
    x, bw = boxes[:, 0], boxes[:, 2]
    r0 = np.clip(np.ceil(y - 0.5).astype(int), 0, h - 1)
    r1 = np.clip(np.ceil(y + bh - 0.5).astype(int) - 1, -1, h - 1)
    c0 = np.clip(np.ceil(x - 0.5).astype(int), 0, w - 1)
    c1 = np.clip(np.ceil(x + bw - 0.5).astype(int) - 1, -1, w - 1)
    empty = (r1 < r0) | (c1 < c0)

    table = scene.integral()
    rr0 = np.where(empty, 0, r0)
    rr1 = np.where(empty, 0, r1)
    cc0 = np.where(empty, 0, c0)
    cc1 = np.where(empty, 0, c1)
    total = (table[rr1 + 1, cc1 + 1] - table[rr0, cc1 + 1]
             - table[rr1 + 1, cc0] + table[rr0, cc0])
    count = ((rr1 - rr0 + 1) * (cc1 - cc0 + 1)).astype(np.float64)
    pooled = total / count[:, None]

    if np.any(empty):
        nr = np.clip(np.round(y + bh / 2.0 - 0.5).astype(int), 0, h - 1)
        nc = np.clip(np.round(x + bw / 2.0 - 0.5).astype(int), 0, w - 1)
        idx = np.nonzero(empty)[0]
        pooled[idx] = scene.features[nr[idx], nc[idx]]
    return pooled


def encode_box(box: BoundingBox, proposal: BoundingBox) -> np.ndarray:
    """Offsets (dx, dy, dw, dh) mapping the proposal onto the box."""
    dx = (box.x + box.w / 2.0 - proposal.x - proposal.w / 2.0) / proposal.w
    dy = (box.y + box.h / 2.0 - proposal.y - proposal.h / 2.0) / proposal.h
    dw = np.log(box.w / proposal.w)
    dh = np.log(box.h / proposal.h)
    return np.array([dx, dy, dw, dh], dtype=np.float64)


def decode_box(proposal: BoundingBox, offsets: np.ndarray) -> BoundingBox:
    """Inverse of :func:`encode_box`; zero offsets return the proposal."""
    dx, dy, dw, dh = (float(v) for v in offsets)
    cx = proposal.x + proposal.w / 2.0 + dx * proposal.w
    cy = proposal.y + proposal.h / 2.0 + dy * proposal.h
    w = proposal.w * np.exp(dw)
    h = proposal.h * np.exp(dh)
    return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)


def encode_boxes(boxes: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_box` for N x 4 arrays."""
    dx = (boxes[:, 0] + boxes[:, 2] / 2.0 - proposals[:, 0] - proposals[:, 2] / 2.0) / proposals[:, 2]
    dy = (boxes[:, 1] + boxes[:, 3] / 2.0 - proposals[:, 1] - proposals[:, 3] / 2.0) / proposals[:, 3]
    dw = np.log(boxes[:, 2] / proposals[:, 2])
    dh = np.log(boxes[:, 3] / proposals[:, 3])
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_boxes(proposals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode_box` for N x 4 arrays."""
    cx = proposals[:, 0] + proposals[:, 2] / 2.0 + offsets[:, 0] * proposals[:, 2]
    cy = proposals[:, 1] + proposals[:, 3] / 2.0 + offsets[:, 1] * proposals[:, 3]
    w = proposals[:, 2] * np.exp(offsets[:, 2])
    h = proposals[:, 3] * np.exp(offsets[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


def init_params(feature_dim: int, num_classes: int, rng: np.random.Generator,
                scale: float = 0.01) -> DetectorParams:
    """Seeded zero-mean uniform initialization in [-scale, scale]."""
    cls_w = rng.uniform(-scale, scale, size=(feature_dim + 1, num_classes + 1))
    reg_w = rng.uniform(-scale, scale, size=(feature_dim + 1, 4))
    return DetectorParams(cls_w, reg_w)


def _augment(pooled: np.ndarray) -> np.ndarray:
    if pooled.ndim == 1:
        return np.concatenate([pooled, [1.0]])
    return np.concatenate([pooled, np.ones((pooled.shape[0], 1))], axis=1)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: DetectorParams, scene: Scene,
            proposal: Proposal) -> tuple[CategoricalDistribution, BoundingBox]:
    """Classification distribution and decoded box prediction for a proposal."""
    feat = _augment(roi_pool(scene, proposal.box))
    logits = feat @ params.cls_weights
    offsets = feat @ params.reg_weights
    return CategoricalDistribution(logits), decode_box(proposal.box, offsets)


def pooled_loss_and_gradients(
    params: DetectorParams,
    feats: np.ndarray,
    soft_labels: np.ndarray,
    fg_mask: np.ndarray,
    target_offsets: np.ndarray,
    reg_weight: float = 1.0,
) -> tuple[float, DetectorParams]:
    """Loss and analytic gradients on pre-pooled features.

    feats: B x (F+1) with bias column; soft_labels: B x (C+1) probability
    rows; fg_mask: boolean B; target_offsets: B x 4 (rows outside fg_mask
    ignored). Classification is soft-target cross entropy averaged over the
    batch; regression is the squared offset error summed per box and
    averaged over foreground rows, weighted by reg_weight.
    """
    n = feats.shape[0]
    logits = feats @ params.cls_weights
    probs = _softmax_rows(logits)
    ce = -np.sum(soft_labels * (logits - _logsumexp_rows(logits))) / n
    grad_cls = feats.T @ (probs - soft_labels) / n

    grad_reg = np.zeros_like(params.reg_weights)
    reg_loss = 0.0
    n_fg = int(np.count_nonzero(fg_mask))
    if n_fg > 0:
        fg_feats = feats[fg_mask]
        pred = fg_feats @ params.reg_weights
        diff = pred - target_offsets[fg_mask]
        reg_loss = float(np.sum(diff ** 2)) / n_fg
        grad_reg = reg_weight * 2.0 * (fg_feats.T @ diff) / n_fg

    loss = float(ce + reg_weight * reg_loss)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss (ce={ce}, reg={reg_loss}, batch={n}, fg={n_fg})"
        )
    return loss, DetectorParams(grad_cls, grad_reg)


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def loss_and_gradients(
    params: DetectorParams,
    batch: Sequence[TrainingInstance],
    reg_weight: float = 1.0,
) -> tuple[float, DetectorParams]:
    """Batch loss and gradients; pools each instance then reduces in order."""
    if not batch:
        raise ValueError("empty batch")
    feats = np.stack([_augment(roi_pool(inst.scene, inst.proposal.box)) for inst in batch])
    soft_labels = np.stack([inst.soft_label.probabilities() for inst in batch])
    fg_mask = np.array([inst.box_target is not None for inst in batch])
    target_offsets = np.zeros((len(batch), 4), dtype=np.float64)
    for i, inst in enumerate(batch):
        if inst.box_target is not None:
            target_offsets[i] = encode_box(inst.box_target, inst.proposal.box)
    return pooled_loss_and_gradients(params, feats, soft_labels, fg_mask,
                                     target_offsets, reg_weight)


def sgd_step(params: DetectorParams, grads: DetectorParams,
             learning_rate: float) -> DetectorParams:
    return DetectorParams(
        params.cls_weights - learning_rate * grads.cls_weights,
        params.reg_weights - learning_rate * grads.reg_weights,
    )


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (x, y, w, h) box arrays; shape len(a) x len(b)."""
    if boxes_a.size == 0 or boxes_b.size == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    ax1, ay1 = boxes_a[:, 0], boxes_a[:, 1]
    ax2, ay2 = ax1 + boxes_a[:, 2], ay1 + boxes_a[:, 3]
    bx1, by1 = boxes_b[:, 0], boxes_b[:, 1]
    bx2, by2 = bx1 + boxes_b[:, 2], by1 + boxes_b[:, 3]
    ix = np.maximum(0.0, np.minimum(ax2[:, None], bx2[None, :])
                    - np.maximum(ax1[:, None], bx1[None, :]))
    iy = np.maximum(0.0, np.minimum(ay2[:, None], by2[None, :])
                    - np.maximum(ay1[:, None], by1[None, :]))
    inter = ix * iy
    area_a = (boxes_a[:, 2] * boxes_a[:, 3])[:, None]
    area_b = (boxes_b[:, 2] * boxes_b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; ties broken by smaller index.

    Returns kept indices in descending-score order.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if all(ious[i, j] <= iou_threshold for j in kept):
            kept.append(int(i))
    return kept


def detect(
    params: DetectorParams,
    scene: Scene,
    anchor_config: AnchorConfig,
    score_threshold: float,
    nms_iou: float,
) -> list[Detection]:
    """Run all anchors through the heads; per-class threshold then NMS.

    Deterministic: classes ascending, then kept boxes in NMS order.
    """
    if not (0 < score_threshold < 1) or not (0 < nms_iou < 1):
        raise ValueError("thresholds must be in (0, 1)")
    grid = anchor_grid(scene.height, scene.width, anchor_config)
    feats = _augment(pooled_features_for_boxes(scene, grid))
    probs = _softmax_rows(feats @ params.cls_weights)
    offsets = feats @ params.reg_weights
    num_classes = params.num_classes

    results: list[Detection] = []
    decoded_cache: dict[int, BoundingBox] = {}
    for cls in range(1, num_classes + 1):
        scores = probs[:, cls]
        cand = np.nonzero(scores >= score_threshold)[0]
        if cand.size == 0:
            continue
        boxes = []
        for i in cand:
            if int(i) not in decoded_cache:
                decoded_cache[int(i)] = decode_box(
                    BoundingBox.from_array(grid[i]), offsets[i])
            boxes.append(decoded_cache[int(i)].as_array())
        boxes_arr = np.stack(boxes)
        keep = nms(boxes_arr, scores[cand], nms_iou)
        for k in keep:
            results.append(Detection(cls, float(scores[cand[k]]),
                                     BoundingBox.from_array(boxes_arr[k])))
    return results
