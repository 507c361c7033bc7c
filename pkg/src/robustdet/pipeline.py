"""Three-phase adaptation pipeline and the experiment harness.

Phase 1 trains the detector on labeled source scenes and mines boxes on
the unlabeled target scenes. Phase 2 trains the auxiliary crop classifier
and rescores every mined box. Phase 3 retrains the detector from scratch
on mixed source/target minibatches: source instances keep the standard
hard-label loss; mined target instances get their class and box targets
refined each step by KL fusion against the live model, with high-scoring
unmatched target proposals trained against a softened background label.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import auxcls
from .detector import (
    AnchorConfig,
    DetectorParams,
    Scene,
    anchor_grid,
    decode_boxes,
    detect,
    encode_boxes,
    init_params,
    iou_matrix,
    pooled_features_for_boxes,
    pooled_loss_and_gradients,
    sgd_step,
)
from .fusion import AlphaSchedule, BoundingBox, softened_one_hot
from .metrics import DetectionRecord, GroundTruthRecord, PseudoLabelQuality, mean_ap, pseudo_label_quality
from .world import LabeledDataset, WorldConfig, apply_domain_shift, generate_dataset

__all__ = [
    "LrSchedule",
    "AblationFlags",
    "PipelineConfig",
    "PseudoLabelEntry",
    "PseudoLabelSet",
    "PhaseReport",
    "ReportRow",
    "ExperimentReport",
    "VARIANTS",
    "make_datasets",
    "phase1_mine",
    "phase2_rescore",
    "phase3_robust_retrain",
    "evaluate_detector",
    "run_variant",
    "run_experiment",
]

# Matching bands shared by source GT and target pseudo-label assignment.
POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3

# Unmatched proposals only count as hard negatives when the live model is
# at least this confident they are foreground; anything below is ordinary
# background already covered by the regular negative sampling.
FN_SCORE_FLOOR = 0.5

VARIANTS = ("source_only", "pseudo_label", "ours_cls", "ours_cls_box",
            "ours_full", "oracle_target")


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.1
    drop_step: int = 2000
    dropped: float = 0.001

    def at(self, step: int) -> float:
        return self.initial if step < self.drop_step else self.dropped


@dataclass(frozen=True)
class AblationFlags:
    cls_cor: bool = True
    box_r: bool = True
    fn_cor: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    n_source_scenes: int = 200
    n_target_scenes: int = 200
    n_eval_scenes: int = 50
    phase1_steps: int = 1500
    phase2_steps: int = 1400
    phase3_steps: int = 2800
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    alpha_schedule: AlphaSchedule = field(default_factory=lambda: AlphaSchedule(100.0, 0.5, 2000))
    mining_score_threshold: float = 0.7
    nms_iou: float = 0.5
    eval_score_threshold: float = 0.3
    epsilon_fn: float = 0.3
    epsilon_aux: float = 0.1
    ablation: AblationFlags = field(default_factory=AblationFlags)
    batch_mix: tuple[int, int] = (8, 8)
    hard_negative_count: int = 3
    use_aux: bool = True
    warm_start: bool = False
    background_crops_per_scene: int = 1
    aux_lr: float = 0.05
    reg_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("mining_score_threshold", "nms_iou", "eval_score_threshold",
                     "epsilon_fn", "epsilon_aux"):
            v = getattr(self, name)
            if not (0 < v < 1):
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        for name in ("phase1_steps", "phase2_steps", "phase3_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_mix[0] < 1 or self.batch_mix[1] < 0:
            raise ValueError(f"bad batch_mix {self.batch_mix}")
        object.__setattr__(self, "batch_mix",
                           (int(self.batch_mix[0]), int(self.batch_mix[1])))


@dataclass
class PseudoLabelEntry:
    box: BoundingBox
    class_index: int  # mined class, 1..C
    score: float
    aux_logits: Optional[np.ndarray] = None


@dataclass
class PseudoLabelSet:
    per_scene: list[list[PseudoLabelEntry]]

    def total(self) -> int:
        return sum(len(v) for v in self.per_scene)


@dataclass
class PhaseReport:
    phase: int
    steps: int
    final_loss: float
    seconds: float
    quality: Optional[PseudoLabelQuality] = None


@dataclass
class ReportRow:
    variant: str
    seed: int
    map_score: float
    pseudo_quality: Optional[PseudoLabelQuality] = None


@dataclass
class ExperimentReport:
    rows: list[ReportRow]

    def mean_map(self, variant: str) -> float:
        vals = [r.map_score for r in self.rows if r.variant == variant]
        if not vals:
            raise KeyError(f"no rows for variant {variant}")
        return float(np.mean(vals))

    def variants(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen


# ----------------------------------------------------------------------
# dataset preparation and proposal caches
# ----------------------------------------------------------------------

def dataset_seeds(seed: int) -> tuple[int, int, int]:
    """Derived (source, target, eval) generation seeds for one run seed."""
    return 10 * seed + 1, 10 * seed + 2, 10 * seed + 3


def make_datasets(config: PipelineConfig, seed: Optional[int] = None
                  ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Source train, target train, target eval sets for one run seed."""
    seed = config.seed if seed is None else seed
    s_seed, t_seed, e_seed = dataset_seeds(seed)
    target_world = apply_domain_shift(config.world)
    source = generate_dataset(config.world, config.n_source_scenes, s_seed, "source")
    target = generate_dataset(target_world, config.n_target_scenes, t_seed, "target")
    evalset = generate_dataset(target_world, config.n_eval_scenes, e_seed, "target")
    return source, target, evalset


class _SceneCache:
    """Per-dataset cache: shared anchor grid plus pooled features per scene."""

    def __init__(self, dataset: LabeledDataset, anchors: AnchorConfig):
        first = dataset.scenes[0]
        self.grid = anchor_grid(first.height, first.width, anchors)
        self.feats = []
        for scene in dataset.scenes:
            pooled = pooled_features_for_boxes(scene, self.grid)
            self.feats.append(np.concatenate(
                [pooled, np.ones((pooled.shape[0], 1))], axis=1))


@dataclass
class _InstancePools:
    """Flat index pools over (scene, proposal) pairs for minibatch sampling."""

    pos_scene: np.ndarray
    pos_prop: np.ndarray
    pos_class: np.ndarray
    pos_offsets: np.ndarray  # encoded box targets (fixed targets only)
    pos_aux_logits: Optional[np.ndarray]  # phase-3 target pool only
    pos_boxes: Optional[np.ndarray]  # raw mined/GT boxes (for live fusion)
    neg_scene: np.ndarray
    neg_prop: np.ndarray
    neg_by_scene: list[np.ndarray]  # candidate negative proposal ids per scene

    @property
    def n_pos(self) -> int:
        return int(self.pos_scene.size)

    @property
    def n_neg(self) -> int:
        return int(self.neg_scene.size)


def _build_pools(cache: _SceneCache, boxes_per_scene: list[np.ndarray],
                 classes_per_scene: list[np.ndarray],
                 aux_logits_per_scene: Optional[list[np.ndarray]] = None
                 ) -> _InstancePools:
    grid = cache.grid
    pos_scene, pos_prop, pos_class, pos_off, pos_aux, pos_boxes = [], [], [], [], [], []
    neg_scene, neg_prop, neg_by_scene = [], [], []
    for si, (boxes, classes) in enumerate(zip(boxes_per_scene, classes_per_scene)):
        if boxes.shape[0] == 0:
            neg_ids = np.arange(grid.shape[0])
            neg_by_scene.append(neg_ids)
            neg_scene.append(np.full(neg_ids.size, si))
            neg_prop.append(neg_ids)
            continue
        ious = iou_matrix(grid, boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        pos_ids = np.nonzero(best_iou >= POSITIVE_IOU)[0]
        neg_ids = np.nonzero(best_iou < NEGATIVE_IOU)[0]
        if pos_ids.size:
            gt_idx = best_gt[pos_ids]
            pos_scene.append(np.full(pos_ids.size, si))
            pos_prop.append(pos_ids)
            pos_class.append(classes[gt_idx])
            pos_off.append(encode_boxes(boxes[gt_idx], grid[pos_ids]))
            pos_boxes.append(boxes[gt_idx])
            if aux_logits_per_scene is not None:
                pos_aux.append(aux_logits_per_scene[si][gt_idx])
        neg_by_scene.append(neg_ids)
        neg_scene.append(np.full(neg_ids.size, si))
        neg_prop.append(neg_ids)

    def cat(parts, width=None):
        if parts:
            return np.concatenate(parts)
        if width is None:
            return np.zeros(0, dtype=int)
        return np.zeros((0, width))

    return _InstancePools(
        pos_scene=cat(pos_scene).astype(int),
        pos_prop=cat(pos_prop).astype(int),
        pos_class=cat(pos_class).astype(int),
        pos_offsets=np.concatenate(pos_off) if pos_off else np.zeros((0, 4)),
        pos_aux_logits=(np.concatenate(pos_aux) if pos_aux else None)
        if aux_logits_per_scene is not None else None,
        pos_boxes=np.concatenate(pos_boxes) if pos_boxes else np.zeros((0, 4)),
        neg_scene=cat(neg_scene).astype(int),
        neg_prop=cat(neg_prop).astype(int),
        neg_by_scene=neg_by_scene,
    )


def _gt_arrays(dataset: LabeledDataset) -> tuple[list[np.ndarray], list[np.ndarray]]:
    boxes, classes = [], []
    for anns in dataset.annotations:
        if anns:
            boxes.append(np.stack([a.box.as_array() for a in anns]))
            classes.append(np.array([a.class_index for a in anns], dtype=int))
        else:
            boxes.append(np.zeros((0, 4)))
            classes.append(np.zeros(0, dtype=int))
    return boxes, classes


def _pseudo_arrays(pseudo: PseudoLabelSet, num_classes: int, epsilon_aux: float
                   ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Boxes, classes and per-entry auxiliary logits (with the documented
    fallback to softened one-hots when the aux pass was skipped)."""
    boxes, classes, aux = [], [], []
    for entries in pseudo.per_scene:
        if entries:
            boxes.append(np.stack([e.box.as_array() for e in entries]))
            classes.append(np.array([e.class_index for e in entries], dtype=int))
            rows = []
            for e in entries:
                if e.aux_logits is not None:
                    rows.append(np.asarray(e.aux_logits, dtype=np.float64))
                else:
                    rows.append(np.log(softened_one_hot(
                        e.class_index, epsilon_aux, num_classes).probabilities()))
            aux.append(np.stack(rows))
        else:
            boxes.append(np.zeros((0, 4)))
            classes.append(np.zeros(0, dtype=int))
            aux.append(np.zeros((0, num_classes + 1)))
    return boxes, classes, aux


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------

def _one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((classes.size, num_classes + 1))
    out[np.arange(classes.size), classes] = 1.0
    return out


def _gather_feats(cache: _SceneCache, scene_idx: np.ndarray,
                  prop_idx: np.ndarray) -> np.ndarray:
    return np.stack([cache.feats[s][p] for s, p in zip(scene_idx, prop_idx)])


def _train_supervised(config: PipelineConfig, cache: _SceneCache,
                      pools: _InstancePools, steps: int,
                      rng: np.random.Generator,
                      lr_schedule: Optional[LrSchedule] = None,
                      batch_size: Optional[int] = None,
                      params: Optional[DetectorParams] = None
                      ) -> tuple[DetectorParams, float]:
    """Hard-label detector training (phase 1, source-only, target oracle)."""
    num_classes = config.world.num_classes
    feature_dim = config.world.feature_dim
    if params is None:
        params = init_params(feature_dim, num_classes, rng)
    if batch_size is None:
        batch_size = sum(config.batch_mix)
    n_pos_draw = batch_size // 2
    n_neg_draw = batch_size - n_pos_draw
    if pools.n_pos == 0:
        raise ValueError("supervised pool has no positive instances")
    loss = float("nan")
    for step in range(steps):
        pi = rng.integers(0, pools.n_pos, size=n_pos_draw)
        ni = rng.integers(0, pools.n_neg, size=n_neg_draw)
        feats = np.concatenate([
            _gather_feats(cache, pools.pos_scene[pi], pools.pos_prop[pi]),
            _gather_feats(cache, pools.neg_scene[ni], pools.neg_prop[ni]),
        ])
        labels = np.concatenate([
            _one_hot(pools.pos_class[pi], num_classes),
            _one_hot(np.zeros(n_neg_draw, dtype=int), num_classes),
        ])
        fg_mask = np.concatenate([np.ones(n_pos_draw, bool), np.zeros(n_neg_draw, bool)])
        offsets = np.concatenate([pools.pos_offsets[pi], np.zeros((n_neg_draw, 4))])
        lr = lr_schedule.at(step) if lr_schedule else config.lr_schedule.initial
        loss, grads = pooled_loss_and_gradients(params, feats, labels, fg_mask,
                                                offsets, config.reg_weight)
        params = sgd_step(params, grads, lr)
    return params, loss


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def phase1_mine(config: PipelineConfig,
                source: Optional[LabeledDataset] = None,
                target: Optional[LabeledDataset] = None
                ) -> tuple[DetectorParams, PseudoLabelSet, PhaseReport]:
    """Train on source, mine scored boxes on every target scene."""
    t0 = time.perf_counter()
    if source is None or target is None:
        source, target, _ = make_datasets(config)
    cache = _SceneCache(source, config.anchors)
    boxes, classes = _gt_arrays(source)
    pools = _build_pools(cache, boxes, classes)
    rng = np.random.default_rng([3, config.seed])
    params, final_loss = _train_supervised(
        config, cache, pools, config.phase1_steps, rng,
        lr_schedule=LrSchedule(config.lr_schedule.initial, config.phase1_steps,
                               config.lr_schedule.initial))

    per_scene: list[list[PseudoLabelEntry]] = []
    for scene in target.scenes:
        dets = detect(params, scene, config.anchors,
                      config.mining_score_threshold, config.nms_iou)
        per_scene.append([PseudoLabelEntry(d.box, d.class_index, d.score)
                          for d in dets])
    pseudo = PseudoLabelSet(per_scene)
    if pseudo.total() == 0:
        import warnings
        warnings.warn("phase 1 mined no pseudo-labels; retraining will be source-only",
                      stacklevel=2)

    quality = pseudo_label_quality(
        _pseudo_records(pseudo), _gt_records(target))
    report = PhaseReport(1, config.phase1_steps, final_loss,
                         time.perf_counter() - t0, quality)
    return params, pseudo, report


def _pseudo_records(pseudo: PseudoLabelSet) -> list[DetectionRecord]:
    recs = []
    for si, entries in enumerate(pseudo.per_scene):
        for e in entries:
            recs.append(DetectionRecord(si, e.class_index, e.score, e.box))
    return recs


def _gt_records(dataset: LabeledDataset) -> list[GroundTruthRecord]:
    recs = []
    for si, anns in enumerate(dataset.annotations):
        for a in anns:
            recs.append(GroundTruthRecord(si, a.class_index, a.box))
    return recs


def phase2_rescore(detector_params: DetectorParams, pseudo: PseudoLabelSet,
                   config: PipelineConfig, source: LabeledDataset,
                   target: LabeledDataset) -> PseudoLabelSet:
    """Train the auxiliary crop classifier and attach logits to every entry."""
    del detector_params  # the aux model is trained independently
    rng = np.random.default_rng([4, config.seed])
    num_classes = config.world.num_classes

    source_crops: list[auxcls.CropSample] = []
    for scene, anns in zip(source.scenes, source.annotations):
        known = [a.box for a in anns]
        for a in anns:
            source_crops.append(auxcls.CropSample(
                auxcls.crop_features(scene, a.box), a.class_index, "source_clean"))
        for box in auxcls.mine_background_boxes(
                scene, known, config.background_crops_per_scene, rng):
            source_crops.append(auxcls.CropSample(
                auxcls.crop_features(scene, box), 0, "mined_background"))

    target_crops: list[auxcls.CropSample] = []
    crop_feats_per_entry: list[list[np.ndarray]] = []
    for scene, entries in zip(target.scenes, pseudo.per_scene):
        feats_here = []
        known = [e.box for e in entries]
        for e in entries:
            f = auxcls.crop_features(scene, e.box)
            feats_here.append(f)
            target_crops.append(auxcls.CropSample(f, e.class_index, "target_noisy"))
        crop_feats_per_entry.append(feats_here)
        for box in auxcls.mine_background_boxes(
                scene, known, config.background_crops_per_scene, rng):
            source_crops.append(auxcls.CropSample(
                auxcls.crop_features(scene, box), 0, "mined_background"))

    aux_schedule = AlphaSchedule(100.0, 0.5,
                                 max(1, round(config.phase2_steps * 5 / 7)))
    aux_params = auxcls.train_aux(source_crops, target_crops, num_classes,
                                  aux_schedule, config.epsilon_aux,
                                  config.phase2_steps, config.aux_lr, rng)

    rescored: list[list[PseudoLabelEntry]] = []
    for entries, feats_here in zip(pseudo.per_scene, crop_feats_per_entry):
        new_entries = []
        for e, f in zip(entries, feats_here):
            new_entries.append(PseudoLabelEntry(
                e.box, e.class_index, e.score,
                aux_logits=auxcls.score_logits(aux_params, f)))
        rescored.append(new_entries)
    return PseudoLabelSet(rescored)


def phase3_robust_retrain(pseudo: PseudoLabelSet, config: PipelineConfig,
                          source: LabeledDataset, target: LabeledDataset,
                          warm_params: Optional[DetectorParams] = None
                          ) -> tuple[DetectorParams, PhaseReport]:
    """Retrain from scratch on mixed minibatches with per-step refinement."""
    t0 = time.perf_counter()
    num_classes = config.world.num_classes
    flags = config.ablation
    n_source, n_target = config.batch_mix

    src_cache = _SceneCache(source, config.anchors)
    src_boxes, src_classes = _gt_arrays(source)
    src_pools = _build_pools(src_cache, src_boxes, src_classes)

    tgt_cache = _SceneCache(target, config.anchors)
    p_boxes, p_classes, p_aux = _pseudo_arrays(pseudo, num_classes,
                                               config.epsilon_aux)
    tgt_pools = _build_pools(tgt_cache, p_boxes, p_classes, p_aux)
    have_target = n_target > 0 and tgt_pools.n_pos > 0
    n_target_scenes = len(target.scenes)

    rng = np.random.default_rng([5, config.seed])
    if config.warm_start and warm_params is not None:
        params = warm_params.copy()
    else:
        params = init_params(config.world.feature_dim, num_classes, rng)

    n_pos_s = max(1, n_source // 2)
    n_neg_s = n_source - n_pos_s
    loss = float("nan")
    for step in range(config.phase3_steps):
        alpha = config.alpha_schedule.alpha_at(step)
        lr = config.lr_schedule.at(step)

        pi = rng.integers(0, src_pools.n_pos, size=n_pos_s)
        ni = rng.integers(0, src_pools.n_neg, size=n_neg_s)
        feats = [
            _gather_feats(src_cache, src_pools.pos_scene[pi], src_pools.pos_prop[pi]),
            _gather_feats(src_cache, src_pools.neg_scene[ni], src_pools.neg_prop[ni]),
        ]
        labels = [
            _one_hot(src_pools.pos_class[pi], num_classes),
            _one_hot(np.zeros(n_neg_s, dtype=int), num_classes),
        ]
        fg = [np.ones(n_pos_s, bool), np.zeros(n_neg_s, bool)]
        offsets = [src_pools.pos_offsets[pi], np.zeros((n_neg_s, 4))]

        if have_target:
            ti = rng.integers(0, tgt_pools.n_pos, size=n_target)
            t_feats = _gather_feats(tgt_cache, tgt_pools.pos_scene[ti],
                                    tgt_pools.pos_prop[ti])
            t_props = tgt_cache.grid[tgt_pools.pos_prop[ti]]

            if flags.cls_cor:
                live_logits = t_feats @ params.cls_weights
                fused_logits = (live_logits + alpha * tgt_pools.pos_aux_logits[ti]) / (1.0 + alpha)
                t_labels = _softmax_rows(fused_logits)
            else:
                t_labels = _one_hot(tgt_pools.pos_class[ti], num_classes)

            if flags.box_r:
                live_offsets = t_feats @ params.reg_weights
                live_boxes = decode_boxes(t_props, live_offsets)
                fused = (live_boxes + alpha * tgt_pools.pos_boxes[ti]) / (1.0 + alpha)
                t_offsets = encode_boxes(fused, t_props)
            else:
                t_offsets = tgt_pools.pos_offsets[ti]

            feats.append(t_feats)
            labels.append(t_labels)
            fg.append(np.ones(n_target, bool))
            offsets.append(t_offsets)

            # Hard negatives from one target scene: proposals far from every
            # pseudo-label that the live model nevertheless scores as
            # foreground. Those are exactly where mining misses show up.
            hn = config.hard_negative_count
            if hn > 0:
                si = int(rng.integers(0, n_target_scenes))
                cand = tgt_pools.neg_by_scene[si]
                if cand.size:
                    cand_feats = tgt_cache.feats[si][cand]
                    probs = _softmax_rows(cand_feats @ params.cls_weights)
                    fg_score = probs[:, 1:].max(axis=1)
                    top = np.argsort(-fg_score, kind="stable")[:hn]
                    top = top[fg_score[top] >= FN_SCORE_FLOOR]
                    hn_feats = cand_feats[top]
                    if flags.fn_cor:
                        soft_bg = softened_one_hot(0, config.epsilon_fn,
                                                   num_classes).probabilities()
                        hn_labels = np.tile(soft_bg, (hn_feats.shape[0], 1))
                    else:
                        hn_labels = _one_hot(np.zeros(hn_feats.shape[0], dtype=int),
                                             num_classes)
                    feats.append(hn_feats)
                    labels.append(hn_labels)
                    fg.append(np.zeros(hn_feats.shape[0], bool))
                    offsets.append(np.zeros((hn_feats.shape[0], 4)))

        loss, grads = pooled_loss_and_gradients(
            params, np.concatenate(feats), np.concatenate(labels),
            np.concatenate(fg), np.concatenate(offsets), config.reg_weight)
        params = sgd_step(params, grads, lr)

    report = PhaseReport(3, config.phase3_steps, loss, time.perf_counter() - t0)
    return params, report


# ----------------------------------------------------------------------
# experiment harness
# ----------------------------------------------------------------------

def evaluate_detector(params: DetectorParams, dataset: LabeledDataset,
                      config: PipelineConfig) -> float:
    """mAP at IoU 0.5 over the dataset's ground truth."""
    detections: list[DetectionRecord] = []
    for si, scene in enumerate(dataset.scenes):
        for d in detect(params, scene, config.anchors,
                        config.eval_score_threshold, config.nms_iou):
            detections.append(DetectionRecord(si, d.class_index, d.score, d.box))
    return mean_ap(detections, _gt_records(dataset))


def variant_config(config: PipelineConfig, variant: str) -> PipelineConfig:
    """Ablation flags and alpha schedule implied by a named variant."""
    if variant in ("source_only", "oracle_target"):
        return replace(config,
                       batch_mix=(sum(config.batch_mix), 0),
                       ablation=AblationFlags(False, False, False))
    if variant == "pseudo_label":
        return replace(config,
                       ablation=AblationFlags(False, False, False),
                       alpha_schedule=AlphaSchedule.constant(0.0),
                       use_aux=False)
    if variant == "ours_cls":
        return replace(config, ablation=AblationFlags(True, False, False))
    if variant == "ours_cls_box":
        return replace(config, ablation=AblationFlags(True, True, False))
    if variant == "ours_full":
        return replace(config, ablation=AblationFlags(True, True, True))
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def run_variant(config: PipelineConfig, variant: str,
                source: LabeledDataset, target: LabeledDataset,
                evalset: LabeledDataset,
                shared_phase1: Optional[tuple[DetectorParams, PseudoLabelSet, PhaseReport]] = None,
                shared_phase2: Optional[PseudoLabelSet] = None
                ) -> ReportRow:
    vcfg = variant_config(config, variant)
    if variant == "source_only":
        pseudo = PseudoLabelSet([[] for _ in target.scenes])
        params, _ = phase3_robust_retrain(pseudo, vcfg, source, target)
        return ReportRow(variant, config.seed,
                         evaluate_detector(params, evalset, vcfg))
    if variant == "oracle_target":
        pseudo = PseudoLabelSet([[] for _ in target.scenes])
        params, _ = phase3_robust_retrain(pseudo, vcfg, target, target)
        return ReportRow(variant, config.seed,
                         evaluate_detector(params, evalset, vcfg))

    if shared_phase1 is None:
        shared_phase1 = phase1_mine(vcfg, source, target)
    p1_params, pseudo, p1_report = shared_phase1
    if vcfg.use_aux:
        if shared_phase2 is None:
            shared_phase2 = phase2_rescore(p1_params, pseudo, vcfg, source, target)
        pseudo = shared_phase2
    params, _ = phase3_robust_retrain(pseudo, vcfg, source, target,
                                      warm_params=p1_params)
    return ReportRow(variant, config.seed,
                     evaluate_detector(params, evalset, vcfg),
                     pseudo_quality=p1_report.quality)


def run_experiment(config: PipelineConfig, variants: list[str],
                   seeds: Optional[list[int]] = None) -> ExperimentReport:
    """All requested variants over all seeds, sharing datasets and the
    phase 1/2 artifacts per seed. Deterministic per (variant, seed)."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    if seeds is None:
        seeds = [config.seed]
    rows: list[ReportRow] = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        source, target, evalset = make_datasets(cfg)
        shared_phase1 = None
        shared_phase2 = None
        needs_mining = [v for v in variants
                        if v not in ("source_only", "oracle_target")]
        if needs_mining:
            shared_phase1 = phase1_mine(cfg, source, target)
            if any(variant_config(cfg, v).use_aux for v in needs_mining):
                shared_phase2 = phase2_rescore(shared_phase1[0], shared_phase1[1],
                                               cfg, source, target)
        for variant in variants:
            rows.append(run_variant(cfg, variant, source, target, evalset,
                                    shared_phase1, shared_phase2))
    rows.sort(key=lambda r: (variants.index(r.variant), r.seed))
    return ExperimentReport(rows)
