"""Tests for the three-phase pipeline and the experiment harness.

Everything here runs on a deliberately small configuration (few scenes,
few steps) so the whole module stays in the seconds range; the full-size
behavior is covered by the acceptance suite.
"""

from dataclasses import replace

import numpy as np
import pytest

from robustdet.fusion import AlphaSchedule
from robustdet.pipeline import (
    VARIANTS,
    AblationFlags,
    LrSchedule,
    PipelineConfig,
    PseudoLabelSet,
    dataset_seeds,
    evaluate_detector,
    make_datasets,
    phase1_mine,
    phase2_rescore,
    phase3_robust_retrain,
    run_experiment,
    run_variant,
    variant_config,
)
from robustdet.world import DomainShift, WorldConfig


@pytest.fixture(scope="module")
def small_config():
    return PipelineConfig(
        world=WorldConfig(domain_shift=DomainShift(prototype_shift=1.0,
                                                   extra_noise=0.15)),
        n_source_scenes=30,
        n_target_scenes=30,
        n_eval_scenes=10,
        phase1_steps=300,
        phase2_steps=200,
        phase3_steps=300,
        alpha_schedule=AlphaSchedule(100.0, 0.5, 200),
        lr_schedule=LrSchedule(initial=0.1, drop_step=250, dropped=0.001),
        seed=0,
    )


@pytest.fixture(scope="module")
def small_run(small_config):
    source, target, evalset = make_datasets(small_config)
    params, pseudo, report = phase1_mine(small_config, source, target)
    return source, target, evalset, params, pseudo, report


# ----------------------------------------------------------------------
# plumbing
# ----------------------------------------------------------------------

def test_dataset_seeds_are_distinct_per_run_seed():
    assert dataset_seeds(0) == (1, 2, 3)
    assert dataset_seeds(7) == (71, 72, 73)
    seen = set()
    for s in range(20):
        trio = dataset_seeds(s)
        assert len(set(trio)) == 3
        assert not seen & set(trio)
        seen |= set(trio)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(mining_score_threshold=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(phase3_steps=0)
    with pytest.raises(ValueError):
        PipelineConfig(batch_mix=(0, 4))


def test_variant_config_mapping():
    cfg = PipelineConfig()
    for v in ("source_only", "oracle_target"):
        vc = variant_config(cfg, v)
        assert vc.batch_mix == (16, 0)
    pl = variant_config(cfg, "pseudo_label")
    assert pl.ablation == AblationFlags(False, False, False)
    assert pl.alpha_schedule.alpha_at(0) == 0.0
    assert pl.use_aux is False
    assert variant_config(cfg, "ours_cls").ablation == AblationFlags(True, False, False)
    assert variant_config(cfg, "ours_cls_box").ablation == AblationFlags(True, True, False)
    assert variant_config(cfg, "ours_full").ablation == AblationFlags(True, True, True)
    with pytest.raises(ValueError):
        variant_config(cfg, "ours_everything")


def test_make_datasets_shapes_and_domains(small_config):
    source, target, evalset = make_datasets(small_config)
    assert (len(source), len(target), len(evalset)) == (30, 30, 10)
    assert source.domain_tag == "source"
    assert target.domain_tag == "target"
    assert evalset.domain_tag == "target"
    # The shift must actually move the target prototypes.
    assert not np.allclose(source.config.class_prototypes,
                           target.config.class_prototypes)


# ----------------------------------------------------------------------
# phase 1
# ----------------------------------------------------------------------

def test_phase1_mines_scored_boxes(small_run):
    _, target, _, params, pseudo, report = small_run
    assert len(pseudo.per_scene) == len(target.scenes)
    assert pseudo.total() > 0
    for entries in pseudo.per_scene:
        for e in entries:
            assert e.score >= 0.7
            assert 1 <= e.class_index <= 3
            assert e.aux_logits is None
    assert report.phase == 1
    assert report.quality is not None
    assert report.quality.num_gt > 0


def test_phase1_is_deterministic(small_config, small_run):
    source, target, _, params, pseudo, _ = small_run
    params2, pseudo2, _ = phase1_mine(small_config, source, target)
    assert np.array_equal(params.cls_weights, params2.cls_weights)
    assert np.array_equal(params.reg_weights, params2.reg_weights)
    assert pseudo.total() == pseudo2.total()
    for a, b in zip(pseudo.per_scene, pseudo2.per_scene):
        for x, y in zip(a, b):
            assert x.score == y.score
            assert np.array_equal(x.box.as_array(), y.box.as_array())


# ----------------------------------------------------------------------
# phase 2
# ----------------------------------------------------------------------

def test_phase2_attaches_logits_everywhere(small_config, small_run):
    source, target, _, params, pseudo, _ = small_run
    rescored = phase2_rescore(params, pseudo, small_config, source, target)
    assert rescored.total() == pseudo.total()
    for entries, originals in zip(rescored.per_scene, pseudo.per_scene):
        for e, o in zip(entries, originals):
            assert e.aux_logits is not None
            assert e.aux_logits.shape == (4,)
            assert np.all(np.isfinite(e.aux_logits))
            assert e.class_index == o.class_index
            assert e.score == o.score


# ----------------------------------------------------------------------
# phase 3
# ----------------------------------------------------------------------

def test_phase3_without_pseudo_labels_is_source_training(small_config, small_run):
    source, target, evalset, *_ = small_run
    empty = PseudoLabelSet([[] for _ in target.scenes])
    vcfg = variant_config(small_config, "source_only")
    params, report = phase3_robust_retrain(empty, vcfg, source, target)
    assert report.phase == 3
    assert np.isfinite(report.final_loss)
    assert 0.0 <= evaluate_detector(params, evalset, vcfg) <= 1.0


def test_baseline_reduction_is_bit_identical(small_config, small_run):
    """pseudo_label must equal the full method with alpha pinned to 0 and
    Box-R / FN-Cor disabled, parameter for parameter."""
    source, target, _, _, pseudo, _ = small_run
    as_variant = variant_config(small_config, "pseudo_label")
    as_ours = replace(small_config,
                      ablation=AblationFlags(cls_cor=False, box_r=False,
                                             fn_cor=False),
                      alpha_schedule=AlphaSchedule.constant(0.0),
                      use_aux=False)
    pa, _ = phase3_robust_retrain(pseudo, as_variant, source, target)
    pb, _ = phase3_robust_retrain(pseudo, as_ours, source, target)
    assert np.array_equal(pa.cls_weights, pb.cls_weights)
    assert np.array_equal(pa.reg_weights, pb.reg_weights)


def test_phase3_depends_on_ablation_flags(small_config, small_run):
    source, target, _, params, pseudo, _ = small_run
    rescored = phase2_rescore(params, pseudo, small_config, source, target)
    runs = {}
    for name in ("pseudo_label", "ours_cls", "ours_full"):
        vcfg = variant_config(small_config, name)
        p, _ = phase3_robust_retrain(rescored, vcfg, source, target)
        runs[name] = p
    assert not np.array_equal(runs["pseudo_label"].cls_weights,
                              runs["ours_cls"].cls_weights)
    assert not np.array_equal(runs["ours_cls"].cls_weights,
                              runs["ours_full"].cls_weights)


def test_aux_fallback_when_phase2_skipped(small_config, small_run):
    """cls_cor must still run when entries carry no aux logits, falling back
    to the softened one-hot of the mined class."""
    source, target, _, _, pseudo, _ = small_run
    vcfg = replace(variant_config(small_config, "ours_cls"), use_aux=False)
    params, report = phase3_robust_retrain(pseudo, vcfg, source, target)
    assert np.all(np.isfinite(params.cls_weights))
    assert np.isfinite(report.final_loss)


def test_warm_start_changes_initialization(small_config, small_run):
    source, target, _, p1_params, pseudo, _ = small_run
    cold_cfg = variant_config(small_config, "ours_full")
    warm_cfg = replace(cold_cfg, warm_start=True, phase3_steps=1)
    cold, _ = phase3_robust_retrain(pseudo, replace(cold_cfg, phase3_steps=1),
                                    source, target, warm_params=p1_params)
    warm, _ = phase3_robust_retrain(pseudo, warm_cfg, source, target,
                                    warm_params=p1_params)
    assert not np.array_equal(cold.cls_weights, warm.cls_weights)


# ----------------------------------------------------------------------
# harness
# ----------------------------------------------------------------------

def test_run_experiment_rows_and_sharing(small_config):
    report = run_experiment(small_config, ["source_only", "ours_full"],
                            seeds=[0, 1])
    assert [(r.variant, r.seed) for r in report.rows] == [
        ("source_only", 0), ("source_only", 1),
        ("ours_full", 0), ("ours_full", 1),
    ]
    assert report.variants() == ["source_only", "ours_full"]
    for r in report.rows:
        assert 0.0 <= r.map_score <= 1.0
    assert report.rows[2].pseudo_quality is not None
    assert report.rows[0].pseudo_quality is None
    with pytest.raises(KeyError):
        report.mean_map("oracle_target")


def test_run_experiment_rejects_unknown_variant(small_config):
    with pytest.raises(ValueError, match="unknown variant"):
        run_experiment(small_config, ["ours_full", "mystery"], seeds=[0])


def test_run_variant_matches_experiment_row(small_config):
    report = run_experiment(small_config, ["pseudo_label"], seeds=[0])
    source, target, evalset = make_datasets(small_config)
    row = run_variant(small_config, "pseudo_label", source, target, evalset)
    assert row.map_score == report.rows[0].map_score


def test_experiment_is_deterministic(small_config):
    a = run_experiment(small_config, ["ours_full"], seeds=[0])
    b = run_experiment(small_config, ["ours_full"], seeds=[0])
    assert a.rows[0].map_score == b.rows[0].map_score


@pytest.mark.filterwarnings("ignore:phase 1 mined no pseudo-labels")
def test_all_variant_names_run(small_config):
    tiny = replace(small_config, phase1_steps=60, phase2_steps=40,
                   phase3_steps=60, n_eval_scenes=4)
    report = run_experiment(tiny, list(VARIANTS), seeds=[0])
    assert report.variants() == list(VARIANTS)
