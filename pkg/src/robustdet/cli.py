"""Command-line entry point.

Verbs:
  gen-data         generate source/target dataset files from a config
  run              run selected pipeline variants and emit reports
  ablate           run the full six-variant ablation grid
  verify-theorems  cross-check both closed-form fusions against their
                   numerical minimizers

Reports are CSV (tables) plus JSON (machine summary); a run manifest is
written before work starts and finalized afterwards. Outputs are
byte-identical across reruns except the manifest's wall-clock fields.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, _config_to_dict, load_config
from .fusion import (
    BoundingBox,
    CategoricalDistribution,
    fuse_box,
    fuse_categorical,
    oracle_minimize_categorical,
    oracle_minimize_gaussian,
    total_variation,
)
from .pipeline import VARIANTS, ExperimentReport, PipelineConfig, run_experiment
from .world import apply_domain_shift, generate_dataset, save_dataset
from .pipeline import dataset_seeds

__all__ = ["main"]


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _write_manifest(out_dir: Path, config: PipelineConfig, seeds: list[int],
                    outputs: list[str], status: str,
                    started: float, finished: float | None) -> None:
    manifest = {
        "artifact_version": __version__,
        "status": status,
        "config": _config_to_dict(config),
        "seeds": seeds,
        "outputs": outputs,
        "wall_clock": {
            "started_unix": started,
            "finished_unix": finished,
            "elapsed_seconds": (finished - started) if finished else None,
        },
    }
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    tmp.replace(out_dir / "manifest.json")


def _report_csv(report: ExperimentReport) -> str:
    lines = ["variant,seed,map,pseudo_class_accuracy,pseudo_mean_iou,pseudo_fp,pseudo_fn"]
    for row in report.rows:
        q = row.pseudo_quality
        if q is not None:
            extra = f"{_fmt(q.class_accuracy)},{_fmt(q.mean_iou)},{q.fp_count},{q.fn_count}"
        else:
            extra = ",,,"
        lines.append(f"{row.variant},{row.seed},{_fmt(row.map_score)},{extra}")
    for variant in report.variants():
        lines.append(f"{variant},mean,{_fmt(report.mean_map(variant))},,,,")
    return "\n".join(lines) + "\n"


def _summary_json(report: ExperimentReport) -> dict:
    summary = {}
    for variant in report.variants():
        per_seed = {str(r.seed): r.map_score for r in report.rows
                    if r.variant == variant}
        summary[variant] = {"mean_map": report.mean_map(variant),
                            "per_seed_map": per_seed}
    return summary


def _print_table(report: ExperimentReport) -> None:
    flag_map = {
        "source_only": ("", "", ""),
        "pseudo_label": ("", "", ""),
        "ours_cls": ("x", "", ""),
        "ours_cls_box": ("x", "x", ""),
        "ours_full": ("x", "x", "x"),
        "oracle_target": ("", "", ""),
    }
    print(f"{'method':<14} {'Cls-Cor':^8} {'Box-R':^6} {'FN-Cor':^7} {'AP':>8}")
    for variant in report.variants():
        c, b, f = flag_map.get(variant, ("", "", ""))
        print(f"{variant:<14} {c:^8} {b:^6} {f:^7} {report.mean_map(variant):>8.4f}")


def cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        config, _ = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    s_seed, t_seed, _ = dataset_seeds(config.seed)
    source = generate_dataset(config.world, config.n_source_scenes, s_seed, "source")
    target = generate_dataset(apply_domain_shift(config.world),
                              config.n_target_scenes, t_seed, "target")
    src_path = out_dir / "source.jsonl"
    tgt_path = out_dir / "target.jsonl"
    save_dataset(source, src_path)
    save_dataset(target, tgt_path)
    n_src_objects = sum(len(a) for a in source.annotations)
    n_tgt_objects = sum(len(a) for a in target.annotations)
    print(f"wrote {src_path} ({len(source)} scenes, {n_src_objects} objects)")
    print(f"wrote {tgt_path} ({len(target)} scenes, {n_tgt_objects} objects)")
    return 0


def _run_and_report(config: PipelineConfig, variants: list[str],
                    seeds: list[int], out_dir: Path,
                    print_table: bool = False) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    _write_manifest(out_dir, config, seeds, [], "running", started, None)
    outputs = ["report.csv", "summary.json"]
    try:
        report = run_experiment(config, variants, seeds)
    except Exception as exc:  # noqa: BLE001 - surface any phase failure
        _write_manifest(out_dir, config, seeds, [], f"failed: {exc}",
                        started, time.time())
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (out_dir / "report.csv").write_text(_report_csv(report), encoding="utf-8")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_summary_json(report), fh, indent=2, sort_keys=True)
    _write_manifest(out_dir, config, seeds, outputs, "complete",
                    started, time.time())
    if print_table:
        _print_table(report)
    else:
        for variant in report.variants():
            print(f"{variant}: mean mAP {report.mean_map(variant):.4f}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config, seeds = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",") if args.variants else ["source_only", "ours_full"]
    for v in variants:
        if v not in VARIANTS:
            print(f"error: unknown variant {v!r}; expected one of {VARIANTS}",
                  file=sys.stderr)
            return 1
    return _run_and_report(config, variants, seeds, Path(args.out))


def cmd_ablate(args: argparse.Namespace) -> int:
    try:
        config, seeds = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    return _run_and_report(config, list(VARIANTS), seeds, Path(args.out),
                           print_table=True)


def cmd_verify_theorems(args: argparse.Namespace) -> int:
    trials = args.trials
    tolerance = args.tolerance
    rng = np.random.default_rng(0)

    max_tv = 0.0
    worst_cat = None
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        p1 = CategoricalDistribution(rng.normal(0, 2, size=n))
        p2 = CategoricalDistribution(rng.normal(0, 2, size=n))
        alpha = float(rng.uniform(0, 100))
        closed = fuse_categorical(p1, p2, alpha)
        numeric = oracle_minimize_categorical(p1, p2, alpha)
        tv = total_variation(closed, numeric)
        if tv > max_tv:
            max_tv, worst_cat = tv, (p1.logits.tolist(), p2.logits.tolist(), alpha)

    max_coord = 0.0
    worst_box = None
    for _ in range(trials):
        b1 = BoundingBox(*rng.uniform(1, 10, size=2), *rng.uniform(1, 10, size=2))
        b2 = BoundingBox(*rng.uniform(1, 10, size=2), *rng.uniform(1, 10, size=2))
        alpha = float(rng.uniform(0, 100))
        sigma = float(rng.choice([0.1, 1.0, 10.0]))
        closed = fuse_box(b1, b2, alpha)
        numeric = oracle_minimize_gaussian(b1, b2, alpha, sigma)
        err = float(np.max(np.abs(closed.as_array() - numeric.as_array())))
        if err > max_coord:
            max_coord, worst_box = err, (b1.as_array().tolist(),
                                         b2.as_array().tolist(), alpha, sigma)

    print(f"categorical fusion: max TV deviation {max_tv:.3e} over {trials} trials")
    print(f"gaussian fusion:    max coordinate deviation {max_coord:.3e} over {trials} trials")
    ok = max_tv < tolerance and max_coord < tolerance
    if not ok:
        if max_tv >= tolerance:
            print(f"FAIL categorical at tolerance {tolerance}: instance {worst_cat}",
                  file=sys.stderr)
        if max_coord >= tolerance:
            print(f"FAIL gaussian at tolerance {tolerance}: instance {worst_box}",
                  file=sys.stderr)
        return 1
    print(f"all deviations below tolerance {tolerance}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustdet",
        description="Robust self-training for domain-adaptive detection "
                    "on a synthetic testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate source/target dataset files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run pipeline variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None,
                   help="comma-separated subset of " + ",".join(VARIANTS))
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the full six-variant ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-theorems",
                       help="check closed-form fusions against numerical minimizers")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_verify_theorems)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
