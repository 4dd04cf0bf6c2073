"""End-to-end stages shared by the CLI: data generation, training, attack,
and detection. Each stage reads and writes plain files so stages can run as
separate processes, and every output is byte-deterministic for a fixed
config.

The detection stage deliberately takes only a weights file and the clean
detection splits; it has no access to (and no argument for) the training
split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcbdet.attack import (
    AttackConfig,
    attack_success_rate,
    choose_center,
    load_pattern,
    make_pattern,
    poison_dataset,
    save_pattern,
)
from pcbdet.classifier import (
    ClassifierWeights,
    accuracy,
    load_weights,
    predict,
    save_weights,
    train,
)
from pcbdet.config import RunConfig
from pcbdet.estimation import (
    EstimationParams,
    estimate_group_location,
    estimate_samplewise_location,
)
from pcbdet.geometry import Dataset, generate_shape, load_dataset, save_dataset
from pcbdet.inference import (
    ClassStatistics,
    DetectionReport,
    combined_statistic,
    compute_r_s,
    compute_w,
    compute_z,
    detect,
)
from pcbdet.report import write_histogram_svg, write_report_json, write_statistics_csv

__all__ = [
    "SPLIT_NAMES",
    "DetectionInputError",
    "generate_splits",
    "gen_data_stage",
    "train_stage",
    "attack_stage",
    "assemble_statistics",
    "run_detection",
    "detect_stage",
]

SPLIT_NAMES = ("train", "test", "clean", "reserve")

# A class whose clean detection set cannot reach this size aborts detection.
MIN_DETECTION_CLOUDS = 5


class DetectionInputError(ValueError):
    """Clean detection set unusable (reserve pool exhausted below minimum)."""


def generate_splits(cfg: RunConfig) -> dict:
    """Deterministic per-class splits; the clean/reserve clouds are generated
    alongside but never enter the training split (disjoint seed indices)."""
    d = cfg.data
    counts = {
        "train": d.train_per_class,
        "test": d.test_per_class,
        "clean": d.clean_per_class,
        "reserve": d.reserve_per_class,
    }
    splits = {}
    base = 0
    ranges = {}
    for name in SPLIT_NAMES:
        clouds, labels = [], []
        for k in range(d.classes):
            for i in range(counts[name]):
                seed = d.seed * 1_000_000 + base + i
                clouds.append(generate_shape(k, d.points_per_cloud, seed))
                labels.append(k)
        splits[name] = Dataset(clouds=clouds, labels=np.asarray(labels), num_classes=d.classes)
        ranges[name] = [base, base + counts[name]]
        base += counts[name]
    splits["_ranges"] = ranges
    return splits


def gen_data_stage(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(cfg)
    ranges = splits.pop("_ranges")
    for name in SPLIT_NAMES:
        save_dataset(splits[name], out / f"{name}.txt")
    manifest = {
        "classes": cfg.data.classes,
        "points_per_cloud": cfg.data.points_per_cloud,
        "data_seed": cfg.data.seed,
        "per_class_counts": {name: len(splits[name]) // cfg.data.classes for name in SPLIT_NAMES},
        "totals": {name: len(splits[name]) for name in SPLIT_NAMES},
        # Per-class sample-id ranges (id = per-class generation index); the
        # splits are disjoint exactly when these ranges are.
        "sample_id_ranges": ranges,
    }
    with open(out / "manifest.json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_split(out_dir, name: str, num_classes: int) -> Dataset:
    path = Path(out_dir) / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing split file {path}; run gen-data first")
    return load_dataset(path, num_classes=num_classes)


def train_stage(cfg: RunConfig, out_dir, weights_name: str = "clean.weights") -> dict:
    out = Path(out_dir)
    train_ds = _load_split(out, "train", cfg.data.classes)
    test_ds = _load_split(out, "test", cfg.data.classes)
    w = train(train_ds, cfg.train)
    save_weights(w, out / weights_name)
    metrics = {"test_accuracy": accuracy(w, test_ds), "weights": weights_name}
    with open(out / "train-metrics.json", "w", encoding="ascii") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def attack_stage(cfg: RunConfig, out_dir, clean_weights=None) -> dict:
    """Poison, retrain, and record attack metrics.

    clean_weights (a path) supplies the reference model for the clean-accuracy
    delta; without it the clean model is trained here with the same config.
    """
    out = Path(out_dir)
    train_ds = _load_split(out, "train", cfg.data.classes)
    test_ds = _load_split(out, "test", cfg.data.classes)
    a = cfg.attack
    acfg = AttackConfig(
        source=a.source,
        target=a.target,
        poison_count=a.poison_count,
        pattern_points=a.pattern_points,
        pattern_radius=a.pattern_radius,
        seed=a.seed,
        standoff=a.standoff,
        candidates=a.candidates,
    )
    source_clouds = train_ds.clouds_of_class(a.source)
    center = choose_center(source_clouds, a.standoff, a.candidates, a.seed)
    pattern = make_pattern(center, a.pattern_points, a.seed, radius=a.pattern_radius)
    poisoned = poison_dataset(train_ds, acfg, pattern)
    w_bad = train(poisoned, cfg.train)

    if clean_weights is not None:
        w_clean = load_weights(clean_weights)
    else:
        w_clean = train(train_ds, cfg.train)
    held_out = test_ds.clouds_of_class(a.source)
    asr = attack_success_rate(w_bad, held_out, pattern, a.target)
    acc_bad = accuracy(w_bad, test_ds)
    acc_clean = accuracy(w_clean, test_ds)

    save_pattern(pattern, out / "pattern.txt")
    save_weights(w_bad, out / "poisoned.weights")
    metrics = {
        "source": a.source,
        "target": a.target,
        "attack_success_rate": asr,
        "poisoned_test_accuracy": acc_bad,
        "clean_test_accuracy": acc_clean,
        "clean_accuracy_delta": acc_clean - acc_bad,
    }
    with open(out / "attack-metrics.json", "w", encoding="ascii") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def build_detection_sets(w: ClassifierWeights, clean: Dataset, reserve: Dataset | None, target_size: int):
    """Per-class clean clouds the classifier gets right.

    Misclassified clouds are replaced from the reserve pool (also filtered to
    correctly classified ones); a class may proceed with fewer than
    target_size but at least MIN_DETECTION_CLOUDS, else detection aborts.
    """
    sets = {}
    for k in range(clean.num_classes):
        picked = [X for X in clean.clouds_of_class(k) if predict(w, X) == k]
        if len(picked) < target_size and reserve is not None:
            for X in reserve.clouds_of_class(k):
                if len(picked) >= target_size:
                    break
                if predict(w, X) == k:
                    picked.append(X)
        if len(picked) > target_size:
            picked = picked[:target_size]
        if len(picked) < MIN_DETECTION_CLOUDS:
            raise DetectionInputError(
                f"class {k}: only {len(picked)} correctly classified clean clouds "
                f"(minimum {MIN_DETECTION_CLOUDS}); reserve pool exhausted"
            )
        sets[k] = picked
    return sets


def assemble_statistics(w, detection_sets, params: EstimationParams, seed: int, trace_dir=None):
    """Group + sample-wise estimation for every class, then the statistics.

    Failed group estimates keep the r = 0 convention; their z plays no part
    in the similarity normalization.
    """
    K = w.num_classes
    groups = []
    for s in range(K):
        trace = None if trace_dir is None else Path(trace_dir) / f"group-{s}.csv"
        groups.append(estimate_group_location(w, detection_sets[s], s, params, seed=seed * 1000 + s, trace_path=trace))
    # Failed classes contribute z = 0 to the normalization (no alignment
    # evidence); their own statistic is pinned to 0 regardless.
    z_by_class = {}
    for s in range(K):
        est = groups[s]
        if est.failed:
            z_by_class[s] = 0.0
            continue
        centers = [
            estimate_samplewise_location(
                w, X, s, est.target, params, seed=seed * 1_000_000 + s * 1000 + i
            )
            for i, X in enumerate(detection_sets[s])
        ]
        z_by_class[s] = compute_z(est.center, centers)
    if K >= 2:
        w_values = compute_w([z_by_class[s] for s in range(K)])
        w_by_class = {s: float(w_values[s]) for s in range(K)}
    else:
        w_by_class = {s: 1.0 for s in z_by_class}
    stats = []
    for s in range(K):
        est = groups[s]
        if est.failed:
            stats.append(ClassStatistics(source=s, t_hat=None, r_s=0.0, r_t=0.0, z=0.0, w=0.0, r=0.0))
            continue
        r_s = compute_r_s(est.center, detection_sets[s])
        r_t = compute_r_s(est.center, detection_sets[est.target])
        w_s = w_by_class[s]
        stats.append(
            ClassStatistics(
                source=s,
                t_hat=est.target,
                r_s=r_s,
                r_t=r_t,
                z=z_by_class[s],
                w=w_s,
                r=combined_statistic(w_s, r_t, r_s),
            )
        )
    return stats


def run_detection(
    w: ClassifierWeights,
    clean: Dataset,
    reserve: Dataset | None,
    params: EstimationParams,
    phi: float,
    seed: int,
    clean_per_class: int,
    trace_dir=None,
) -> DetectionReport:
    sets = build_detection_sets(w, clean, reserve, clean_per_class)
    stats = assemble_statistics(w, sets, params, seed, trace_dir=trace_dir)
    return detect(stats, phi=phi)


def detect_stage(cfg: RunConfig, weights_path, out_dir, prefix: str = "detect") -> DetectionReport:
    out = Path(out_dir)
    w = load_weights(weights_path)
    clean = _load_split(out, "clean", cfg.data.classes)
    reserve_path = out / "reserve.txt"
    reserve = load_dataset(reserve_path, cfg.data.classes) if reserve_path.exists() else None
    report = run_detection(
        w,
        clean,
        reserve,
        cfg.estimation,
        cfg.phi,
        cfg.detect_seed,
        cfg.data.clean_per_class,
    )
    write_statistics_csv(report, out / f"{prefix}-statistics.csv")
    write_report_json(report, out / f"{prefix}-report.json")
    write_histogram_svg(report, out / f"{prefix}-histogram.svg")
    return report
