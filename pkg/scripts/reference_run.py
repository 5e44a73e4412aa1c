"""Regenerate tests/reference/blobs_reference.json.

Trains the blobs benchmark for five seeds under the full method, the
labeled-only baseline and the cross-entropy ablation, plus one 2-D feature
run, and stores the accuracies the acceptance tests compare against.

    python3 scripts/reference_run.py
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

from pedcc_ssl import tensor as T
from pedcc_ssl.config import load_config
from pedcc_ssl.experiment import run_training
from pedcc_ssl.model import forward

SEEDS = range(5)
BASELINE = ["loss.lambda3=0", "loss.lambda4=0", "train.unlabeled_batch=0"]
OUT = Path(__file__).resolve().parent.parent / "tests" / "reference" / "blobs_reference.json"


def accuracies(overrides, ablation=None):
    cfg = load_config("blobs", overrides)
    return [run_training(cfg, s, ablation=ablation).report.final_test_accuracy for s in SEEDS]


def angular_spread():
    """Mean angle of test features to their own centroid, and mean angle between adjacent centroids."""
    res = run_training(load_config("blobs-2d"))
    res.model.eval()
    z = T.l2_normalize_rows(forward(res.model, res.test_ds.samples)[0]).data
    c = res.model.centroids.points
    within = np.arccos(np.clip(np.sum(z * c[res.test_ds.labels], axis=1), -1, 1)).mean()
    a = np.sort(np.arctan2(c[:, 1], c[:, 0]))
    adjacent = np.diff(np.r_[a, a[0] + 2 * np.pi]).mean()
    return float(within), float(adjacent)


def main() -> int:
    t0 = time.perf_counter()
    full = accuracies([])
    base = accuracies(BASELINE)
    ce = accuracies([], ablation="ce_kl")
    within, adjacent = angular_spread()
    ref = {
        "seeds": list(SEEDS),
        "full_method": full,
        "labeled_only": base,
        "ce_kl": ce,
        "full_mean": float(np.mean(full)),
        "labeled_only_mean": float(np.mean(base)),
        "ce_kl_mean": float(np.mean(ce)),
        "margin_full_minus_labeled_only": float(np.mean(full) - np.mean(base)),
        "margin_error_ce_kl_minus_full": float(np.mean(full) - np.mean(ce)),
        "spread_2d_within_class_rad": within,
        "spread_2d_adjacent_centroid_rad": adjacent,
        "cpu_seconds": round(time.perf_counter() - t0, 1),
    }
    OUT.write_text(json.dumps(ref, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    json.dump(ref, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
