"""Acceptance criteria 1-10, one test each, at their stated tolerances.

Each test records a PASS/FAIL line that pytest prints under "acceptance criteria"
in the terminal summary. Run alone with ``python3 -m pytest tests/test_acceptance.py``.
"""
import functools
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from pedcc_ssl import tensor as T
from pedcc_ssl.config import load_config
from pedcc_ssl.data import AugmentPolicy, compose_batch, gen_blobs, read_cifar_records, split_labels, \
    write_cifar_records
from pedcc_ssl.experiment import make_centroids, run_training
from pedcc_ssl.losses import (HyperParams, am_softmax_loss, kl_consistency_loss, labeled_loss, mmd_loss,
                              pedcc_mse_loss, total_loss)
from pedcc_ssl.model import ModelConfig, build_model, dumps_checkpoint, load_checkpoint, save_checkpoint
from pedcc_ssl.pedcc import CentroidSet, generate_pedcc, load_centroids, save_centroids
from pedcc_ssl.tensor import Tensor
from pedcc_ssl.trainer import compute_gradients

REFERENCE = json.loads((Path(__file__).parent / "reference" / "blobs_reference.json").read_text())
SEEDS = range(5)
BASELINE = ["loss.lambda3=0", "loss.lambda4=0", "train.unlabeled_batch=0"]
FD_STEP = 1e-4  # see test_losses.py for why not 1e-5
INSTANCES = 20


def cpu():
    return time.process_time()


# -- 1: gradients of every loss ------------------------------------------------------------------
def _probs(rng, n, c):
    z = rng.standard_normal((n, c))
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def _loss_cases(seed):
    rng = np.random.default_rng(seed)
    cs = generate_pedcc(4, 6, seed=0)
    labels = rng.integers(0, 4, 3)
    pt = _probs(rng, 4, 4)
    hp = HyperParams(n_root=2, sigma=0.9)

    def cos(t):
        return T.matmul(T.l2_normalize_rows(t), cs.points.T)

    def total(t):
        fx, fu = t[:3], t[3:]
        ps = T.softmax(T.scale(cos(fu), hp.s), axis=1)
        return total_loss(fx, cos(fx), labels, Tensor(pt), ps, fu, cs, hp)[0]

    return {
        "centroid mse": (lambda t: pedcc_mse_loss(T.l2_normalize_rows(t), labels, cs), rng.standard_normal((3, 6))),
        "am-softmax": (lambda t: am_softmax_loss(t, labels, 7.5, 0.35), rng.uniform(-1, 1, (3, 4))),
        "kl consistency": (lambda t: kl_consistency_loss(Tensor(pt), T.softmax(t, axis=1)),
                           rng.standard_normal((4, 4))),
        "mmd": (lambda t: mmd_loss(T.l2_normalize_rows(t), cs, sigma=0.9), rng.standard_normal((5, 6))),
        "labeled (root 2)": (lambda t: labeled_loss(pedcc_mse_loss(T.l2_normalize_rows(t), labels, cs),
                                                    am_softmax_loss(cos(t), labels, hp.s, hp.m), hp),
                             rng.standard_normal((3, 6))),
        "total": (total, rng.standard_normal((7, 6))),
    }


def test_criterion_01_gradients(criterion):
    t0 = cpu()
    worst = {}
    for seed in range(INSTANCES):
        for name, (f, x) in _loss_cases(seed).items():
            worst[name] = max(worst.get(name, 0.0), T.grad_check(f, x, h=FD_STEP))
    elapsed = cpu() - t0
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 30
    assert criterion(1, ok, f"max FD rel error {top:.2e} over {INSTANCES} instances x {len(worst)} losses, "
                            f"{elapsed:.2f}s CPU"), worst


# -- 2: solver geometry ----------------------------------------------------------------------------
def test_criterion_02_pedcc_geometry(criterion):
    t0 = cpu()
    worst, same = 0.0, True
    for c, d in [(2, 2), (3, 2), (4, 3), (5, 8), (10, 128)]:
        a, b = generate_pedcc(c, d, seed=0), generate_pedcc(c, d, seed=0)
        g = a.gram()
        worst = max(worst, np.abs(g[~np.eye(c, dtype=bool)] + 1 / (c - 1)).max())
        same &= a.points.tobytes() == b.points.tobytes()
    elapsed = cpu() - t0
    ok = worst <= 1e-3 and same and elapsed < 60
    assert criterion(2, ok, f"max |dot + 1/(C-1)| {worst:.1e}, deterministic {same}, {elapsed:.2f}s CPU")


# -- 3: MMD oracle -----------------------------------------------------------------------------------
def _brute_mmd(z, c, sigma):
    def k(a, b):
        return math.exp(-sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / (2 * sigma * sigma))
    s, n = len(z), len(c)
    zz = sum(k(z[i], z[j]) for i in range(s) for j in range(s) if i != j) / (s * (s - 1))
    cc = sum(k(c[i], c[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    zc = sum(k(z[i], c[j]) for i in range(s) for j in range(n)) / (s * n)
    return zz + cc - 2 * zc


def test_criterion_03_mmd(criterion):
    t0 = cpu()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        s, c, d = rng.integers(2, 11), rng.integers(2, 11), rng.integers(1, 17)
        z, cen = rng.standard_normal((s, d)), rng.standard_normal((c, d))
        sigma = rng.uniform(0.3, 3.0)
        worst = max(worst, abs(mmd_loss(z, cen, sigma).item() - _brute_mmd(z, cen, sigma)))
    # Oracle over 20 seeds (median-heuristic sigma, n=200, D=8): |same| <= 0.006, shifted >= 0.279.
    x, y = rng.standard_normal((200, 8)), rng.standard_normal((200, 8))
    shifted = rng.standard_normal((200, 8))
    shifted[:, 0] += 3.0
    same, diff = mmd_loss(x, y).item(), mmd_loss(x, shifted).item()
    elapsed = cpu() - t0
    ok = worst <= 1e-12 and abs(same) < 0.05 and diff > 0.2 and elapsed < 60
    assert criterion(3, ok, f"max |vectorized - double loop| {worst:.1e}; same {same:+.4f}, shifted {diff:.3f}; "
                            f"{elapsed:.2f}s CPU")


# -- 4: exact values -----------------------------------------------------------------------------------
def test_criterion_04_exact_values(criterion):
    checks = {
        "am-softmax uniform = ln 10": (am_softmax_loss(np.zeros((1, 10)), [0], 7.5, 0.0).item(), math.log(10)),
        "antipodal m=0 = log(1+e^-2)": (am_softmax_loss(np.array([[1.0, -1.0]]), [0], 1.0, 0.0).item(),
                                        math.log(1 + math.exp(-2))),
        "kl one-hot vs uniform = ln 2": (kl_consistency_loss(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item(),
                                         math.log(2)),
        "mse antipodal = 4": (pedcc_mse_loss(np.array([[-1.0, 0.0]]), [0],
                                             CentroidSet(np.array([[1.0, 0.0], [-1.0, 0.0]]))).item(), 4.0),
    }
    errs = {k: abs(a - b) for k, (a, b) in checks.items()}
    ok = max(errs.values()) <= 1e-9
    assert criterion(4, ok, f"max deviation {max(errs.values()):.1e} over {len(errs)} analytic values"), errs


# -- 5: stop-gradient ----------------------------------------------------------------------------------
def test_criterion_05_stop_gradient(criterion):
    t0 = cpu()
    train_ds, _ = gen_blobs(4, 8, 60, 1, 4.0, 0)
    train_ds = split_labels(train_ds, 4, 0)
    cs = generate_pedcc(4, 8, seed=0)
    unchanged, changed = True, True
    for step in range(5):
        batch = compose_batch(train_ds, (16, 32), AugmentPolicy.default_vector(), step, 0)

        def grads(hooks):
            model = build_model(ModelConfig(input_shape=(8,), hidden=(16,), feature_dim=8, num_classes=4), cs)
            return compute_gradients(model, batch, HyperParams(), hooks)[0]

        base = grads(None)
        teacher = grads({"teacher": np.zeros_like})
        student = grads({"student": np.zeros_like})
        unchanged &= all(a.tobytes() == b.tobytes() for a, b in zip(base, teacher))
        changed &= any(a.tobytes() != b.tobytes() for a, b in zip(base, student))
    # The same comparison on parameters after 50 full optimizer steps.
    cfg = load_config("blobs", ["train.steps=50", "train.eval_every=50"])
    params = {}
    for name, hooks in (("base", None), ("teacher", {"teacher": np.zeros_like}),
                        ("student", {"student": np.zeros_like})):
        model = run_training(cfg, hooks=hooks).model
        params[name] = b"".join(p.data.tobytes() for p in model.parameters())
    unchanged &= params["base"] == params["teacher"]
    changed &= params["base"] != params["student"]
    elapsed = cpu() - t0
    ok = unchanged and changed and elapsed < 30
    assert criterion(5, ok, f"teacher zeroed: updates bitwise equal {unchanged}; student zeroed: updates differ "
                            f"{changed}; {elapsed:.2f}s CPU")


# -- shared desk-scale runs for 6, 7, 8 -------------------------------------------------------------------
@functools.lru_cache(maxsize=None)
def blobs_runs(variant):
    overrides = BASELINE if variant == "labeled_only" else []
    ablation = "ce_kl" if variant == "ce_kl" else None
    cfg = load_config("blobs", overrides)
    t0 = cpu()
    runs = [run_training(cfg, s, ablation=ablation) for s in SEEDS]
    return runs, cpu() - t0, make_centroids(cfg)


def test_criterion_06_frozen_head(criterion):
    runs, _, cs = blobs_runs("full")
    ok = all(r.model.head.tobytes() == cs.points.tobytes() for r in runs)
    steps = runs[0].report.records[-1]["step"]
    assert criterion(6, ok, f"head bitwise equal to generated centroids after {steps} steps, {len(runs)} runs")


def test_criterion_07_ssl_efficacy(criterion):
    full, t_full, _ = blobs_runs("full")
    base, t_base, _ = blobs_runs("labeled_only")
    acc_f = [r.report.final_test_accuracy for r in full]
    acc_b = [r.report.final_test_accuracy for r in base]
    mf, mb = float(np.mean(acc_f)), float(np.mean(acc_b))
    elapsed = t_full + t_base
    # Runs are deterministic; the reference numbers should reproduce to within rounding of one test sample.
    drift = max(np.abs(np.subtract(acc_f, REFERENCE["full_method"])).max(),
                np.abs(np.subtract(acc_b, REFERENCE["labeled_only"])).max())
    ok = mf >= 0.90 and mf >= mb and elapsed < 600
    assert criterion(7, ok, f"full {mf:.4f} vs labeled-only {mb:.4f} (margin {mf - mb:+.4f}, reference "
                            f"{REFERENCE['margin_full_minus_labeled_only']:+.4f}, max per-seed drift {drift:.3f}); "
                            f"{elapsed:.0f}s CPU")
    assert drift <= 0.01


def test_criterion_08_ablation_direction(criterion):
    full, _, _ = blobs_runs("full")
    ce, _, _ = blobs_runs("ce_kl")
    err_f = 1 - float(np.mean([r.report.final_test_accuracy for r in full]))
    err_c = 1 - float(np.mean([r.report.final_test_accuracy for r in ce]))
    ok = err_f <= err_c + 0.005
    assert criterion(8, ok, f"error pedcc_kl_mmd {100 * err_f:.2f}% vs ce_kl {100 * err_c:.2f}% "
                            f"(bound: +0.5 pp)")


# -- 9: CLI determinism ------------------------------------------------------------------------------------
def test_criterion_09_cli_determinism(criterion, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "pedcc_ssl", "train", "--config", "blobs", "--out", str(out),
               "--set", "train.steps=400", "--set", "train.eval_every=100"]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        reports.append((out / "report.csv").read_bytes())
    ok = reports[0] == reports[1]
    assert criterion(9, ok, f"two CLI train runs, report.csv byte-identical: {ok} ({len(reports[0])} bytes)")


# -- 10: format round trips --------------------------------------------------------------------------------
def test_criterion_10_round_trips(criterion, tmp_path):
    cs = generate_pedcc(10, 128, seed=7)
    save_centroids(cs, tmp_path / "c1.txt")
    save_centroids(load_centroids(tmp_path / "c1.txt"), tmp_path / "c2.txt")
    centroids_ok = (tmp_path / "c1.txt").read_bytes() == (tmp_path / "c2.txt").read_bytes()

    model = build_model(ModelConfig(input_shape=(8,), hidden=(32,), feature_dim=8, num_classes=4),
                        generate_pedcc(4, 8, seed=0))
    save_checkpoint(model, tmp_path / "m1.txt")
    save_checkpoint(load_checkpoint(tmp_path / "m1.txt"), tmp_path / "m2.txt")
    ckpt_ok = (tmp_path / "m1.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes() == \
        dumps_checkpoint(model).encode()

    rng = np.random.default_rng(0)
    write_cifar_records(tmp_path / "r1.bin", rng.integers(0, 10, 100, dtype=np.uint8),
                        rng.integers(0, 256, (100, 3072), dtype=np.uint8))
    write_cifar_records(tmp_path / "r2.bin", *read_cifar_records(tmp_path / "r1.bin"))
    cifar_ok = (tmp_path / "r1.bin").read_bytes() == (tmp_path / "r2.bin").read_bytes()
    ok = centroids_ok and ckpt_ok and cifar_ok
    assert criterion(10, ok, f"centroid file {centroids_ok}, checkpoint {ckpt_ok}, CIFAR-10 100 records {cifar_ok}")
