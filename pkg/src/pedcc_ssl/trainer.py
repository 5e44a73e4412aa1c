"""Semi-supervised training loop, evaluation, and ablation sweeps."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, Dataset, SemiBatch, compose_batch
from .losses import HyperParams, LossBreakdown, pedcc_mse_loss, total_loss
from .model import Model, forward

ABLATIONS = ("ce_kl", "pedcc_kl", "pedcc_kl_mmd")
REPORT_FIELDS = ("step", "lr", "l1", "l2", "l3", "l4", "total", "train_acc", "test_acc")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training aborted at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass(frozen=True)
class TrainingConfig:
    total_steps: int = 4000
    base_lr: float = 0.03
    momentum: float = 0.9
    composition: tuple = (16, 64)
    hp: HyperParams = field(default_factory=HyperParams)
    ablation: str = "pedcc_kl_mmd"
    seed: int = 0
    eval_every: int = 500
    policy: AugmentPolicy = field(default_factory=AugmentPolicy.identity)

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        object.__setattr__(self, "composition", tuple(int(v) for v in self.composition))

    @property
    def effective_hp(self) -> HyperParams:
        return effective_hp(self.hp, self.ablation)


def effective_hp(hp: HyperParams, ablation: str) -> HyperParams:
    """Loss weights actually used by an ablation combination.

    ce_kl: plain cross-entropy over scaled cosines (no margin, no centroid MSE) + KL.
    pedcc_kl: full labeled loss + KL, no MMD. pedcc_kl_mmd: everything.
    """
    if ablation == "ce_kl":
        return hp.replace(lambda1=0.0, m=0.0, lambda4=0.0)
    if ablation == "pedcc_kl":
        return hp.replace(lambda4=0.0)
    if ablation == "pedcc_kl_mmd":
        return hp
    raise ValueError(f"unknown ablation {ablation!r}")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    final_test_accuracy: float = float("nan")
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.records:
            w.writerow([r["step"]] + [format(float(r[k]), ".17g") for k in REPORT_FIELDS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "final_test_accuracy": self.final_test_accuracy,
            "final_test_error": 1.0 - self.final_test_accuracy,
            "wall_time_s": self.wall_time,
            "records": len(self.records),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """In place: ``v = momentum * v + g``; ``p = p - lr * v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise T.ContractError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        data = p.data if isinstance(p, T.Tensor) else p
        if data.shape != np.shape(g) or data.shape != v.shape:
            raise T.ContractError(f"shape mismatch: param {data.shape}, grad {np.shape(g)}, velocity {v.shape}")
        v *= momentum
        v += g
        data -= lr * v


def loss_on_batch(model: Model, batch: SemiBatch, hp: HyperParams,
                  hooks: dict | None = None) -> tuple[T.Tensor, LossBreakdown]:
    """Forward one semi-supervised batch and build the total loss graph.

    All rows go through the network together. The teacher probabilities (on
    the original unlabeled rows) are detached; ``hooks`` may attach adjoint
    transforms to the "teacher" or "student" probabilities before that.
    """
    hooks = hooks or {}
    use_kl = hp.lambda3 > 0 and batch.S > 0
    use_u = batch.S > 0 and (use_kl or hp.lambda4 > 0)
    parts = [batch.x]
    if use_u:
        parts.append(batch.u)
    if use_kl:
        parts.append(batch.u_aug)
    xs = np.concatenate(parts, axis=0)
    feats, cos, probs = forward(model, xs, hp.s)
    m, s = batch.M, batch.S
    fx, cx = feats[:m], cos[:m]
    fu = feats[m:m + s] if use_u else None
    p_teacher = p_student = None
    if use_kl:
        p_live = probs[m:m + s]
        p_student = probs[m + s:m + 2 * s]
        if "teacher" in hooks:
            p_live.register_hook(hooks["teacher"])
        if "student" in hooks:
            p_student.register_hook(hooks["student"])
        p_teacher = T.stop_gradient(p_live)
    return total_loss(fx, cx, batch.y, p_teacher, p_student, fu, model.centroids, hp)


def compute_gradients(model: Model, batch: SemiBatch, hp: HyperParams, hooks: dict | None = None):
    """Fresh gradients of the total loss for every trainable parameter (zeros where unused)."""
    params = model.parameters()
    T.zero_grads(params)
    loss, parts = loss_on_batch(model, batch, hp, hooks)
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    T.zero_grads(params)
    return grads, parts


def evaluate(model: Model, ds: Dataset, batch_size: int = 1024) -> tuple[float, np.ndarray, float]:
    """(accuracy, per-class accuracy, mean centroid MSE of normalized features)."""
    if (ds.labels < 0).any():
        raise ValueError("evaluate needs a fully labeled dataset")
    if len(ds) == 0:
        raise ValueError("evaluate needs at least one sample")
    was_training, model.training = model.training, False
    preds, sq = [], 0.0
    try:
        for i in range(0, len(ds), batch_size):
            xb, yb = ds.samples[i:i + batch_size], ds.labels[i:i + batch_size]
            feats, cos, _ = forward(model, xb)
            preds.append(np.argmax(cos.data, axis=1))
            sq += pedcc_mse_loss(T.l2_normalize_rows(feats), yb, model.centroids).item() * len(yb)
    finally:
        model.training = was_training
    pred = np.concatenate(preds)
    correct = pred == ds.labels
    per_class = np.array([correct[ds.labels == k].mean() if (ds.labels == k).any() else np.nan
                          for k in range(ds.num_classes)])
    return float(correct.mean()), per_class, sq / len(ds)


def train(model: Model, train_ds: Dataset, test_ds: Dataset, cfg: TrainingConfig,
          hooks: dict | None = None, log: Callable[[str], None] | None = None) -> TrainReport:
    """Run ``cfg.total_steps`` momentum-SGD steps on the total loss.

    Evaluation points are step 0, every ``eval_every`` steps, and the last
    step. Each record holds the loss components of that step's batch under
    the current weights plus train (labeled rows) and test accuracy.
    """
    t0 = time.perf_counter()
    hp = cfg.effective_hp
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    labeled = train_ds.subset(train_ds.labeled_indices)
    report = TrainReport(config={"hp": asdict(hp), "ablation": cfg.ablation, "total_steps": cfg.total_steps,
                                 "base_lr": cfg.base_lr, "momentum": cfg.momentum,
                                 "composition": list(cfg.composition), "seed": cfg.seed,
                                 "policy": cfg.policy.to_spec()})

    def batch_at(step):
        return compose_batch(train_ds, cfg.composition, cfg.policy, step, cfg.seed)

    def record(step, parts):
        train_acc = evaluate(model, labeled)[0] if len(labeled) else float("nan")
        test_acc = evaluate(model, test_ds)[0]
        report.records.append({"step": step, "lr": lr_at(step, cfg), "l1": parts.l1_mse, "l2": parts.l2_am,
                               "l3": parts.l3_kl, "l4": parts.l4_mmd, "total": parts.total,
                               "train_acc": train_acc, "test_acc": test_acc})
        if log:
            log(f"step {step:6d} lr {lr_at(step, cfg):.5f} loss {parts.total:.5f} test_acc {test_acc:.4f}")

    def checked(step, fn):
        try:
            out = fn()
        except T.NumericDomainError as exc:
            raise TrainingAborted(step, str(exc)) from None
        parts = out[1]
        if not all(math.isfinite(v) for v in asdict(parts).values()):
            raise TrainingAborted(step, f"non-finite loss components {parts}")
        return out

    def peek(step):
        # Losses at an evaluation point: forward only, BN running stats untouched.
        saved = {k: v.copy() for k, v in model.buffers.items()}
        _, parts = checked(step, lambda: loss_on_batch(model, batch_at(step), hp))
        model.buffers = saved
        return parts

    model.train()
    record(0, peek(0))
    for step in range(cfg.total_steps):
        grads, _ = checked(step, lambda: compute_gradients(model, batch_at(step), hp, hooks))
        sgd_momentum_step(params, grads, velocity, lr_at(step, cfg), cfg.momentum)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            record(done, peek(done))
    report.final_test_accuracy = report.records[-1]["test_acc"]
    report.wall_time = time.perf_counter() - t0
    return report


# -- ablation sweeps --------------------------------------------------------------------------
ABLATION_COLUMNS = ("kind", "name", "ablation", "lambda1", "m", "lambda3", "lambda4",
                    "seeds", "mean_error", "std_error")


def default_grid(hp: HyperParams) -> list[tuple[float, float]]:
    """Five (lambda3, lambda4) cells around ``hp``: lambda4 halved/kept/doubled, then lambda3 halved/x1.5."""
    l3, l4 = hp.lambda3, hp.lambda4
    return [(l3, l4 / 2), (l3, l4), (l3, l4 * 2), (l3 / 2, l4), (l3 * 1.5, l4)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PEDCC_SSL_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation_suite(runner: Callable[[HyperParams, str, int], float], hp: HyperParams,
                       seeds, grid: list | None = None, threads: int | None = None) -> list[dict]:
    """Mean and std of test error over ``seeds`` for the three loss combinations and a lambda grid.

    ``runner(hp, ablation, seed)`` trains one model and returns its test accuracy.
    Rows come back in a fixed order regardless of thread scheduling.
    """
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    grid = default_grid(hp) if grid is None else list(grid)
    cells = [("ablation", name, name, hp) for name in ABLATIONS]
    cells += [("sweep", f"l3={l3:g},l4={l4:g}", "pedcc_kl_mmd", hp.replace(lambda3=l3, lambda4=l4)) for l3, l4 in grid]
    jobs = [(c, s) for c in cells for s in seeds]
    workers = threads or _threads()

    def job(item):
        (_, _, ablation, cell_hp), seed = item
        return 1.0 - runner(cell_hp, ablation, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(job, jobs))
    else:
        errors = [job(j) for j in jobs]
    rows = []
    for i, (kind, name, ablation, cell_hp) in enumerate(cells):
        errs = np.array(errors[i * len(seeds):(i + 1) * len(seeds)])
        eff = effective_hp(cell_hp, ablation)
        rows.append({"kind": kind, "name": name, "ablation": ablation, "lambda1": eff.lambda1, "m": eff.m,
                     "lambda3": eff.lambda3, "lambda4": eff.lambda4, "seeds": len(seeds),
                     "mean_error": float(errs.mean()), "std_error": float(errs.std())})
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r[k] if isinstance(r[k], (str, int)) else format(r[k], ".17g") for k in ABLATION_COLUMNS])
    return buf.getvalue()
