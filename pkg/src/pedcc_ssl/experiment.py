"""Glue between a :class:`RunConfig` and the data, centroid, model and trainer layers."""
from __future__ import annotations

from dataclasses import dataclass

from .config import RunConfig
from .data import Dataset, gen_blobs, load_cifar10, load_csv, split_labels
from .losses import HyperParams
from .model import Model, build_model
from .pedcc import CentroidSet, generate_pedcc, load_centroids
from .trainer import TrainReport, run_ablation_suite, train


@dataclass
class RunResult:
    model: Model
    report: TrainReport
    train_ds: Dataset
    test_ds: Dataset


def load_data(cfg: RunConfig, seed_offset: int = 0) -> tuple[Dataset, Dataset]:
    """Train split (labels kept for ``labeled_per_class`` per class, the rest -1) and test split."""
    d = cfg.data
    if d.kind == "blobs":
        train_ds, test_ds = gen_blobs(d.classes, d.input_dim, d.per_class_train, d.per_class_test,
                                      d.separation, d.seed + seed_offset)
    elif d.kind == "cifar10":
        train_ds, test_ds = load_cifar10(d.cifar_dir)
    else:
        train_ds = load_csv(d.train_csv, d.classes, split="train")
        test_ds = load_csv(d.test_csv, d.classes, split="test")
    return split_labels(train_ds, d.labeled_per_class, d.seed + seed_offset), test_ds


def make_centroids(cfg: RunConfig) -> CentroidSet:
    if cfg.centroids.file:
        cs = load_centroids(cfg.centroids.file)
        if cs.num_classes != cfg.num_classes() or cs.dim != cfg.model.feature_dim:
            raise ValueError(f"centroid file is {cs.num_classes}x{cs.dim}, config needs "
                             f"{cfg.num_classes()}x{cfg.model.feature_dim}")
        return cs
    return generate_pedcc(cfg.num_classes(), cfg.model.feature_dim, cfg.centroids.seed, cfg.solver())


def run_training(cfg: RunConfig, seed_offset: int = 0, hp: HyperParams | None = None,
                 ablation: str | None = None, centroids: CentroidSet | None = None,
                 hooks: dict | None = None, log=None) -> RunResult:
    train_ds, test_ds = load_data(cfg, seed_offset)
    cs = centroids if centroids is not None else make_centroids(cfg)
    model = build_model(cfg.model_config(seed_offset), cs)
    report = train(model, train_ds, test_ds, cfg.training_config(seed_offset, hp, ablation), hooks=hooks, log=log)
    return RunResult(model, report, train_ds, test_ds)


def run_ablation(cfg: RunConfig, grid: list | None = None, threads: int | None = None) -> list[dict]:
    """Ablation rows plus lambda-grid rows, each over ``train.seeds`` seed offsets."""
    cs = make_centroids(cfg)

    def runner(hp, ablation, seed):
        return run_training(cfg, seed, hp=hp, ablation=ablation, centroids=cs).report.final_test_accuracy

    return run_ablation_suite(runner, cfg.hyperparams(), range(cfg.train.seeds), grid=grid, threads=threads)
