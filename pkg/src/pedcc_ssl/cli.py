"""``pedcc-ssl`` command line.

Exit codes: 0 success, 1 usage or validation error, 2 finished with a warning
(centroid solver did not converge), 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, load_config
from .data import Dataset, load_cifar10, load_csv, save_csv
from .experiment import run_ablation, run_training
from .model import forward, load_checkpoint, save_checkpoint
from .pedcc import FormatError, SolverConfig, generate_pedcc, min_pairwise_distance, save_centroids, \
    simplex_centroids
from .trainer import TrainingAborted, ablation_csv, evaluate

EXIT_OK, EXIT_USAGE, EXIT_WARN, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 means "converged with warning" here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- generate-centroids ----------------------------------------------------------------------
def cmd_generate_centroids(args) -> int:
    if args.classes < 2 or args.dim < 2:
        return _fail(EXIT_USAGE, f"need --classes >= 2 and --dim >= 2, got {args.classes} and {args.dim}")
    try:
        if args.method == "simplex":
            cs = simplex_centroids(args.classes, args.dim)
        else:
            solver = SolverConfig(max_iters=args.max_iters, step_size=args.step_size,
                                  convergence_tol=args.tol, force_exponent=args.force_exponent)
            cs = generate_pedcc(args.classes, args.dim, args.seed, solver)
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        save_centroids(cs, args.out)
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot write {args.out}: {exc.strerror or exc}")
    print(f"min_pairwise_distance {min_pairwise_distance(cs):.12g}")
    print(f"residual {cs.residual:.6g}")
    print(f"iterations {cs.iterations}")
    if not cs.converged:
        print(f"warning: solver did not converge within {args.max_iters} iterations", file=sys.stderr)
        return EXIT_WARN
    return EXIT_OK


# -- train -----------------------------------------------------------------------------------
def _load_run_config(args):
    return load_config(args.config, args.set)


def cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args)
    except (ConfigError, FileNotFoundError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    out = Path(args.out or cfg.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot create {out}: {exc.strerror or exc}")
    log = (lambda line: print(line, file=sys.stderr)) if args.verbose else None
    try:
        res = run_training(cfg, log=log)
    except TrainingAborted as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    res.report.config["run"] = cfg.as_dict()
    save_checkpoint(res.model, out / "checkpoint.txt")
    save_centroids(res.model.centroids, out / "centroids.txt")
    (out / "report.csv").write_text(res.report.to_csv(), encoding="utf-8", newline="\n")
    (out / "summary.json").write_text(res.report.to_json() + "\n", encoding="utf-8", newline="\n")
    if cfg.data.kind != "cifar10":
        save_csv(res.test_ds, out / "test_data.csv")
    acc = res.report.final_test_accuracy
    print(f"final_test_accuracy {acc:.6f}")
    print(f"final_test_error {1.0 - acc:.6f}")
    print(f"outputs {out}")
    return EXIT_OK


# -- shared checkpoint + data loading -----------------------------------------------------------
def _load_pair(args):
    """(model, dataset) or raise UsageError describing the mismatch."""
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    path = Path(args.data)
    try:
        if path.is_dir():
            ds = load_cifar10(path)[1]
        else:
            ds = load_csv(path, model.cfg.num_classes)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load data {args.data}: {exc}") from None
    want = tuple(model.cfg.input_shape)
    have = ds.sample_shape
    if have != want:
        if int(np.prod(have)) != int(np.prod(want)):
            raise UsageError(f"data has {int(np.prod(have))} features per sample, checkpoint expects "
                             f"{int(np.prod(want))} (input shape {want})")
        ds = Dataset(ds.samples.reshape(len(ds), *want), ds.labels, ds.split, ds.num_classes)
    if len(ds) == 0:
        raise UsageError("data file has no rows")
    if (ds.labels < 0).any() or (ds.labels >= model.cfg.num_classes).any():
        raise UsageError(f"data labels must lie in [0, {model.cfg.num_classes}) for this checkpoint")
    return model, ds


def cmd_eval(args) -> int:
    try:
        model, ds = _load_pair(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    acc, per_class, _ = evaluate(model, ds)
    print(f"samples {len(ds)}")
    print(f"accuracy {acc:.6f}")
    print(f"test_error {1.0 - acc:.6f}")
    for k, a in enumerate(per_class):
        print(f"class {k} accuracy {a:.6f}")
    return EXIT_OK


# -- export-features ---------------------------------------------------------------------------
_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf")


def scatter_svg(features: np.ndarray, labels: np.ndarray, centroids: np.ndarray, size: int = 480) -> str:
    """Unit-circle scatter of 2-D features coloured by class; centroids drawn as black-ringed dots."""
    half = size / 2
    r = half * 0.9

    def xy(p):
        return half + r * p[0], half - r * p[1]

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<circle cx="{half}" cy="{half}" r="{r}" fill="none" stroke="#cccccc"/>']
    for p, lab in zip(features, labels):
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{_PALETTE[lab % len(_PALETTE)]}" '
                   f'fill-opacity="0.6"/>')
    for k, p in enumerate(centroids):
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{_PALETTE[k % len(_PALETTE)]}" '
                   f'stroke="black" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write_rows(path, labels, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(rows.shape[1])])
        for lab, row in zip(labels, rows):
            w.writerow([int(lab)] + [format(float(v), ".17g") for v in row])


def export_features(model, ds: Dataset, batch_size: int = 1024) -> np.ndarray:
    """Row-normalized backbone features in eval mode."""
    model.eval()
    parts = [T.l2_normalize_rows(forward(model, ds.samples[i:i + batch_size])[0]).data
             for i in range(0, len(ds), batch_size)]
    return np.concatenate(parts)


def cmd_export_features(args) -> int:
    try:
        model, ds = _load_pair(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    dim = model.cfg.feature_dim
    if args.svg and dim != 2:
        return _fail(EXIT_USAGE, f"--svg needs 2-D features, this checkpoint has feature_dim {dim}")
    feats = export_features(model, ds)
    centroid_out = args.centroids_out or str(Path(args.out).with_suffix("")) + "_centroids.csv"
    try:
        _write_rows(args.out, ds.labels, feats)
        _write_rows(centroid_out, np.arange(model.cfg.num_classes), model.centroids.points)
        if args.svg:
            Path(args.svg).write_text(scatter_svg(feats, ds.labels, model.centroids.points), encoding="utf-8")
    except OSError as exc:
        return _fail(EXIT_USAGE, f"cannot write output: {exc}")
    print(f"features {args.out} rows {len(ds)}")
    print(f"centroids {centroid_out}")
    return EXIT_OK


# -- ablation ------------------------------------------------------------------------------------
def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"400:0.1,400:0.2"`` -> [(400.0, 0.1), (400.0, 0.2)]."""
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            l3, l4 = (float(v) for v in item.split(":"))
        except ValueError:
            raise UsageError(f"grid cell {item!r} is not 'lambda3:lambda4'") from None
        cells.append((l3, l4))
    if not cells:
        raise UsageError("empty grid")
    return cells


def cmd_ablation(args) -> int:
    try:
        overrides = list(args.set) + ([f"train.seeds={args.seeds}"] if args.seeds else [])
        cfg = load_config(args.config, overrides)
        grid = parse_grid(args.grid) if args.grid else None
    except (ConfigError, FileNotFoundError, UsageError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        rows = run_ablation(cfg, grid=grid, threads=args.threads)
    except Exception as exc:  # any failure inside a worker is a runtime failure
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    text = ablation_csv(rows)
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            return _fail(EXIT_USAGE, f"cannot write {args.out}: {exc}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="pedcc-ssl", description="Semi-supervised training with predefined class centroids.",
                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = SolverConfig()

    g = sub.add_parser("generate-centroids", help="solve for evenly spread class centroids", formatter_class=fmt)
    g.add_argument("--classes", type=int, required=True, help="number of classes C")
    g.add_argument("--dim", type=int, required=True, help="feature dimension D")
    g.add_argument("--seed", type=int, default=0, help="initialization seed")
    g.add_argument("--out", required=True, help="output centroid file")
    g.add_argument("--method", choices=("repulsion", "simplex"), default="repulsion",
                   help="charge repulsion solver or closed-form simplex (C <= D+1)")
    g.add_argument("--max-iters", type=int, default=defaults.max_iters, help="solver iteration budget")
    g.add_argument("--step-size", type=float, default=defaults.step_size, help="initial step size")
    g.add_argument("--tol", type=float, default=defaults.convergence_tol, help="tangential force tolerance")
    g.add_argument("--force-exponent", type=float, default=defaults.force_exponent,
                   help="force falls off as 1/distance^p")
    g.set_defaults(func=cmd_generate_centroids)

    def config_flags(sp):
        sp.add_argument("--config", required=True,
                        help="config file, or a bundled preset name (blobs, blobs-2d, paper-cifar10, paper-svhn)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    t = sub.add_parser("train", help="train one model from a config", formatter_class=fmt)
    config_flags(t)
    t.add_argument("--out", default=None, help="output directory (default: output.dir from the config)")
    t.add_argument("--verbose", action="store_true", help="log evaluation points to stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    e.add_argument("--data", required=True, help="labeled CSV file or CIFAR-10 binary directory (test split)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-features", help="write normalized features and centroids as CSV",
                       formatter_class=fmt)
    x.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    x.add_argument("--data", required=True, help="labeled CSV file or CIFAR-10 binary directory (test split)")
    x.add_argument("--out", required=True, help="feature CSV path")
    x.add_argument("--centroids-out", default=None, help="centroid CSV path (default: <out>_centroids.csv)")
    x.add_argument("--svg", default=None, help="also write a scatter plot (feature_dim 2 only)")
    x.set_defaults(func=cmd_export_features)

    a = sub.add_parser("ablation", help="loss-combination ablation plus lambda3/lambda4 grid", formatter_class=fmt)
    config_flags(a)
    a.add_argument("--grid", default=None,
                   help="comma list of lambda3:lambda4 cells (default: five cells around the config weights)")
    a.add_argument("--seeds", type=int, default=None, help="seeds per cell (default: train.seeds)")
    a.add_argument("--threads", type=int, default=None, help="worker threads (default: $PEDCC_SSL_THREADS or 1)")
    a.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
