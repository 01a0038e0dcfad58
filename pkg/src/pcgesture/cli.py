"""``pcgesture`` command line: gen, voxelize, train, eval, predict, study.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every output file is written to a temporary name and renamed into place,
so a failed command never leaves a half-written artifact behind.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
import tempfile
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import JitterConfig
from .dataset import DatasetError, load_dataset, write_dataset
from .geometry import REFERENCE_ROI, GestureSequence, PcsFormatError, Roi, read_sequence
from .models import (
    ModelParams,
    SpecError,
    default_cnn3d_lstm_spec,
    default_cnn3d_spec,
    predict,
    spec_digest,
    spec_from_config,
    spec_to_config,
)
from .nn import CheckpointError, NumericError, load_checkpoint, save_checkpoint
from .synthgen import CLASS_NAMES, SynthConfig, SynthError, generate, shifted_test_variant, train_test_split
from .train_eval import (
    PipelineConfig,
    TrainConfig,
    cross_validate,
    evaluate,
    fit,
    format_table,
    jitter_study,
    study_csv,
)
from .voxelizer import MODES, GridSizeError, assemble_windows, dump_grid, grid_dims, voxelize_sequence

log = logging.getLogger("pcgesture")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_FILES = ("model.ckpt", "model.cfg", "pipeline.cfg")
REFERENCE_ROI_TEXT = "-0.5,0.5,-0.3,0.4,0.5,1.4"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# flag parsing helpers


def _float_list(text: str, n: Optional[int] = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"non-finite value in {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _roi(text: str) -> Roi:
    vals = _float_list(text, 6)
    try:
        return Roi.from_bounds(*vals)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _vec3(text: str) -> list[float]:
    return _float_list(text, 3)


def _alphas(text: str) -> list[float]:
    vals = _float_list(text)
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("jitter sizes must be >= 0")
    return vals


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**63:
        raise argparse.ArgumentTypeError("seed must be a non-negative 64-bit integer")
    return v


def _rate(text: str) -> float:
    v = _nonneg_float(text)
    if v >= 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {text}")
    return v


# --------------------------------------------------------------------------
# atomic output


def write_atomic(path: Path, data) -> None:
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# pipeline and model files


def _pipeline(args, saved: Optional[PipelineConfig] = None) -> PipelineConfig:
    base = saved or PipelineConfig()
    return PipelineConfig(
        roi=args.roi if args.roi is not None else base.roi,
        voxel_size=args.voxel_size if args.voxel_size is not None else base.voxel_size,
        mode=getattr(args, "mode", None) or base.mode,
        window=args.window if args.window is not None else base.window,
    )


def pipeline_to_config(p: PipelineConfig) -> str:
    lo, hi = p.roi.lower, p.roi.upper
    bounds = [lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]]
    return (
        "[pipeline]\n"
        f"roi = {','.join(repr(float(v)) for v in bounds)}\n"
        f"voxel_size = {p.voxel_size!r}\n"
        f"mode = {p.mode}\n"
        f"window = {p.window}\n"
    )


def pipeline_from_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        sec = cp["pipeline"]
        return PipelineConfig(Roi.from_bounds(*_float_list(sec["roi"], 6)), float(sec["voxel_size"]),
                              sec["mode"], int(sec["window"]))
    except (KeyError, ValueError, configparser.Error, argparse.ArgumentTypeError) as exc:
        raise DatasetError(f"invalid pipeline config: {exc}") from None


def save_model(out: Path, spec, params: ModelParams, pipeline: PipelineConfig, class_names) -> None:
    write_atomic(out / "model.cfg", spec_to_config(spec))
    write_atomic(out / "pipeline.cfg", pipeline_to_config(pipeline))
    write_atomic(out / "classes.txt", "".join(f"{c}\n" for c in class_names))
    write_atomic(out / "model.ckpt", save_checkpoint(params.layers, params.digest))


def load_model(model_dir: Path):
    model_dir = Path(model_dir)
    for name in MODEL_FILES:
        if not (model_dir / name).is_file():
            raise DatasetError(f"missing model file: {model_dir / name}")
    spec = spec_from_config((model_dir / "model.cfg").read_text(encoding="utf-8"))
    pipeline = pipeline_from_config((model_dir / "pipeline.cfg").read_text(encoding="utf-8"))
    digest, layers = load_checkpoint((model_dir / "model.ckpt").read_bytes())
    if digest != spec_digest(spec):
        raise CheckpointError(f"checkpoint digest {digest[:12]}... does not match model.cfg")
    params = ModelParams(layers, digest)
    params.validate(spec)
    classes_file = model_dir / "classes.txt"
    names = classes_file.read_text(encoding="utf-8").split() if classes_file.is_file() else None
    return spec, params, pipeline, names


def _make_spec(kind: str, pipeline: PipelineConfig, num_classes: int, dropout: float):
    if kind == "cnn3d":
        return default_cnn3d_spec(pipeline.window, pipeline.dims, num_classes, dropout=dropout)
    return default_cnn3d_lstm_spec(pipeline.window, pipeline.dims, num_classes, dropout=dropout)


def _train_config(args, folds: Optional[int] = None) -> TrainConfig:
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
                       lr_plateau_epochs=args.lr_plateau, lr_factor=args.lr_factor, folds=folds or 5,
                       dropout=args.dropout, seed=args.seed)


def _split(ds, name: str) -> list[GestureSequence]:
    seqs = ds.subset(name)
    if not seqs:
        raise DatasetError(f"dataset has no sequences in split {name!r}")
    return seqs


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = SynthConfig(num_classes=args.classes, per_class=args.per_class, frames=args.frames,
                      points=args.points, noise=args.noise, offset=args.offset, seed=args.seed)
    roi = args.roi or REFERENCE_ROI
    if args.test_per_class > args.per_class:
        raise UsageError("--test-per-class exceeds --per-class")
    seqs = generate(cfg, roi)
    tags = train_test_split(seqs, args.test_per_class)
    if args.shift_test is not None:
        test_idx = [i for i, t in enumerate(tags) if t == "test"]
        shifted = shifted_test_variant([seqs[i] for i in test_idx], args.shift_test, roi)
        for i, s in zip(test_idx, shifted):
            seqs[i] = s
    write_dataset(args.out, seqs, tags, CLASS_NAMES[: args.classes])
    print(f"wrote {len(seqs)} sequences ({tags.count('train')} train, {tags.count('test')} test) "
          f"in {args.classes} classes to {args.out}")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    pipeline = _pipeline(args)
    dims = grid_dims(pipeline.roi, pipeline.voxel_size)
    seq = read_sequence(args.input)
    grids = voxelize_sequence(seq, pipeline.roi, pipeline.voxel_size, pipeline.mode)
    if args.out is not None:
        out = _out_dir(args.out)
        width = max(3, len(str(len(grids))))
        for frame, grid in zip(seq.frames, grids):
            write_atomic(out / f"frame_{frame.index:0{width}d}.ogd", dump_grid(grid))
    print(f"{len(grids)} grids of {dims.nx}x{dims.ny}x{dims.nz} ({pipeline.mode})")
    if args.stats:
        for frame, grid in zip(seq.frames, grids):
            print(f"frame {frame.index} points {len(frame)} occupied {int(np.count_nonzero(grid.values))}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    pipeline = _pipeline(args)
    cfg = _train_config(args, args.folds)
    spec = _make_spec(args.model, pipeline, ds.num_classes, args.dropout)
    seqs = _split(ds, args.split)
    jitter = JitterConfig(args.augment_alpha, args.include_zero, args.seed) if args.augment_alpha > 0 else None
    out = _out_dir(args.out or ".")
    if args.folds:
        def report(k, acc, hist):
            print(f"fold {k + 1}/{args.folds}: accuracy {acc:.4f} (best epoch {hist.best_epoch})")
        cv = cross_validate(spec, seqs, cfg, pipeline, jitter, on_fold=report)
        print(f"cross-validation: mean {cv.mean:.4f} std {cv.std:.4f}")
        lines = ["fold,accuracy,best_epoch"] + [
            f"{k + 1},{acc!r},{h.best_epoch}" for k, (acc, h) in enumerate(zip(cv.accuracies, cv.histories))]
        write_atomic(out / "cv.csv", "\n".join(lines) + "\n")
    params, hist = fit(spec, seqs, cfg, pipeline, jitter)
    save_model(out, spec, params, pipeline, ds.class_names)
    write_atomic(out / "history.csv", hist.to_csv())
    best = hist.records[hist.best_epoch - 1] if hist.best_epoch else None
    summary = f"trained {args.model}: {len(hist.records)} epochs ({hist.stop_reason}), best epoch {hist.best_epoch}"
    if best is not None:
        summary += f", val_acc {best.val_acc:.4f}"
    print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, params, pipeline, names = load_model(args.model_dir)
    pipeline = _pipeline(args, pipeline)
    ds = load_dataset(args.dataset)
    if ds.num_classes != spec.num_classes:
        raise DatasetError(f"dataset has {ds.num_classes} classes, model has {spec.num_classes}")
    seqs = _split(ds, args.split)
    if args.shift is not None:
        seqs = shifted_test_variant(seqs, args.shift)
    windows = pipeline.windows(seqs)
    if not windows:
        raise DatasetError(f"no windows of length {pipeline.window} in split {args.split!r}")
    res = evaluate(spec, params, windows)
    out = _out_dir(args.out or ".")
    write_atomic(out / "confusion.csv", res.confusion.to_csv(names or ds.class_names))
    print(f"accuracy {res.accuracy:.4f} ({int(np.trace(res.confusion.counts))}/{res.confusion.total} windows)")
    if args.per_sequence:
        print(f"sequence_accuracy {res.sequence_accuracy:.4f} ({len(seqs)} sequences, majority vote)")
    return EXIT_OK


def cmd_predict(args) -> int:
    spec, params, pipeline, names = load_model(args.model_dir)
    pipeline = _pipeline(args, pipeline)
    for path in args.inputs:
        seq = read_sequence(path)
        grids = voxelize_sequence(seq, pipeline.roi, pipeline.voxel_size, pipeline.mode)
        windows = assemble_windows(grids, pipeline.window)
        if not windows:
            print(f"{path}: fewer than {pipeline.window} frames, no prediction")
            continue
        ids, probs = predict(spec, params, windows)
        ids = np.atleast_1d(ids)
        probs = np.atleast_2d(probs)
        for k, (c, p) in enumerate(zip(ids, probs)):
            last = seq.frames[k + pipeline.window - 1].index
            label = names[c] if names else str(c)
            print(f"{path}: window ending frame {last}: {label} ({p[c]:.3f})")
        votes = np.bincount(ids, minlength=spec.num_classes)
        top = int(np.argmax(votes))
        print(f"{path}: sequence: {names[top] if names else top} ({votes[top]}/{len(ids)} windows)")
    return EXIT_OK


MODEL_LABELS = {"cnn3d": "3D CNN", "cnn3d_lstm": "3D CNN + LSTM"}


def cmd_study(args) -> int:
    ds = load_dataset(args.dataset)
    pipeline = _pipeline(args)
    cfg = _train_config(args)
    if not any(a == 0 for a in args.alphas):
        raise UsageError("--alphas must include 0 (the no-augmentation baseline)")
    train_seqs, test_seqs = _split(ds, args.train_split), _split(ds, args.test_split)
    if args.shift is not None:
        test_seqs = shifted_test_variant(test_seqs, args.shift)
    factories = {k: (lambda k=k: _make_spec(k, pipeline, ds.num_classes, args.dropout)) for k in args.models}
    rows = jitter_study(train_seqs, test_seqs, pipeline, args.alphas, cfg, factories,
                        jitter_seed=args.seed, include_zero=args.include_zero)
    out = _out_dir(args.out or ".")
    write_atomic(out / "jitter_study.csv", study_csv(rows))
    table = []
    for r in rows:
        name = MODEL_LABELS[r.model] + (f" + Augmentation ({r.alpha * 100:g} cm)" if r.alpha > 0 else "")
        table.append((name, r.accuracy))
    print(format_table(table))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline and run options")
    g.add_argument("--roi", type=_roi, default=None, metavar="x1,x2,y1,y2,z1,z2",
                   help=f"region of interest in meters, half-open per axis (default: {REFERENCE_ROI_TEXT})")
    g.add_argument("--voxel-size", type=_positive_float, default=None, metavar="M",
                   help="voxel edge length in meters (default: 0.05)")
    g.add_argument("--window", type=_positive_int, default=None, metavar="M",
                   help="frames per classification window (default: 4)")
    g.add_argument("--seed", type=_seed, default=0, help="seed for every random choice (default: 0)")
    g.add_argument("--threads", type=_positive_int, default=None, metavar="N",
                   help="cap BLAS worker threads; results do not depend on it (default: all cores)")
    g.add_argument("--out", default=None, metavar="PATH", help="output directory")
    g.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch progress logging")
    return p


def _training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=_positive_float, default=1e-3, help="Adam learning rate (default: 0.001)")
    g.add_argument("--batch-size", type=_positive_int, default=32, help="minibatch size (default: 32)")
    g.add_argument("--epochs", type=_positive_int, default=30, help="maximum epochs (default: 30)")
    g.add_argument("--patience", type=_positive_int, default=3,
                   help="early-stopping patience in epochs (default: 3)")
    g.add_argument("--lr-plateau", type=_positive_int, default=3,
                   help="epochs without improvement before the learning rate is cut (default: 3)")
    g.add_argument("--lr-factor", type=_rate, default=0.3,
                   help="learning-rate multiplier on a plateau (default: 0.3)")
    g.add_argument("--dropout", type=_rate, default=0.3, help="dropout rate of the dense layers (default: 0.3)")
    g.add_argument("--include-zero", action="store_true",
                   help="allow the zero vector among jitter draws (default: excluded)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="pcgesture", description="Volumetric hand-gesture classification from point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--classes", type=_positive_int, default=10, help="number of classes, at most 10 (default: 10)")
    p.add_argument("--per-class", type=_positive_int, default=30, help="sequences per class (default: 30)")
    p.add_argument("--test-per-class", type=int, default=5,
                   help="sequences per class tagged 'test'; the rest are 'train' (default: 5)")
    p.add_argument("--frames", type=_positive_int, default=12, help="frames per sequence (default: 12)")
    p.add_argument("--points", type=_positive_int, default=400, help="points per frame (default: 400)")
    p.add_argument("--noise", type=_nonneg_float, default=0.01, help="point scatter sigma in meters (default: 0.01)")
    p.add_argument("--offset", type=_nonneg_float, default=0.05,
                   help="per-sequence subject offset range, +/- meters (default: 0.05)")
    p.add_argument("--shift-test", type=_vec3, default=None, metavar="dx,dy,dz",
                   help="translate every test sequence by this vector (default: none)")
    p.set_defaults(func=cmd_gen, needs_out=True)

    p = sub.add_parser("voxelize", parents=[common], help="voxelize one .pcs file into .ogd grids")
    p.add_argument("input", help=".pcs sequence file")
    p.add_argument("--mode", choices=MODES, default="binary", help="grid values (default: binary)")
    p.add_argument("--stats", action="store_true", help="print occupied-cell counts per frame")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset split")
    p.add_argument("dataset", help="dataset directory with manifest.csv")
    p.add_argument("--model", choices=sorted(MODEL_LABELS), default="cnn3d", help="architecture (default: cnn3d)")
    p.add_argument("--augment-alpha", type=_nonneg_float, default=0.0, metavar="ALPHA",
                   help="ROI jitter size in meters, 0 disables augmentation (default: 0; 0.05 recommended)")
    p.add_argument("--folds", type=int, default=0, metavar="K",
                   help="run K-fold cross-validation before final training, 0 skips it (default: 0)")
    p.add_argument("--split", default="train", help="manifest split to train on (default: train)")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a trained model on a dataset split")
    p.add_argument("dataset", help="dataset directory with manifest.csv")
    p.add_argument("--model-dir", required=True, help="directory written by 'train'")
    p.add_argument("--split", default="test", help="manifest split to evaluate (default: test)")
    p.add_argument("--shift", type=_vec3, default=None, metavar="dx,dy,dz",
                   help="translate the evaluated sequences first (default: none)")
    p.add_argument("--per-sequence", action="store_true", help="also report majority-vote sequence accuracy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify the windows of .pcs files")
    p.add_argument("inputs", nargs="+", help=".pcs sequence files")
    p.add_argument("--model-dir", required=True, help="directory written by 'train'")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("study", parents=[common], help="accuracy versus ROI jitter size")
    p.add_argument("dataset", help="dataset directory with manifest.csv")
    p.add_argument("--alphas", type=_alphas, default=[0.0, 0.015, 0.05, 0.10], metavar="A,B,...",
                   help="jitter sizes in meters, must include 0 (default: 0,0.015,0.05,0.10)")
    p.add_argument("--models", type=lambda s: s.split(","), default=["cnn3d"], metavar="KIND,...",
                   help="model kinds: cnn3d, cnn3d_lstm (default: cnn3d)")
    p.add_argument("--train-split", default="train", help="training split (default: train)")
    p.add_argument("--test-split", default="test", help="test split (default: test)")
    p.add_argument("--shift", type=_vec3, default=None, metavar="dx,dy,dz",
                   help="translate the test sequences first (default: none)")
    _training_flags(p)
    p.set_defaults(func=cmd_study)
    return parser


def _validate(args) -> None:
    if getattr(args, "needs_out", False) and args.out is None:
        raise UsageError(f"{args.command} needs --out")
    if args.command == "train" and args.folds != 0 and args.folds < 2:
        raise UsageError("--folds must be 0 or >= 2")
    if args.command == "gen" and not 0 <= args.test_per_class:
        raise UsageError("--test-per-class must be >= 0")
    if args.command == "gen" and args.classes > len(CLASS_NAMES):
        raise UsageError(f"--classes must be at most {len(CLASS_NAMES)}")
    if args.command in ("train", "study"):
        try:
            _train_config(args, args.folds if args.command == "train" and args.folds else None)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.command == "study":
        bad = [m for m in args.models if m not in MODEL_LABELS]
        if bad or not args.models:
            raise UsageError(f"unknown model kind(s): {','.join(bad)}")
    if args.roi is not None or args.voxel_size is not None:
        try:
            grid_dims(args.roi or REFERENCE_ROI, args.voxel_size or 0.05)
        except GridSizeError as exc:
            raise UsageError(str(exc)) from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        _validate(args)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(limits=args.threads)
        else:
            limits = nullcontext()
        with limits:
            return args.func(args)
    except UsageError as exc:
        print(f"pcgesture {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"pcgesture {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, PcsFormatError, CheckpointError, SpecError, SynthError, GridSizeError, OSError,
            ValueError) as exc:
        print(f"pcgesture {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
