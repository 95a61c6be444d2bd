"""Command-line front end: gen | extract | train | select | apply | eval.

Every run writes exactly one JSON run manifest capturing the resolved
configuration, seeds, and paths, which is sufficient to reproduce the run's
data artifacts bit-for-bit in single-threaded mode.  Progress goes to
stdout, diagnostics to stderr with a machine-parseable prefix, and data
lands in files.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import baseline, cnn, dataset, metrics, modelio, selection, synthgen, woperator
from .errors import (
    DataError,
    InvalidArgumentError,
    SelectionError,
    TrainingDivergedError,
    WoplearnError,
)
from .imagecore import Window, make_rect_window, read_image, write_image

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _fail_prefix(kind: str) -> str:
    return f"woplearn: error[{kind}]:"


# ---------------------------------------------------------------------------
# Flag value parsing (also accepts already-structured values from --config)
# ---------------------------------------------------------------------------


def _as_int_list(v) -> tuple[int, ...]:
    if isinstance(v, str):
        return tuple(int(x) for x in v.split(","))
    return tuple(int(x) for x in v)


def _as_float_list(v) -> tuple[float, ...]:
    if isinstance(v, str):
        return tuple(float(x) for x in v.split(","))
    return tuple(float(x) for x in v)


def _as_range(v) -> tuple[int, int]:
    vals = _as_int_list(v)
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise InvalidArgumentError(f"range must be LO,HI, got {v!r}")
    return (vals[0], vals[1])


def _as_blocks(v) -> tuple[tuple[int, int], ...]:
    if isinstance(v, str):
        parts = v.split(",")
        out = []
        for part in parts:
            n, _, k = part.partition("x")
            out.append((int(n), int(k)))
        return tuple(out)
    return tuple((int(n), int(k)) for n, k in v)


def _window_dims(window: Window) -> tuple[int, int]:
    min_dx, max_dx, min_dy, max_dy = window.bounds()
    w = max_dx - min_dx + 1
    h = max_dy - min_dy + 1
    if len(window) != w * h or -min_dx != max_dx or -min_dy != max_dy:
        raise DataError(
            "dataset window is not a centered rectangle; CNN training needs one"
        )
    return w, h


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


class _Run:
    def __init__(self, command: str, args: argparse.Namespace, argv: list[str]):
        self.command = command
        self.argv = argv
        self.started = time.perf_counter()
        self.started_utc = datetime.now(timezone.utc).isoformat()
        self.config = {
            k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None
        }
        self.inputs: list[str] = []
        self.outputs: list[str] = []

    def write(self, path: Path) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "rng": dataset.RNG_NAME,
            "config": _jsonable(self.config),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_utc": self.started_utc,
            "elapsed_seconds": round(time.perf_counter() - self.started, 3),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen(args, run: _Run) -> int:
    cfg = synthgen.SynthConfig(
        width=args.width,
        height=args.height,
        staves=args.staves,
        lines_per_staff=args.lines_per_staff,
        line_thickness=_as_range(args.line_thickness),
        line_spacing=_as_range(args.line_spacing),
        symbols_per_staff=_as_range(args.symbols_per_staff),
        degradation=synthgen.Degradation(pepper=args.pepper, line_breaks=args.line_breaks),
        seed=args.seed,
    )
    synthgen.generate_corpus(cfg, args.images, args.seed, args.out_dir)
    run.outputs = [str(Path(args.out_dir) / "corpus.json")]
    print(f"generated {args.images} image pairs in {args.out_dir}")
    run.write(Path(args.out_dir) / "run_manifest.json")
    return EXIT_OK


def _cmd_extract(args, run: _Run) -> int:
    corpus = synthgen.load_corpus(args.corpus)
    run.inputs = [str(args.corpus)]
    pairs = corpus.load_pairs(args.split)
    if not pairs:
        raise DataError(f"corpus split {args.split!r} is empty")
    h = args.window_h if args.window_h else args.window
    window = make_rect_window(args.window, h)
    ds = dataset.extract_dataset(pairs, window, sampling=args.sampling)
    if args.subsample is not None:
        ds = dataset.subsample(ds, args.subsample, args.subsample_seed)
    dataset.save_dataset(ds, args.out)
    run.outputs = [str(args.out)]
    print(
        f"extracted {ds.stats.total} patches ({ds.stats.distinct} distinct, "
        f"{ds.stats.conflicting} conflicting) -> {args.out}"
    )
    run.write(Path(str(args.out) + ".manifest.json"))
    return EXIT_OK


def _cmd_train(args, run: _Run) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds = dataset.load_dataset(args.train_data)
    run.inputs = [str(args.train_data)]
    model_path = out_dir / "model.wopm"

    if args.table:
        table = baseline.fit_table(train_ds)
        modelio.save_model(table, model_path)
        run.outputs = [str(model_path)]
        print(f"fitted lookup table with {len(table)} patterns -> {model_path}")
        run.write(out_dir / "run_manifest.json")
        return EXIT_OK

    if not args.val_data:
        raise InvalidArgumentError("CNN training requires --val-data (or pass --table)")
    val_ds = dataset.load_dataset(args.val_data)
    run.inputs.append(str(args.val_data))
    w, h = _window_dims(train_ds.window)
    config = cnn.CnnConfig(
        window_w=w,
        window_h=h,
        blocks=_as_blocks(args.blocks),
        fc_hidden=args.fc_hidden,
        dropout_rate=args.dropout,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.model_seed,
        precision=args.precision,
    )
    model = cnn.CnnModel(config)
    sink = None
    if args.checkpoints:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)

        def sink(epoch: int, m: cnn.CnnModel) -> None:
            modelio.save_model(m, ckpt_dir / f"epoch_{epoch:03d}.wopm")

    records = cnn.train(model, train_ds, val_ds, checkpoint_sink=sink, log=print)
    modelio.save_model(model, model_path)
    log_path = out_dir / "epochs.jsonl"
    with open(log_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")
    run.outputs = [str(model_path), str(log_path)]
    if not args.no_figures:
        from . import report

        fig_path = out_dir / "training_curves.png"
        report.save_training_figure(records, fig_path)
        run.outputs.append(str(fig_path))
    print(f"trained {config.epochs} epochs -> {model_path}")
    run.write(out_dir / "run_manifest.json")
    return EXIT_OK


def _cmd_select(args, run: _Run) -> int:
    corpus = synthgen.load_corpus(args.corpus)
    run.inputs = [str(args.corpus)]
    spec = selection.GridSpec(
        window_sizes=_as_int_list(args.windows),
        learning_rates=_as_float_list(args.learning_rates),
        dropout_rates=_as_float_list(args.dropouts),
        mask_sizes=_as_int_list(args.mask_sizes),
        epochs=args.epochs,
        train_subsample=args.train_subsample,
        train_seed=args.train_seed,
        val_subsample=args.val_subsample,
        val_seed=args.val_seed,
        model_seed=args.model_seed,
        n_masks=args.n_masks,
        fixed_mask_size=args.fixed_mask_size,
        fc_hidden=args.fc_hidden,
        batch_size=args.batch_size,
        precision=args.precision,
        rel_tol=args.rel_tol,
        narrow_steps=args.narrow_steps,
    )
    out_dir = Path(args.out_dir)
    rep = selection.run_grid(spec, corpus, out_dir, log=print)
    best = selection.select_best(rep)
    print(
        f"best cell: window {best.window}x{best.window} lr {best.lr:g} "
        f"dropout {best.dropout:g} mask {best.mask} epoch {best.epoch} "
        f"(val MAE {best.val_mae:.6f})"
    )
    run.outputs = [
        str(out_dir / selection.REPORT_NAME),
        str(out_dir / selection.GRID_MANIFEST_NAME),
    ]
    if not args.no_figures:
        from . import report

        fig_path = out_dir / "selection_report.png"
        report.save_selection_figure(rep, fig_path)
        run.outputs.append(str(fig_path))
    if not args.skip_retrain:
        selection.retrain_final(best, spec, corpus, out_dir, log=print)
        final = out_dir / selection.FINAL_MODEL_NAME
        run.outputs.append(str(final))
        print(f"retrained final model -> {final}")
    run.write(out_dir / "run_manifest.json")
    return EXIT_OK


def _load_local_function(model_path) -> woperator.LocalFunction:
    model = modelio.load_model(model_path)
    return modelio.local_function_from_model(model)


def _cmd_apply(args, run: _Run) -> int:
    fn = _load_local_function(args.model)
    run.inputs = [str(args.model)]
    mode = woperator.MODE_ALL if args.mode == "all" else woperator.MODE_FOREGROUND
    if args.input:
        if not args.output:
            raise InvalidArgumentError("--input requires --output")
        img = read_image(args.input)
        out = woperator.apply_operator(fn, img, mode)
        write_image(out, args.output)
        run.inputs.append(str(args.input))
        run.outputs = [str(args.output)]
        print(f"applied operator: {args.input} -> {args.output}")
        run.write(Path(str(args.output) + ".manifest.json"))
        return EXIT_OK
    if not (args.corpus and args.out_dir):
        raise InvalidArgumentError("apply needs --input/--output or --corpus/--split/--out-dir")
    corpus = synthgen.load_corpus(args.corpus)
    run.inputs.append(str(args.corpus))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = corpus.entries(args.split)
    if not entries:
        raise DataError(f"corpus split {args.split!r} is empty")
    for entry in entries:
        img = read_image(corpus.root / entry.input_path)
        out = woperator.apply_operator(fn, img, mode)
        out_path = out_dir / f"{entry.image_id}_pred.pbm"
        write_image(out, out_path)
        run.outputs.append(str(out_path))
    print(f"applied operator to {len(entries)} {args.split} images -> {out_dir}")
    run.write(out_dir / "run_manifest.json")
    return EXIT_OK


def _cmd_eval(args, run: _Run) -> int:
    triples: list[tuple[str, Path, Path, Path]] = []
    if args.triple:
        for i, (inp, pred, exp) in enumerate(args.triple):
            triples.append((Path(inp).stem or f"triple{i}", Path(inp), Path(pred), Path(exp)))
    elif args.corpus and args.predicted_dir:
        corpus = synthgen.load_corpus(args.corpus)
        run.inputs.append(str(args.corpus))
        pred_dir = Path(args.predicted_dir)
        entries = corpus.entries(args.split)
        if not entries:
            raise DataError(f"corpus split {args.split!r} is empty")
        for entry in entries:
            triples.append(
                (
                    entry.image_id,
                    corpus.root / entry.input_path,
                    pred_dir / f"{entry.image_id}_pred.pbm",
                    corpus.root / entry.output_path,
                )
            )
    else:
        raise InvalidArgumentError("eval needs --triple or --corpus/--split/--predicted-dir")

    ids = []
    results = []
    for image_id, inp_path, pred_path, exp_path in triples:
        inp = read_image(inp_path)
        pred = read_image(pred_path)
        exp = read_image(exp_path)
        ids.append(image_id)
        results.append(metrics.staff_eval(inp, pred, exp))
    metrics.write_eval_csv(args.out, ids, results)
    run.outputs = [str(args.out)]
    pooled = metrics.pooled_result(results)
    print(
        f"evaluated {len(results)} images: accuracy {pooled.accuracy:.4f} "
        f"specificity {pooled.specificity:.4f} recall {pooled.recall:.4f} "
        f"mae {pooled.mae:.4f}"
    )
    if not args.no_figures:
        from . import report

        fig_path = Path(args.out).with_suffix(".png")
        report.save_eval_figure(ids, results, fig_path)
        run.outputs.append(str(fig_path))
    run.write(Path(str(args.out) + ".manifest.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser construction
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror the flags; flags win")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads; 1 pins the reproducibility contract")
    p.add_argument("--no-figures", action="store_true", help="skip PNG report rendering")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="woplearn",
        description="Learn and apply local binary image operators (staff-line removal toolkit)",
    )
    parser.add_argument("--version", action="version", version=f"woplearn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("gen", help="generate a synthetic score corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--staves", type=int, default=2)
    p.add_argument("--lines-per-staff", type=int, default=5)
    p.add_argument("--line-thickness", default="1,3", help="LO,HI pixels")
    p.add_argument("--line-spacing", default="6,10", help="LO,HI pixels")
    p.add_argument("--symbols-per-staff", default="4,8", help="LO,HI count")
    p.add_argument("--pepper", type=float, default=0.002)
    p.add_argument("--line-breaks", type=float, default=0.02)
    p.set_defaults(func=_cmd_gen)
    subparsers["gen"] = p

    p = sub.add_parser("extract", help="extract a labeled patch dataset from a corpus")
    p.add_argument("--corpus", required=True, help="corpus manifest JSON")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--window", type=int, required=True, help="odd square window size")
    p.add_argument("--window-h", type=int, help="height if the window is not square")
    p.add_argument("--sampling", default=dataset.SAMPLING_FOREGROUND,
                   choices=(dataset.SAMPLING_FOREGROUND, dataset.SAMPLING_ALL))
    p.add_argument("--subsample", type=int)
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset container (.wopd)")
    p.set_defaults(func=_cmd_extract)
    subparsers["extract"] = p

    p = sub.add_parser("train", help="train a CNN (default) or lookup table (--table)")
    p.add_argument("--train-data", required=True, help="dataset container")
    p.add_argument("--val-data", help="dataset container for per-epoch validation MAE")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--table", action="store_true", help="fit the lookup-table baseline")
    p.add_argument("--blocks", default="32x5,32x5", help="conv blocks as NxK,NxK")
    p.add_argument("--fc-hidden", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--precision", default="f32", choices=("f32", "f64"))
    p.add_argument("--checkpoints", action="store_true", help="write per-epoch checkpoints")
    p.set_defaults(func=_cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("select", help="grid search + model selection + final retrain")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--windows", default="9,11,13,15,17,19")
    p.add_argument("--learning-rates", default="10,1,1e-1,1e-2,1e-3,1e-4,1e-5,1e-6")
    p.add_argument("--dropouts", default="0,0.25,0.5")
    p.add_argument("--mask-sizes", default="5")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--train-subsample", type=int)
    p.add_argument("--train-seed", type=int, default=101)
    p.add_argument("--val-subsample", type=int)
    p.add_argument("--val-seed", type=int, default=202)
    p.add_argument("--model-seed", type=int, default=1)
    p.add_argument("--n-masks", type=int, default=32)
    p.add_argument("--fixed-mask-size", type=int, default=5)
    p.add_argument("--fc-hidden", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--precision", default="f32", choices=("f32", "f64"))
    p.add_argument("--rel-tol", type=float, default=0.01)
    p.add_argument("--narrow-steps", type=int, default=1)
    p.add_argument("--skip-retrain", action="store_true")
    p.set_defaults(func=_cmd_select)
    subparsers["select"] = p

    p = sub.add_parser("apply", help="apply a trained operator to images")
    p.add_argument("--model", required=True, help="model container (.wopm)")
    p.add_argument("--mode", default="foreground_only", choices=("foreground_only", "all"))
    p.add_argument("--input", help="single input image (PBM)")
    p.add_argument("--output", help="single output image (PBM)")
    p.add_argument("--corpus", help="corpus manifest for batch mode")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out-dir", help="output directory for batch mode")
    p.set_defaults(func=_cmd_apply)
    subparsers["apply"] = p

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--triple", nargs=3, action="append",
                   metavar=("INPUT", "PREDICTED", "EXPECTED"))
    p.add_argument("--corpus", help="corpus manifest JSON")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--predicted-dir", help="directory of <id>_pred.pbm files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_eval)
    subparsers["eval"] = p

    for sp in subparsers.values():
        _add_common(sp)
    return parser, subparsers


def _apply_config_file(argv: list[str], subparsers) -> None:
    """Let a JSON --config file supply defaults; explicit flags still win."""
    if not argv or argv[0] not in subparsers or "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return
    path = argv[idx + 1]
    try:
        with open(path) as fh:
            values = json.load(fh)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise InvalidArgumentError(f"config file {path} must hold a JSON object")
    sp = subparsers[argv[0]]
    known = {a.dest for a in sp._actions}
    unknown = set(values) - known
    if unknown:
        raise InvalidArgumentError(f"config file {path} has unknown keys: {sorted(unknown)}")
    sp.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_file(argv, subparsers)
        args = parser.parse_args(argv)
        run = _Run(args.command, args, argv)
        return args.func(args, run)
    except InvalidArgumentError as exc:
        print(f"{_fail_prefix('usage')} {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, SelectionError) as exc:
        print(f"{_fail_prefix('divergence')} {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"{_fail_prefix('data')} {exc}", file=sys.stderr)
        return EXIT_DATA
    except WoplearnError as exc:
        print(f"{_fail_prefix('data')} {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
