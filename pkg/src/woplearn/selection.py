"""Grid search with per-epoch checkpointing and validation-MAE model selection.

Protocol: train every (learning rate, dropout, mask) cell for the first
window size, recording a checkpoint and validation MAE after each epoch.
For each later window, restrict the learning-rate and dropout lists to the
values within one grid step of the previous window's best, and stop growing
the window once the best MAE stops improving by a configurable relative
amount.  The overall winner is the checkpoint with the lowest validation
MAE (ties: smaller window, then earlier epoch, then smaller learning rate).

Cells are keyed by (window, lr, dropout, mask); the report is a JSONL file
with one line per (cell, epoch), and reruns skip every recorded cell.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .cnn import CnnConfig, CnnModel, train
from .dataset import PatchDataset, extract_dataset, subsample
from .errors import (
    DataError,
    InvalidArgumentError,
    SelectionError,
    TrainingDivergedError,
)
from .imagecore import make_rect_window
from .modelio import save_model
from .synthgen import Corpus

REPORT_NAME = "report.jsonl"
GRID_MANIFEST_NAME = "grid_manifest.json"
FINAL_MODEL_NAME = "final_model.wopm"


@dataclass(frozen=True)
class GridSpec:
    """Search space plus the shared training setup for every grid cell."""

    window_sizes: tuple[int, ...] = (9, 11, 13, 15, 17, 19)
    learning_rates: tuple[float, ...] = (10.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    dropout_rates: tuple[float, ...] = (0.0, 0.25, 0.5)
    mask_sizes: tuple[int, ...] = (5,)
    epochs: int = 50
    train_subsample: int | None = None
    train_seed: int = 101
    val_subsample: int | None = None
    val_seed: int = 202
    model_seed: int = 1
    n_masks: int = 32
    fixed_mask_size: int = 5
    fc_hidden: int = 512
    batch_size: int = 50
    precision: str = "f32"
    rel_tol: float = 0.01
    narrow_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "window_sizes", tuple(int(w) for w in self.window_sizes))
        object.__setattr__(self, "learning_rates", tuple(float(v) for v in self.learning_rates))
        object.__setattr__(self, "dropout_rates", tuple(float(v) for v in self.dropout_rates))
        object.__setattr__(self, "mask_sizes", tuple(int(m) for m in self.mask_sizes))
        if not self.window_sizes or not self.learning_rates or not self.dropout_rates:
            raise InvalidArgumentError("window/lr/dropout lists must be nonempty")
        if not self.mask_sizes:
            raise InvalidArgumentError("mask_sizes must be nonempty")
        ws = self.window_sizes
        if any(w % 2 == 0 or w < 1 for w in ws) or any(a >= b for a, b in zip(ws, ws[1:])):
            raise InvalidArgumentError("window sizes must be odd and strictly increasing")
        if any(lr <= 0 for lr in self.learning_rates):
            raise InvalidArgumentError("learning rates must be positive")
        if any(not 0.0 <= d < 1.0 for d in self.dropout_rates):
            raise InvalidArgumentError("dropout rates must be in [0, 1)")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.narrow_steps < 0:
            raise InvalidArgumentError("narrow_steps must be >= 0")

    def cell_config(self, window: int, lr: float, dropout: float, mask: int) -> CnnConfig:
        blocks = ((self.n_masks, mask), (self.n_masks, self.fixed_mask_size))
        return CnnConfig(
            window_w=window,
            window_h=window,
            blocks=blocks,
            fc_hidden=self.fc_hidden,
            dropout_rate=dropout,
            learning_rate=lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.model_seed,
            precision=self.precision,
        )


@dataclass(frozen=True)
class CellRecord:
    window: int
    lr: float
    dropout: float
    mask: int
    epoch: int
    val_mae: float  # +inf marks a diverged cell
    checkpoint: str | None
    seconds: float

    @property
    def diverged(self) -> bool:
        return math.isinf(self.val_mae)

    def sort_key(self) -> tuple:
        return (self.val_mae, self.window, self.epoch, self.lr, self.dropout, self.mask)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if math.isinf(self.val_mae):
            d["val_mae"] = None
            d["diverged"] = True
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "CellRecord":
        d = json.loads(line)
        mae = d["val_mae"]
        return CellRecord(
            window=d["window"],
            lr=d["lr"],
            dropout=d["dropout"],
            mask=d["mask"],
            epoch=d["epoch"],
            val_mae=math.inf if mae is None else float(mae),
            checkpoint=d["checkpoint"],
            seconds=d["seconds"],
        )


@dataclass
class SelectionReport:
    records: list[CellRecord] = field(default_factory=list)
    windows_trained: list[int] = field(default_factory=list)
    cells_trained: int = 0
    cells_skipped: int = 0

    def best_per_window(self) -> dict[int, CellRecord]:
        best: dict[int, CellRecord] = {}
        for rec in self.records:
            if rec.diverged:
                continue
            cur = best.get(rec.window)
            if cur is None or rec.sort_key() < cur.sort_key():
                best[rec.window] = rec
        return best

    def save(self, path: str | os.PathLike) -> None:
        ordered = sorted(self.records, key=lambda r: (r.window, r.lr, r.dropout, r.mask, r.epoch))
        with open(path, "w") as fh:
            for rec in ordered:
                fh.write(rec.to_json() + "\n")

    @staticmethod
    def load(path: str | os.PathLike) -> "SelectionReport":
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(CellRecord.from_json(line))
        windows = sorted({r.window for r in records})
        return SelectionReport(records=records, windows_trained=windows)


def select_best(report: SelectionReport) -> CellRecord:
    """Overall argmin of validation MAE under the pinned tie rules."""
    finite = [r for r in report.records if not r.diverged]
    if not finite:
        raise SelectionError("no grid cell produced a finite validation MAE")
    return min(finite, key=CellRecord.sort_key)


def narrow_values(values: tuple, best, steps: int = 1) -> tuple:
    """Values within `steps` grid positions of `best` in the original list."""
    i = values.index(best)
    return tuple(values[max(0, i - steps) : i + steps + 1])


def _cell_dir_name(window: int, lr: float, dropout: float, mask: int) -> str:
    return f"w{window}_lr{lr:g}_d{dropout:g}_m{mask}"


def run_grid(
    spec: GridSpec,
    corpus: Corpus,
    out_dir: str | os.PathLike,
    log=None,
) -> SelectionReport:
    """Train every scheduled grid cell, resuming from any existing report.

    Checkpoints land in <out_dir>/checkpoints/<cell>/epoch_NNN.wopm; the
    report is appended cell by cell so an interrupted run loses at most one
    cell.  Diverged cells are recorded with an infinite MAE and the grid
    continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / REPORT_NAME
    existing: dict[tuple, list[CellRecord]] = {}
    if report_path.exists():
        for rec in SelectionReport.load(report_path).records:
            existing.setdefault((rec.window, rec.lr, rec.dropout, rec.mask), []).append(rec)

    train_pairs = corpus.load_pairs("train")
    val_pairs = corpus.load_pairs("val")
    if not train_pairs or not val_pairs:
        raise DataError("grid search requires nonempty train and val splits")

    report = SelectionReport()
    report_fh = open(report_path, "a")
    try:
        prev_window_best: CellRecord | None = None
        lr_values = spec.learning_rates
        dropout_values = spec.dropout_rates
        for wi, window_size in enumerate(spec.window_sizes):
            if wi > 0:
                lr_values = narrow_values(
                    spec.learning_rates, prev_window_best.lr, spec.narrow_steps
                )
                dropout_values = narrow_values(
                    spec.dropout_rates, prev_window_best.dropout, spec.narrow_steps
                )
            cells = [
                (lr, dropout, mask)
                for lr in lr_values
                for dropout in dropout_values
                for mask in spec.mask_sizes
            ]
            window_records: list[CellRecord] = []
            train_ds = val_ds = None
            for lr, dropout, mask in cells:
                key = (window_size, lr, dropout, mask)
                done = existing.get(key)
                if done and (
                    any(r.diverged for r in done)
                    or len({r.epoch for r in done}) >= spec.epochs
                ):
                    window_records.extend(done)
                    report.records.extend(done)
                    report.cells_skipped += 1
                    continue
                if train_ds is None:
                    train_ds, val_ds = _window_datasets(spec, window_size, train_pairs, val_pairs)
                recs = _train_cell(spec, window_size, lr, dropout, mask, train_ds, val_ds, out, log)
                for rec in recs:
                    report_fh.write(rec.to_json() + "\n")
                report_fh.flush()
                window_records.extend(recs)
                report.records.extend(recs)
                report.cells_trained += 1
            report.windows_trained.append(window_size)

            finite = [r for r in window_records if not r.diverged]
            if not finite:
                # Nothing usable at this window; larger windows cannot be
                # narrowed sensibly, so stop here.
                break
            best = min(finite, key=CellRecord.sort_key)
            if prev_window_best is not None:
                improvement = prev_window_best.val_mae - best.val_mae
                if prev_window_best.val_mae == 0.0 or improvement < spec.rel_tol * prev_window_best.val_mae:
                    break
            prev_window_best = best
    finally:
        report_fh.close()

    report.save(report_path)  # canonical order; drops stale partial-cell lines
    _write_grid_manifest(spec, report, out)
    return report


def _window_datasets(
    spec: GridSpec, window_size: int, train_pairs, val_pairs
) -> tuple[PatchDataset, PatchDataset]:
    window = make_rect_window(window_size, window_size)
    train_ds = extract_dataset(train_pairs, window)
    val_ds = extract_dataset(val_pairs, window)
    if spec.train_subsample is not None:
        if spec.train_subsample > len(train_ds):
            raise DataError(
                f"train subsample {spec.train_subsample} exceeds the "
                f"{len(train_ds)} available training patches"
            )
        train_ds = subsample(train_ds, spec.train_subsample, spec.train_seed)
    if spec.val_subsample is not None:
        if spec.val_subsample > len(val_ds):
            raise DataError(
                f"val subsample {spec.val_subsample} exceeds the "
                f"{len(val_ds)} available validation patches"
            )
        val_ds = subsample(val_ds, spec.val_subsample, spec.val_seed)
    return train_ds, val_ds


def _train_cell(
    spec: GridSpec,
    window_size: int,
    lr: float,
    dropout: float,
    mask: int,
    train_ds: PatchDataset,
    val_ds: PatchDataset,
    out: Path,
    log=None,
) -> list[CellRecord]:
    cell = _cell_dir_name(window_size, lr, dropout, mask)
    ckpt_dir = out / "checkpoints" / cell
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if log:
        log(f"training cell {cell}")
    config = spec.cell_config(window_size, lr, dropout, mask)
    model = CnnModel(config)
    ckpt_rel: dict[int, str] = {}

    def sink(epoch: int, m: CnnModel) -> None:
        rel = f"checkpoints/{cell}/epoch_{epoch:03d}.wopm"
        save_model(m, out / rel)
        ckpt_rel[epoch] = rel

    try:
        epoch_records = train(model, train_ds, val_ds, checkpoint_sink=sink)
    except TrainingDivergedError as exc:
        records = [
            CellRecord(window_size, lr, dropout, mask, e, math.inf, None, 0.0)
            for e in [exc.epoch or 1]
        ]
        if log:
            log(f"cell {cell} diverged at epoch {exc.epoch}")
        return records
    return [
        CellRecord(
            window=window_size,
            lr=lr,
            dropout=dropout,
            mask=mask,
            epoch=r.epoch,
            val_mae=r.val_mae,
            checkpoint=ckpt_rel[r.epoch],
            seconds=r.seconds,
        )
        for r in epoch_records
    ]


def _write_grid_manifest(spec: GridSpec, report: SelectionReport, out: Path) -> None:
    cells: dict[tuple, dict] = {}
    for rec in report.records:
        key = (rec.window, rec.lr, rec.dropout, rec.mask)
        info = cells.setdefault(
            key,
            {
                "window": rec.window,
                "lr": rec.lr,
                "dropout": rec.dropout,
                "mask": rec.mask,
                "dir": f"checkpoints/{_cell_dir_name(*key)}",
                "epochs": 0,
                "diverged": False,
            },
        )
        info["epochs"] = max(info["epochs"], rec.epoch)
        info["diverged"] = info["diverged"] or rec.diverged
    manifest = {
        "grid": dataclasses.asdict(spec),
        "report": REPORT_NAME,
        "windows_trained": report.windows_trained,
        "cells": [cells[k] for k in sorted(cells)],
    }
    with open(out / GRID_MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def retrain_final(
    best: CellRecord,
    spec: GridSpec,
    corpus: Corpus,
    out_dir: str | os.PathLike,
    log=None,
) -> CnnModel:
    """Retrain the selected configuration on the whole training set.

    Identical config and seed, run for exactly the selected epoch count; no
    subsampling.  Divergence here is an error, not a recorded cell.
    """
    train_pairs = corpus.load_pairs("train")
    val_pairs = corpus.load_pairs("val")
    if not train_pairs:
        raise DataError("retraining requires a nonempty train split")
    window = make_rect_window(best.window, best.window)
    train_ds = extract_dataset(train_pairs, window)
    val_ds = extract_dataset(val_pairs, window)
    if spec.val_subsample is not None and spec.val_subsample <= len(val_ds):
        val_ds = subsample(val_ds, spec.val_subsample, spec.val_seed)
    config = dataclasses.replace(
        spec.cell_config(best.window, best.lr, best.dropout, best.mask),
        epochs=best.epoch,
    )
    model = CnnModel(config)
    train(model, train_ds, val_ds, log=log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / FINAL_MODEL_NAME)
    return model
