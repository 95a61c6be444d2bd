"""Pixel-level evaluation: mean absolute error and the staff-removal triple.

The staff-removal protocol evaluates only pixels that are foreground in the
INPUT image.  Positive class = staff pixel (expected output 0, i.e. to be
removed): recall measures staff detection, specificity measures symbol
preservation.  Getting this polarity wrong is the classic bug here, so the
confusion-matrix conventions are pinned by tests.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError
from .imagecore import BinaryImage, require_same_dims

DOMAIN_ALL = "all_pixels"
DOMAIN_FOREGROUND = "foreground_of_input"

CSV_COLUMNS = (
    "image_id",
    "pixels",
    "TP",
    "TN",
    "FP",
    "FN",
    "accuracy",
    "specificity",
    "recall",
    "mae",
    "flags",
)


@dataclass(frozen=True)
class EvalResult:
    mae: float
    accuracy: float
    specificity: float
    recall: float
    tp: int
    tn: int
    fp: int
    fn: int
    pixels_evaluated: int
    flags: tuple[str, ...] = ()


def mae(
    predicted: Sequence[BinaryImage],
    expected: Sequence[BinaryImage],
    domain: str = DOMAIN_ALL,
    inputs: Sequence[BinaryImage] | None = None,
) -> float:
    """Mean absolute pixel difference over the chosen pixel domain.

    domain "all_pixels" evaluates every pixel; "foreground_of_input"
    evaluates only pixels that are foreground in the corresponding input
    image (inputs required).  Equals 1 - pixelwise accuracy.
    """
    if len(predicted) != len(expected):
        raise DataError(
            f"predicted/expected list lengths differ: {len(predicted)} vs {len(expected)}"
        )
    if domain not in (DOMAIN_ALL, DOMAIN_FOREGROUND):
        raise InvalidArgumentError(f"unknown domain {domain!r}")
    if domain == DOMAIN_FOREGROUND:
        if inputs is None or len(inputs) != len(predicted):
            raise InvalidArgumentError(
                "domain foreground_of_input requires one input image per pair"
            )
    total = 0
    wrong = 0
    for i, (pred, exp) in enumerate(zip(predicted, expected)):
        require_same_dims(pred, exp, f"pair {i}")
        diff = pred.array != exp.array
        if domain == DOMAIN_FOREGROUND:
            require_same_dims(inputs[i], pred, f"pair {i} input")
            m = inputs[i].array == 1
            total += int(m.sum())
            wrong += int((diff & m).sum())
        else:
            total += pred.width * pred.height
            wrong += int(diff.sum())
    if total == 0:
        raise InvalidArgumentError("evaluation domain is empty")
    return wrong / total


def label_mae(predicted: np.ndarray, expected: np.ndarray) -> float:
    """MAE over flat {0,1} label vectors (patch-level evaluation)."""
    predicted = np.asarray(predicted)
    expected = np.asarray(expected)
    if predicted.shape != expected.shape:
        raise DataError(f"label shapes differ: {predicted.shape} vs {expected.shape}")
    if predicted.size == 0:
        raise InvalidArgumentError("evaluation domain is empty")
    return float(np.abs(predicted.astype(np.int64) - expected.astype(np.int64)).mean())


def staff_eval(
    input_img: BinaryImage, predicted: BinaryImage, expected: BinaryImage
) -> EvalResult:
    """Confusion counts over input-foreground pixels with staff as positive.

    TP: predicted 0 & expected 0 (staff removed);  FN: staff kept;
    TN: predicted 1 & expected 1 (symbol kept);    FP: symbol removed.
    Degenerate 0/0 ratios are reported as 1.0 with a flag so batch
    evaluation stays total on images with no staff or no symbols.
    """
    require_same_dims(input_img, predicted, "input vs predicted")
    require_same_dims(input_img, expected, "input vs expected")
    m = input_img.array == 1
    pred = predicted.array[m]
    exp = expected.array[m]
    tp = int(((pred == 0) & (exp == 0)).sum())
    tn = int(((pred == 1) & (exp == 1)).sum())
    fp = int(((pred == 0) & (exp == 1)).sum())
    fn = int(((pred == 1) & (exp == 0)).sum())
    total = tp + tn + fp + fn
    if total == 0:
        raise InvalidArgumentError("input image has no foreground pixels to evaluate")
    flags: list[str] = []
    if tp + fn == 0:
        recall = 1.0
        flags.append("degenerate_recall")
    else:
        recall = tp / (tp + fn)
    if tn + fp == 0:
        specificity = 1.0
        flags.append("degenerate_specificity")
    else:
        specificity = tn / (tn + fp)
    accuracy = (tp + tn) / total
    return EvalResult(
        mae=1.0 - accuracy,
        accuracy=accuracy,
        specificity=specificity,
        recall=recall,
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        pixels_evaluated=total,
        flags=tuple(flags),
    )


def pooled_result(results: Sequence[EvalResult]) -> EvalResult:
    """Aggregate by pooling confusion counts over all images."""
    tp = sum(r.tp for r in results)
    tn = sum(r.tn for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    total = tp + tn + fp + fn
    if total == 0:
        raise InvalidArgumentError("nothing to pool")
    flags: list[str] = []
    if tp + fn == 0:
        recall = 1.0
        flags.append("degenerate_recall")
    else:
        recall = tp / (tp + fn)
    if tn + fp == 0:
        specificity = 1.0
        flags.append("degenerate_specificity")
    else:
        specificity = tn / (tn + fp)
    accuracy = (tp + tn) / total
    return EvalResult(
        mae=1.0 - accuracy,
        accuracy=accuracy,
        specificity=specificity,
        recall=recall,
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        pixels_evaluated=total,
        flags=tuple(flags),
    )


def mean_result(results: Sequence[EvalResult]) -> EvalResult:
    """Aggregate by averaging per-image metrics (counts are still summed)."""
    if not results:
        raise InvalidArgumentError("nothing to average")
    n = len(results)
    return EvalResult(
        mae=sum(r.mae for r in results) / n,
        accuracy=sum(r.accuracy for r in results) / n,
        specificity=sum(r.specificity for r in results) / n,
        recall=sum(r.recall for r in results) / n,
        tp=sum(r.tp for r in results),
        tn=sum(r.tn for r in results),
        fp=sum(r.fp for r in results),
        fn=sum(r.fn for r in results),
        pixels_evaluated=sum(r.pixels_evaluated for r in results),
        flags=(),
    )


def write_eval_csv(
    path: str | os.PathLike,
    image_ids: Sequence[str],
    results: Sequence[EvalResult],
) -> None:
    """One row per image plus a pooled-count row and a per-image-mean row."""
    if len(image_ids) != len(results):
        raise InvalidArgumentError("one image id per result required")
    rows = list(zip(image_ids, results))
    rows.append(("pooled", pooled_result(results)))
    rows.append(("per_image_mean", mean_result(results)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for image_id, r in rows:
            writer.writerow(
                [
                    image_id,
                    r.pixels_evaluated,
                    r.tp,
                    r.tn,
                    r.fp,
                    r.fn,
                    f"{r.accuracy:.6f}",
                    f"{r.specificity:.6f}",
                    f"{r.recall:.6f}",
                    f"{r.mae:.6f}",
                    ";".join(r.flags),
                ]
            )
