"""Apply a learned local function as a translation-invariant image operator.

The operator evaluates the local function on the flattened window pattern
around every pixel (``all_pixels`` mode) or only around input foreground
pixels with background forced to 0 (``foreground_only`` mode, which makes
the operator anti-extensive: output foreground is a subset of the input's).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import InvalidArgumentError, StateError
from .imagecore import BinaryImage, Window, extract_patches

MODE_FOREGROUND = "foreground_only"
MODE_ALL = "all_pixels"

_PREDICT_CHUNK = 16384


class PatchClassifier(Protocol):
    """Anything that maps flattened window patterns to {0,1} labels."""

    def predict(self, patches: np.ndarray) -> np.ndarray:
        """patches: (n, window_size) uint8 -> labels (n,) uint8."""
        ...


@dataclass(frozen=True)
class LocalFunction:
    """A window plus a trained classifier over its flattened patterns."""

    window: Window
    classifier: PatchClassifier

    def predict(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.uint8)
        if patches.ndim != 2 or patches.shape[1] != len(self.window):
            raise InvalidArgumentError(
                f"patches must have shape (n, {len(self.window)}), got {patches.shape}"
            )
        return np.asarray(self.classifier.predict(patches), dtype=np.uint8)


def apply_operator(
    fn: LocalFunction, img: BinaryImage, mode: str = MODE_FOREGROUND
) -> BinaryImage:
    """Evaluate the local function at every eligible pixel of img.

    In ``foreground_only`` mode background pixels are fixed to 0, so the
    output foreground set is always a subset of the input's.
    """
    if mode not in (MODE_FOREGROUND, MODE_ALL):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    if not getattr(fn.classifier, "is_trained", True):
        raise StateError("classifier has not been trained")

    if mode == MODE_FOREGROUND:
        ys, xs = img.foreground_coords()
    else:
        ys, xs = np.divmod(np.arange(img.height * img.width), img.width)

    out = np.zeros((img.height, img.width), dtype=np.uint8)
    for start in range(0, len(xs), _PREDICT_CHUNK):
        sl = slice(start, start + _PREDICT_CHUNK)
        patches = extract_patches(img, xs[sl], ys[sl], fn.window)
        out[ys[sl], xs[sl]] = fn.predict(patches)
    return BinaryImage(out)


def compose_apply(
    fns: Sequence[LocalFunction], img: BinaryImage, mode: str = MODE_FOREGROUND
) -> BinaryImage:
    """Apply the functions left to right, feeding each stage's output onward."""
    if not fns:
        raise InvalidArgumentError("compose_apply requires at least one function")
    for fn in fns:
        img = apply_operator(fn, img, mode)
    return img
