"""Lookup-table classifier: the classical local-function estimator.

Each distinct window pattern keeps its empirical label counts; prediction is
the per-pattern majority label.  Ties keep the pixel (label 1) and unseen
patterns fall back to the global majority label.
"""

from __future__ import annotations

import numpy as np

from .dataset import PatchDataset
from .errors import InvalidArgumentError
from .imagecore import Window


class FrequencyTable:
    """Pattern -> (count_label0, count_label1) map over a fixed window."""

    is_trained = True

    def __init__(
        self,
        window: Window,
        entries: dict[bytes, tuple[int, int]],
        default_label: int,
    ):
        self.window = window
        self.entries = entries
        self.default_label = int(default_label)

    def __len__(self) -> int:
        return len(self.entries)

    def predict_one(self, patch: np.ndarray) -> int:
        patch = np.asarray(patch, dtype=np.uint8)
        if patch.shape != (len(self.window),):
            raise InvalidArgumentError(
                f"patch must have length {len(self.window)}, got shape {patch.shape}"
            )
        key = np.packbits(patch).tobytes()
        counts = self.entries.get(key)
        if counts is None:
            return self.default_label
        c0, c1 = counts
        return 1 if c1 >= c0 else 0

    def predict(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.uint8)
        if patches.ndim != 2 or patches.shape[1] != len(self.window):
            raise InvalidArgumentError(
                f"patches must have shape (n, {len(self.window)}), got {patches.shape}"
            )
        packed = np.packbits(patches, axis=1)
        out = np.empty(len(patches), dtype=np.uint8)
        get = self.entries.get
        default = self.default_label
        for i, row in enumerate(packed):
            counts = get(row.tobytes())
            if counts is None:
                out[i] = default
            else:
                out[i] = 1 if counts[1] >= counts[0] else 0
        return out


def fit_table(ds: PatchDataset) -> FrequencyTable:
    """Aggregate exact pattern counts; default label = global majority (tie -> 1)."""
    if len(ds) == 0:
        raise InvalidArgumentError("cannot fit a frequency table on an empty dataset")
    patterns, inverse = np.unique(ds.packed, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    ones = np.bincount(inverse, weights=ds.labels).astype(np.int64)
    size = np.bincount(inverse)
    entries = {
        patterns[g].tobytes(): (int(size[g] - ones[g]), int(ones[g]))
        for g in range(len(patterns))
    }
    total_ones = int(ds.labels.sum())
    default = 1 if total_ones >= len(ds) - total_ones else 0
    return FrequencyTable(ds.window, entries, default)


def predict_table(table: FrequencyTable, patch: np.ndarray) -> int:
    return table.predict_one(patch)
