"""Labeled patch datasets extracted from input/output image pairs.

Patches are stored bit-packed and expanded to numeric vectors only at the
training boundary.  Sample order is canonical: (image, row-major pixel).
All randomness (subsampling, per-epoch shuffling) uses numpy's PCG64
generator with explicit 64-bit seeds so runs reproduce across platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError, ParseError
from .imagecore import BinaryImage, Window, extract_patches, require_same_dims

SAMPLING_FOREGROUND = "foreground_only"
SAMPLING_ALL = "all_pixels"

RNG_NAME = "numpy-pcg64"

_MAGIC = b"WOPD"
_VERSION = 1


@dataclass(frozen=True)
class DatasetStats:
    total: int
    distinct: int
    conflicting: int


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint image-id lists naming the train/validation/test partitions."""

    train_image_ids: tuple[str, ...]
    validation_image_ids: tuple[str, ...]
    test_image_ids: tuple[str, ...]

    def __post_init__(self):
        tr, va, te = (
            set(self.train_image_ids),
            set(self.validation_image_ids),
            set(self.test_image_ids),
        )
        if tr & va or tr & te or va & te:
            raise InvalidArgumentError("split id lists must be pairwise disjoint")


class PatchDataset:
    """Bit-packed window patterns with {0,1} labels and optional provenance."""

    def __init__(
        self,
        window: Window,
        packed: np.ndarray,
        labels: np.ndarray,
        provenance: np.ndarray | None = None,
    ):
        self.window = window
        self.patch_bits = len(window)
        self.packed = np.ascontiguousarray(packed, dtype=np.uint8)
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
        row_bytes = (self.patch_bits + 7) // 8
        if self.packed.ndim != 2 or self.packed.shape[1] != row_bytes:
            raise InvalidArgumentError(
                f"packed patches must have shape (n, {row_bytes}), got {self.packed.shape}"
            )
        if len(self.labels) != len(self.packed):
            raise InvalidArgumentError("patches and labels must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise InvalidArgumentError("labels must all be 0 or 1")
        if provenance is not None:
            provenance = np.ascontiguousarray(provenance, dtype=np.int32)
            if provenance.shape != (len(self.labels), 3):
                raise InvalidArgumentError(
                    f"provenance must have shape (n, 3), got {provenance.shape}"
                )
        self.provenance = provenance
        self.stats = self._compute_stats()

    def __len__(self) -> int:
        return len(self.labels)

    def patches(self, index: slice | np.ndarray | None = None) -> np.ndarray:
        """Unpacked (n, patch_bits) uint8 view of (a slice of) the patches."""
        packed = self.packed if index is None else self.packed[index]
        return np.unpackbits(packed, axis=1, count=self.patch_bits)

    def _compute_stats(self) -> DatasetStats:
        n = len(self)
        if n == 0:
            return DatasetStats(0, 0, 0)
        _, inverse = np.unique(self.packed, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        group_size = np.bincount(inverse)
        ones = np.bincount(inverse, weights=self.labels).astype(np.int64)
        conflicting = int(((ones > 0) & (ones < group_size)).sum())
        return DatasetStats(total=n, distinct=len(group_size), conflicting=conflicting)


def extract_dataset(
    pairs: Sequence[tuple[BinaryImage, BinaryImage]],
    window: Window,
    sampling: str = SAMPLING_FOREGROUND,
    image_ids: Sequence[int] | None = None,
) -> PatchDataset:
    """One labeled sample per eligible pixel of every (input, output) pair.

    The label is the output pixel at the patch center.  In foreground_only
    mode only input foreground pixels are sampled and the ground truth must
    be anti-extensive (output foreground a subset of the input's).
    """
    if sampling not in (SAMPLING_FOREGROUND, SAMPLING_ALL):
        raise InvalidArgumentError(f"unknown sampling mode {sampling!r}")
    if image_ids is None:
        image_ids = list(range(len(pairs)))
    packed_parts: list[np.ndarray] = []
    label_parts: list[np.ndarray] = []
    prov_parts: list[np.ndarray] = []
    row_bytes = (len(window) + 7) // 8
    for img_id, (inp, out) in zip(image_ids, pairs):
        require_same_dims(inp, out, f"pair {img_id}")
        if sampling == SAMPLING_FOREGROUND:
            bad = (out.array == 1) & (inp.array == 0)
            if bad.any():
                by, bx = np.nonzero(bad)
                raise DataError(
                    f"pair {img_id}: output foreground outside input foreground "
                    f"at pixel ({int(bx[0])}, {int(by[0])}); ground truth must be "
                    "anti-extensive in foreground_only mode"
                )
            ys, xs = inp.foreground_coords()
        else:
            ys, xs = np.divmod(np.arange(inp.height * inp.width), inp.width)
        if len(xs) == 0:
            continue
        patches = extract_patches(inp, xs, ys, window)
        packed_parts.append(np.packbits(patches, axis=1))
        label_parts.append(out.array[ys, xs])
        prov = np.empty((len(xs), 3), dtype=np.int32)
        prov[:, 0] = img_id
        prov[:, 1] = xs
        prov[:, 2] = ys
        prov_parts.append(prov)
    if packed_parts:
        packed = np.concatenate(packed_parts)
        labels = np.concatenate(label_parts)
        provenance = np.concatenate(prov_parts)
    else:
        packed = np.empty((0, row_bytes), dtype=np.uint8)
        labels = np.empty((0,), dtype=np.uint8)
        provenance = np.empty((0, 3), dtype=np.int32)
    return PatchDataset(window, packed, labels, provenance)


def subsample(ds: PatchDataset, n: int, seed: int) -> PatchDataset:
    """Uniform sample of n patches without replacement, in canonical order."""
    if n < 0 or n > len(ds):
        raise InvalidArgumentError(f"cannot subsample {n} of {len(ds)} patches")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.choice(len(ds), size=n, replace=False)
    idx.sort()
    prov = None if ds.provenance is None else ds.provenance[idx]
    return PatchDataset(ds.window, ds.packed[idx], ds.labels[idx], prov)


def shuffle_batches(
    ds: PatchDataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (patches, labels) mini-batches in a fresh per-epoch permutation.

    The permutation is seeded with seed XOR epoch; the final short batch is
    kept.  Patches are unpacked to (b, patch_bits) uint8 on the fly.
    """
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(seed ^ epoch))
    perm = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield ds.patches(idx), ds.labels[idx]


# ---------------------------------------------------------------------------
# Dataset container: magic "WOPD", u32 version, u32 JSON-header length, JSON
# header (window offsets, counts, flags), then the bit-packed patch rows, the
# label bytes, and little-endian int32 provenance triples when present.
# Byte layout is documented in docs/formats.md.
# ---------------------------------------------------------------------------


def save_dataset(ds: PatchDataset, path: str | os.PathLike) -> None:
    header = {
        "window_offsets": [list(o) for o in ds.window.offsets],
        "n_samples": len(ds),
        "patch_bits": ds.patch_bits,
        "has_provenance": ds.provenance is not None,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(_VERSION).tobytes())
        fh.write(np.uint32(len(hbytes)).tobytes())
        fh.write(hbytes)
        fh.write(ds.packed.tobytes())
        fh.write(ds.labels.tobytes())
        if ds.provenance is not None:
            fh.write(ds.provenance.astype("<i4").tobytes())


def load_dataset(path: str | os.PathLike) -> PatchDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ParseError(f"bad dataset magic {data[:4]!r} (want {_MAGIC!r})", 0)
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise ParseError(f"unsupported dataset container version {version}", 4)
    hlen = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad dataset header: {exc}", 12) from exc
    window = Window(tuple(o) for o in header["window_offsets"])
    n = header["n_samples"]
    bits = header["patch_bits"]
    if bits != len(window):
        raise ParseError("patch_bits inconsistent with window size", 12)
    row_bytes = (bits + 7) // 8
    pos = 12 + hlen
    need = n * row_bytes + n + (n * 12 if header["has_provenance"] else 0)
    if len(data) - pos < need:
        raise ParseError(
            f"truncated dataset payload: got {len(data) - pos} of {need} bytes", pos
        )
    packed = np.frombuffer(data[pos : pos + n * row_bytes], dtype=np.uint8)
    packed = packed.reshape(n, row_bytes)
    pos += n * row_bytes
    labels = np.frombuffer(data[pos : pos + n], dtype=np.uint8)
    pos += n
    provenance = None
    if header["has_provenance"]:
        provenance = np.frombuffer(data[pos : pos + n * 12], dtype="<i4").reshape(n, 3)
    return PatchDataset(window, packed, labels, provenance)
