"""Model container files ("WOPM"): one format for CNN and lookup-table models.

Layout: magic "WOPM", u32 LE format version, u32 LE header length, a JSON
header (kind tag, window offsets, config, training seed, epoch index, blob
descriptors), then little-endian blobs in declared layer order.  See
docs/formats.md for the byte-exact description.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .baseline import FrequencyTable
from .cnn import CnnConfig, CnnModel
from .errors import ParseError
from .imagecore import Window, make_rect_window
from .woperator import LocalFunction

_MAGIC = b"WOPM"
_VERSION = 1

_DTYPE_CODES = {"f32": "<f4", "f64": "<f8"}


def _write_container(path: str | os.PathLike, header: dict, blobs: list[bytes]) -> None:
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(_VERSION).tobytes())
        fh.write(np.uint32(len(hbytes)).tobytes())
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def _read_container(path: str | os.PathLike) -> tuple[dict, bytes, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ParseError(f"bad model magic {data[:4]!r} (want {_MAGIC!r})", 0)
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise ParseError(f"unsupported model container version {version}", 4)
    hlen = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad model header: {exc}", 12) from exc
    return header, data, 12 + hlen


def save_model(model: CnnModel | FrequencyTable, path: str | os.PathLike) -> None:
    if isinstance(model, CnnModel):
        _save_cnn(model, path)
    elif isinstance(model, FrequencyTable):
        _save_table(model, path)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__} as a model container")


def load_model(path: str | os.PathLike) -> CnnModel | FrequencyTable:
    header, data, pos = _read_container(path)
    kind = header.get("kind")
    if kind == "cnn":
        return _load_cnn(header, data, pos)
    if kind == "table":
        return _load_table(header, data, pos)
    raise ParseError(f"unknown model kind {kind!r}", 12)


def local_function_from_model(model: CnnModel | FrequencyTable) -> LocalFunction:
    """Wrap a loaded model into an applicable local function."""
    if isinstance(model, CnnModel):
        window = make_rect_window(model.config.window_w, model.config.window_h)
    else:
        window = model.window
    return LocalFunction(window=window, classifier=model)


def _save_cnn(model: CnnModel, path: str | os.PathLike) -> None:
    cfg = model.config
    code = _DTYPE_CODES[cfg.precision]
    window = make_rect_window(cfg.window_w, cfg.window_h)
    header = {
        "kind": "cnn",
        "window_offsets": [list(o) for o in window.offsets],
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "epoch": model.epoch,
        "params": [
            {"name": name, "shape": list(model.params[name].shape), "dtype": cfg.precision}
            for name in model.param_order
        ],
    }
    blobs = [model.params[name].astype(code).tobytes() for name in model.param_order]
    _write_container(path, header, blobs)


def _load_cnn(header: dict, data: bytes, pos: int) -> CnnModel:
    cfg_dict = dict(header["config"])
    cfg_dict["blocks"] = tuple(tuple(b) for b in cfg_dict["blocks"])
    config = CnnConfig(**cfg_dict)
    model = CnnModel(config)
    for desc in header["params"]:
        name, shape = desc["name"], tuple(desc["shape"])
        code = _DTYPE_CODES[desc["dtype"]]
        nbytes = int(np.prod(shape)) * np.dtype(code).itemsize
        if len(data) - pos < nbytes:
            raise ParseError(f"truncated parameter blob for {name}", pos)
        arr = np.frombuffer(data[pos : pos + nbytes], dtype=code).reshape(shape)
        if name not in model.params or model.params[name].shape != arr.shape:
            raise ParseError(f"parameter {name} does not fit the declared config", pos)
        model.params[name] = arr.astype(config.dtype)
        pos += nbytes
    model.epoch = int(header["epoch"])
    model.is_trained = True
    return model


def _save_table(table: FrequencyTable, path: str | os.PathLike) -> None:
    pattern_bytes = (len(table.window) + 7) // 8
    header = {
        "kind": "table",
        "window_offsets": [list(o) for o in table.window.offsets],
        "default_label": table.default_label,
        "n_entries": len(table.entries),
        "pattern_bytes": pattern_bytes,
    }
    parts = []
    for pattern in sorted(table.entries):
        c0, c1 = table.entries[pattern]
        parts.append(pattern)
        parts.append(np.uint64(c0).astype("<u8").tobytes())
        parts.append(np.uint64(c1).astype("<u8").tobytes())
    _write_container(path, header, [b"".join(parts)])


def _load_table(header: dict, data: bytes, pos: int) -> FrequencyTable:
    window = Window(tuple(o) for o in header["window_offsets"])
    pattern_bytes = int(header["pattern_bytes"])
    if pattern_bytes != (len(window) + 7) // 8:
        raise ParseError("pattern_bytes inconsistent with window size", 12)
    n = int(header["n_entries"])
    entry_size = pattern_bytes + 16
    if len(data) - pos < n * entry_size:
        raise ParseError(
            f"truncated table payload: got {len(data) - pos} of {n * entry_size} bytes", pos
        )
    entries: dict[bytes, tuple[int, int]] = {}
    for _ in range(n):
        pattern = data[pos : pos + pattern_bytes]
        pos += pattern_bytes
        c0 = int(np.frombuffer(data[pos : pos + 8], dtype="<u8")[0])
        c1 = int(np.frombuffer(data[pos + 8 : pos + 16], dtype="<u8")[0])
        pos += 16
        entries[pattern] = (c0, c1)
    return FrequencyTable(window, entries, int(header["default_label"]))
