"""Binary images, observation windows, patch extraction, and PBM file I/O.

Pixel convention: 1 = ink/content (foreground), 0 = background, independent
of how a file format displays them.  Coordinates are (x, y) with x the
column and y the row; pixel storage is row-major.

Out-of-support reads return background (0), so patch extraction near borders
is total and an operator restricted to foreground pixels stays anti-extensive.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError, ParseError


class BinaryImage:
    """Immutable 2D grid of {0,1} pixels with an explicit finite support."""

    __slots__ = ("_a",)

    def __init__(self, array: np.ndarray | Sequence[Sequence[int]]):
        a = np.asarray(array, dtype=np.uint8)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvalidArgumentError(
                f"image must be a non-empty 2D grid, got shape {a.shape}"
            )
        if not np.isin(a, (0, 1)).all():
            raise InvalidArgumentError("image pixels must all be 0 or 1")
        a = a.copy()
        a.flags.writeable = False
        self._a = a

    @property
    def width(self) -> int:
        return self._a.shape[1]

    @property
    def height(self) -> int:
        return self._a.shape[0]

    @property
    def pixels(self) -> np.ndarray:
        """Row-major flat view of the pixel values (read-only)."""
        return self._a.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """(height, width) uint8 view of the pixels (read-only)."""
        return self._a

    def get(self, x: int, y: int) -> int:
        return int(self._a[y, x])

    def get_padded(self, x: int, y: int) -> int:
        """Pixel value at (x, y), or 0 when the point is outside the support."""
        if 0 <= x < self.width and 0 <= y < self.height:
            return int(self._a[y, x])
        return 0

    def foreground_count(self) -> int:
        return int(self._a.sum())

    def foreground_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(ys, xs) of the foreground pixels in row-major pixel order."""
        ys, xs = np.nonzero(self._a)
        return ys, xs

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self._a.shape == other._a.shape and bool((self._a == other._a).all())

    def __repr__(self) -> str:
        return f"BinaryImage({self.width}x{self.height}, fg={self.foreground_count()})"


class Window:
    """Finite ordered set of (dx, dy) offsets containing the origin.

    Offsets are kept in row-major (dy, dx) order so that patch flattening is
    deterministic and identical between training and application.
    """

    __slots__ = ("offsets", "_dx", "_dy")

    def __init__(self, offsets: Iterable[tuple[int, int]]):
        offs = [(int(dx), int(dy)) for dx, dy in offsets]
        if not offs:
            raise InvalidArgumentError("window must be non-empty")
        if len(set(offs)) != len(offs):
            raise InvalidArgumentError("window offsets must be unique")
        if (0, 0) not in offs:
            raise InvalidArgumentError("window must contain the origin (0, 0)")
        offs.sort(key=lambda o: (o[1], o[0]))
        self.offsets: tuple[tuple[int, int], ...] = tuple(offs)
        self._dx = np.array([o[0] for o in offs], dtype=np.int64)
        self._dy = np.array([o[1] for o in offs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.offsets)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Window):
            return NotImplemented
        return self.offsets == other.offsets

    def __repr__(self) -> str:
        return f"Window({len(self)} offsets, bbox={self.bounds()})"

    @property
    def dx(self) -> np.ndarray:
        return self._dx

    @property
    def dy(self) -> np.ndarray:
        return self._dy

    def bounds(self) -> tuple[int, int, int, int]:
        """(min_dx, max_dx, min_dy, max_dy) of the offset bounding box."""
        return (
            int(self._dx.min()),
            int(self._dx.max()),
            int(self._dy.min()),
            int(self._dy.max()),
        )


def make_rect_window(w: int, h: int) -> Window:
    """Centered rectangular window of odd dimensions w x h."""
    if w < 1 or h < 1 or w % 2 == 0 or h % 2 == 0:
        raise InvalidArgumentError(f"window dimensions must be odd and >= 1, got {w}x{h}")
    rw, rh = w // 2, h // 2
    return Window((dx, dy) for dy in range(-rh, rh + 1) for dx in range(-rw, rw + 1))


def get_pixel_padded(img: BinaryImage, x: int, y: int) -> int:
    return img.get_padded(x, y)


def extract_patch(img: BinaryImage, p: tuple[int, int], window: Window) -> np.ndarray:
    """Flattened window pattern around pixel p, background-padded at borders.

    Returns a uint8 vector v with v[k] = img(p + offset_k) in window offset
    order.  p must lie inside the image support.
    """
    x, y = p
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise InvalidArgumentError(
            f"point ({x}, {y}) outside image support {img.width}x{img.height}"
        )
    return extract_patches(img, np.array([x]), np.array([y]), window)[0]


def extract_patches(
    img: BinaryImage, xs: np.ndarray, ys: np.ndarray, window: Window
) -> np.ndarray:
    """Patch matrix (len(xs), |window|) for many in-support points at once."""
    min_dx, max_dx, min_dy, max_dy = window.bounds()
    pad_l, pad_r = max(0, -min_dx), max(0, max_dx)
    pad_t, pad_b = max(0, -min_dy), max(0, max_dy)
    padded = np.pad(img.array, ((pad_t, pad_b), (pad_l, pad_r)))
    ys_p = np.asarray(ys, dtype=np.int64) + pad_t
    xs_p = np.asarray(xs, dtype=np.int64) + pad_l
    out = np.empty((len(xs_p), len(window)), dtype=np.uint8)
    for k in range(len(window)):
        out[:, k] = padded[ys_p + window.dy[k], xs_p + window.dx[k]]
    return out


# ---------------------------------------------------------------------------
# Portable bitmap (PBM) I/O.  P1 (ASCII) and P4 (binary) are accepted on
# read; P4 is emitted on write.  PBM's "black" bit corresponds to pixel
# value 1 (ink), so round-trips are bit-exact.
# ---------------------------------------------------------------------------

_WS = b" \t\r\n\x0b\x0c"


class _ByteScanner:
    """Tracks the byte offset while tokenizing a PBM header/body."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def err(self, message: str) -> ParseError:
        return ParseError(message, self.pos)

    def skip_ws_and_comments(self) -> None:
        n = len(self.data)
        while self.pos < n:
            c = self.data[self.pos : self.pos + 1]
            if c in (b"#",):
                while self.pos < n and self.data[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            elif c in _WS:
                self.pos += 1
            else:
                return

    def read_uint(self, what: str) -> int:
        self.skip_ws_and_comments()
        start = self.pos
        n = len(self.data)
        while self.pos < n and self.data[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise self.err(f"expected unsigned integer for {what}")
        return int(self.data[start : self.pos])


def read_image(path: str | os.PathLike) -> BinaryImage:
    """Read a PBM file (P1 or P4) into a BinaryImage."""
    with open(path, "rb") as fh:
        data = fh.read()
    sc = _ByteScanner(data)
    if len(data) < 2:
        raise sc.err("file too short to hold a PBM header")
    magic = data[:2]
    sc.pos = 2
    if magic not in (b"P1", b"P4"):
        raise ParseError(f"unsupported format magic {magic!r} (want P1 or P4)", 0)
    width = sc.read_uint("width")
    height = sc.read_uint("height")
    if width < 1 or height < 1:
        raise sc.err(f"invalid dimensions {width}x{height}")

    if magic == b"P1":
        bits = np.empty(width * height, dtype=np.uint8)
        count = 0
        n = len(data)
        while count < width * height:
            sc.skip_ws_and_comments()
            if sc.pos >= n:
                raise sc.err(
                    f"truncated P1 payload: got {count} of {width * height} pixels"
                )
            c = data[sc.pos]
            if c == 0x30:  # '0'
                bits[count] = 0
            elif c == 0x31:  # '1'
                bits[count] = 1
            else:
                raise sc.err(f"unexpected character {chr(c)!r} in P1 payload")
            count += 1
            sc.pos += 1
        return BinaryImage(bits.reshape(height, width))

    # P4: exactly one whitespace byte terminates the header, then packed rows.
    if sc.pos >= len(data) or data[sc.pos : sc.pos + 1] not in _WS:
        raise sc.err("expected single whitespace byte after P4 header")
    sc.pos += 1
    row_bytes = (width + 7) // 8
    need = row_bytes * height
    payload = data[sc.pos : sc.pos + need]
    if len(payload) < need:
        sc.pos = len(data)
        raise sc.err(f"truncated P4 payload: got {len(payload)} of {need} bytes")
    rows = np.frombuffer(payload, dtype=np.uint8).reshape(height, row_bytes)
    bits = np.unpackbits(rows, axis=1)[:, :width]
    return BinaryImage(bits)


def write_image(img: BinaryImage, path: str | os.PathLike) -> None:
    """Write a BinaryImage as binary PBM (P4), rows padded to byte boundaries."""
    header = f"P4\n{img.width} {img.height}\n".encode("ascii")
    packed = np.packbits(img.array, axis=1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(packed.tobytes())


def require_same_dims(a: BinaryImage, b: BinaryImage, what: str) -> None:
    if a.width != b.width or a.height != b.height:
        raise DataError(
            f"{what}: dimension mismatch {a.width}x{a.height} vs {b.width}x{b.height}"
        )
