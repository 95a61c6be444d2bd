"""Deterministic synthetic music-score generator for desk-scale experiments.

Each image pairs a staff+symbol rendering (input) with its staff-removed
ground truth (output).  Symbol pixels that overlap a staff line are labeled
"keep", so the ground truth is always anti-extensive w.r.t. the input.
Degradations (ink specks, staff-line breaks) keep the task from being
solvable by pure pattern memorization.  Staff-line and beam thickness ranges
deliberately overlap: a thick line segment and a beam interior look locally
identical, which is the hard case for small windows.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SplitSpec
from .errors import DataError, InvalidArgumentError
from .imagecore import BinaryImage, read_image, write_image

RNG_NAME = "numpy-pcg64"


@dataclass(frozen=True)
class Degradation:
    """Pixel-level corruptions applied to the rendered input.

    pepper: probability that a background pixel becomes an ink speck.
    line_breaks: per-column probability that a staff line opens a small gap.
    Both zero means no degradation.
    """

    pepper: float = 0.0
    line_breaks: float = 0.0

    def __post_init__(self):
        for name, p in (("pepper", self.pepper), ("line_breaks", self.line_breaks)):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError(f"{name} probability must be in [0, 1], got {p}")


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 256
    staves: int = 2
    lines_per_staff: int = 5
    line_thickness: tuple[int, int] = (1, 3)
    line_spacing: tuple[int, int] = (6, 10)
    symbols_per_staff: tuple[int, int] = (4, 8)
    degradation: Degradation = Degradation(pepper=0.002, line_breaks=0.02)
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise InvalidArgumentError("canvas must be at least 32x32")
        if self.staves < 0 or self.lines_per_staff < 1:
            raise InvalidArgumentError("staves must be >= 0 and lines_per_staff >= 1")
        for name, rng_ in (
            ("line_thickness", self.line_thickness),
            ("line_spacing", self.line_spacing),
            ("symbols_per_staff", self.symbols_per_staff),
        ):
            lo, hi = rng_
            if lo < 0 or hi < lo:
                raise InvalidArgumentError(f"{name} range {rng_} is invalid")
        if self.line_thickness[0] < 1 or self.line_spacing[0] < 3:
            raise InvalidArgumentError("line thickness must be >= 1 and spacing >= 3")
        if self.staves > 0:
            staff_h = (self.lines_per_staff - 1) * self.line_spacing[1] + self.line_thickness[1]
            if self.staves * (staff_h + 8) + 8 > self.height:
                raise InvalidArgumentError(
                    f"{self.staves} staves of height up to {staff_h} do not fit a "
                    f"{self.width}x{self.height} canvas"
                )


def _draw_bar(canvas: np.ndarray, x0: int, y0: int, w: int, h: int) -> None:
    hh, ww = canvas.shape
    x1, y1 = min(x0 + w, ww), min(y0 + h, hh)
    x0, y0 = max(x0, 0), max(y0, 0)
    if x0 < x1 and y0 < y1:
        canvas[y0:y1, x0:x1] = 1


def _draw_ellipse(canvas: np.ndarray, cx: float, cy: float, rx: float, ry: float) -> None:
    hh, ww = canvas.shape
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, hh)
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, ww)
    if y0 >= y1 or x0 >= x1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    canvas[y0:y1, x0:x1][inside] = 1


def generate(cfg: SynthConfig) -> tuple[BinaryImage, BinaryImage, BinaryImage]:
    """Render one (input, ground-truth output, staff mask) triple.

    The output keeps every input pixel except those on a staff line and not
    on a symbol, so output foreground is a subset of input foreground.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    staff = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    symbols = np.zeros_like(staff)

    margin = 6
    band_h = (cfg.height - 2 * margin) // max(cfg.staves, 1)
    for s in range(cfg.staves):
        spacing = int(rng.integers(cfg.line_spacing[0], cfg.line_spacing[1] + 1))
        staff_h = (cfg.lines_per_staff - 1) * spacing + cfg.line_thickness[1]
        band_top = margin + s * band_h
        slack = max(band_h - staff_h, 1)
        top = band_top + int(rng.integers(0, slack))
        x0 = int(rng.integers(2, 10))
        x1 = cfg.width - int(rng.integers(2, 10))

        line_tops = []
        for li in range(cfg.lines_per_staff):
            th = int(rng.integers(cfg.line_thickness[0], cfg.line_thickness[1] + 1))
            y = top + li * spacing
            _draw_bar(staff, x0, y, x1 - x0, th)
            line_tops.append(y)

        n_symbols = int(rng.integers(cfg.symbols_per_staff[0], cfg.symbols_per_staff[1] + 1))
        for _ in range(n_symbols):
            _draw_symbol(symbols, rng, x0, x1, top, spacing, cfg.lines_per_staff)

    ink = staff | symbols
    staff_only = staff & (1 - symbols)
    ink = _degrade(ink, staff_only, cfg.degradation, rng)
    out = ink & (1 - staff_only)
    return BinaryImage(ink), BinaryImage(out), BinaryImage(staff)


def _draw_symbol(
    symbols: np.ndarray,
    rng: np.random.Generator,
    x0: int,
    x1: int,
    staff_top: int,
    spacing: int,
    n_lines: int,
) -> None:
    """One isolated note or one beamed group of 2-4 notes."""
    staff_bottom = staff_top + (n_lines - 1) * spacing
    rx = max(spacing * 0.45, 1.5)
    ry = max(spacing * 0.32, 1.2)
    stem_h = int(2.8 * spacing)
    stem_w = max(1, int(rng.integers(1, 3)))

    def draw_note(cx: int, cy: int) -> int:
        _draw_ellipse(symbols, cx, cy, rx, ry)
        sx = int(cx + rx) - stem_w + 1
        sy = cy - stem_h
        _draw_bar(symbols, sx, sy, stem_w, stem_h)
        return sy

    if rng.random() < 0.45:
        # Beamed group: noteheads joined by a horizontal beam at the stem tops.
        count = int(rng.integers(2, 5))
        step = int(rng.integers(int(1.6 * spacing), int(2.6 * spacing)))
        cx0 = int(rng.integers(x0 + 4, max(x1 - 4 - step * (count - 1), x0 + 5)))
        cy = int(rng.integers(staff_top, staff_bottom + 1))
        beam_th = int(rng.integers(3, 6))
        tops = [draw_note(cx0 + i * step, cy) for i in range(count)]
        beam_y = min(tops)
        _draw_bar(symbols, cx0, beam_y, step * (count - 1) + int(rx) + stem_w, beam_th)
    else:
        cx = int(rng.integers(x0 + 4, x1 - 4))
        cy = int(rng.integers(staff_top - spacing, staff_bottom + spacing + 1))
        draw_note(cx, cy)


def _degrade(
    ink: np.ndarray,
    staff_only: np.ndarray,
    deg: Degradation,
    rng: np.random.Generator,
) -> np.ndarray:
    ink = ink.copy()
    if deg.line_breaks > 0:
        ys, xs = np.nonzero(staff_only)
        cols = np.unique(xs)
        breaks = cols[rng.random(len(cols)) < deg.line_breaks]
        for c in breaks:
            gap = int(rng.integers(1, 4))
            ink[:, c : c + gap] &= 1 - staff_only[:, c : c + gap]
    if deg.pepper > 0:
        specks = (rng.random(ink.shape) < deg.pepper) & (ink == 0)
        ink |= specks.astype(np.uint8)
    return ink


# ---------------------------------------------------------------------------
# Corpus generation: paired PBM files plus a JSON manifest with the split.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusImage:
    image_id: str
    input_path: str
    output_path: str
    split: str


@dataclass
class Corpus:
    root: Path
    images: list[CorpusImage]
    config: SynthConfig | None
    seed: int | None

    def ids(self, split: str) -> list[str]:
        return [im.image_id for im in self.images if im.split == split]

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            train_image_ids=tuple(self.ids("train")),
            validation_image_ids=tuple(self.ids("val")),
            test_image_ids=tuple(self.ids("test")),
        )

    def load_pairs(self, split: str) -> list[tuple[BinaryImage, BinaryImage]]:
        return [
            (read_image(self.root / im.input_path), read_image(self.root / im.output_path))
            for im in self.images
            if im.split == split
        ]

    def entries(self, split: str) -> list[CorpusImage]:
        return [im for im in self.images if im.split == split]


def generate_corpus(
    cfg: SynthConfig, n_images: int, seed: int, out_dir: str | os.PathLike
) -> Corpus:
    """Write n image pairs and a manifest; split 60/20/20 train/val/test."""
    if n_images < 3:
        raise InvalidArgumentError(f"need at least 3 images, got {n_images}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = math.ceil(0.6 * n_images)
    n_val = math.ceil(0.2 * n_images)
    images: list[CorpusImage] = []
    for i in range(n_images):
        img_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])
        inp, outp, _ = generate(dataclasses.replace(cfg, seed=img_seed))
        image_id = f"img{i:04d}"
        in_name = f"{image_id}_in.pbm"
        gt_name = f"{image_id}_gt.pbm"
        write_image(inp, out / in_name)
        write_image(outp, out / gt_name)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        images.append(CorpusImage(image_id, in_name, gt_name, split))
    manifest = {
        "rng": RNG_NAME,
        "seed": seed,
        "config": _config_to_json(cfg),
        "images": [dataclasses.asdict(im) for im in images],
    }
    with open(out / "corpus.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Corpus(root=out, images=images, config=cfg, seed=seed)


def load_corpus(manifest_path: str | os.PathLike) -> Corpus:
    path = Path(manifest_path)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"corpus manifest {path} is not valid JSON: {exc}") from exc
    images = [
        CorpusImage(im["image_id"], im["input_path"], im["output_path"], im["split"])
        for im in manifest["images"]
    ]
    cfg = _config_from_json(manifest["config"]) if "config" in manifest else None
    return Corpus(root=path.parent, images=images, config=cfg, seed=manifest.get("seed"))


def _config_to_json(cfg: SynthConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for key in ("line_thickness", "line_spacing", "symbols_per_staff"):
        d[key] = list(d[key])
    return d


def _config_from_json(d: dict) -> SynthConfig:
    d = dict(d)
    for key in ("line_thickness", "line_spacing", "symbols_per_staff"):
        d[key] = tuple(d[key])
    d["degradation"] = Degradation(**d["degradation"])
    return SynthConfig(**d)
