"""Procedural glyph atlas and the text renderer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DataError, InvalidArgumentError
from ..images import INPUT_HEIGHT
from . import _font

SPACE_WIDTH = 3


@dataclass(frozen=True)
class Style:
    """Rendering knobs for one sample. Scales multiply the 6x11 base cell."""

    bold: bool = False
    italic: bool = False
    underline: bool = False
    x_scale: int = 2
    y_scale: int = 3
    spacing: int = 1
    shear: float = 0.25
    ink: int = 20
    paper: int = 245
    margin: int = 4


class GlyphAtlas:
    """Binary glyph rasters, cropped horizontally to their ink columns."""

    def __init__(self, rows: dict | None = None, cell_width: int = _font.CELL_WIDTH):
        rows = _font.ROWS if rows is None else rows
        self.glyphs = {}
        for ch, bits in rows.items():
            raster = np.array([[(r >> (cell_width - 1 - c)) & 1 for c in range(cell_width)] for r in bits], dtype=bool)
            cols = np.flatnonzero(raster.any(axis=0))
            if cols.size:
                raster = raster[:, cols[0]:cols[-1] + 1]
            else:
                raster = np.zeros((raster.shape[0], SPACE_WIDTH), dtype=bool)
            self.glyphs[ch] = raster
        self.cell_height = len(next(iter(rows.values())))

    @property
    def chars(self) -> str:
        return "".join(self.glyphs)

    def __contains__(self, ch: str) -> bool:
        return ch in self.glyphs

    def glyph(self, ch: str) -> np.ndarray:
        try:
            return self.glyphs[ch]
        except KeyError:
            raise DataError(f"no glyph for character {ch!r}") from None

    def text_width(self, text: str, style: Style) -> int:
        """Rendered width in pixels, before italic shear."""
        ink = sum(self.glyph(c).shape[1] for c in text) * style.x_scale
        gap = style.spacing + int(style.bold)
        return ink + gap * (len(text) - 1) + int(style.bold) + 2 * style.margin


_DEFAULT_ATLAS = None


def default_atlas() -> GlyphAtlas:
    global _DEFAULT_ATLAS
    if _DEFAULT_ATLAS is None:
        _DEFAULT_ATLAS = GlyphAtlas()
    return _DEFAULT_ATLAS


def render(text: str, atlas: GlyphAtlas | None = None, style: Style = Style(), height: int = INPUT_HEIGHT) -> np.ndarray:
    """Draw ``text`` as dark ink on a light background, exactly ``height`` rows tall."""
    if not text:
        raise InvalidArgumentError("cannot render empty text")
    atlas = atlas or default_atlas()
    glyph_h = atlas.cell_height * style.y_scale
    if glyph_h + 2 > height:
        raise InvalidArgumentError(f"y_scale {style.y_scale} does not fit a {height}-pixel line")

    pieces = []
    # dilation grows strokes rightwards by one pixel; keep the visible gap
    gap = np.zeros((glyph_h, style.spacing + int(style.bold)), dtype=bool)
    for i, ch in enumerate(text):
        g = np.kron(atlas.glyph(ch), np.ones((style.y_scale, style.x_scale), dtype=bool))
        if i:
            pieces.append(gap)
        pieces.append(g)
    line = np.concatenate(pieces, axis=1)
    if style.bold:
        line = ndimage.binary_dilation(line, structure=np.ones((1, 2), dtype=bool), origin=(0, -1))
        line = np.concatenate([line, np.zeros((glyph_h, 1), dtype=bool)], axis=1)

    top = (height - glyph_h) // 2
    ink = np.zeros((height, line.shape[1] + 2 * style.margin), dtype=bool)
    ink[top:top + glyph_h, style.margin:style.margin + line.shape[1]] = line
    if style.underline:
        row = min(height - 2, top + glyph_h)
        ink[row:row + 2, style.margin:style.margin + line.shape[1]] = True
    if style.italic:
        ink = _shear_rows(ink, style.shear)

    return np.where(ink, np.uint8(style.ink), np.uint8(style.paper)).astype(np.uint8)


def _shear_rows(ink: np.ndarray, k: float) -> np.ndarray:
    """Shift each row right by ``k`` pixels per row above the bottom edge."""
    h, w = ink.shape
    shifts = np.rint(k * (h - 1 - np.arange(h))).astype(int)
    out = np.zeros((h, w + int(shifts.max())), dtype=bool)
    for r in range(h):
        out[r, shifts[r]:shifts[r] + w] = ink[r]
    return out


def sample_style(probs: dict, rng: np.random.Generator) -> Style:
    """Draw a style; ``probs`` holds bold / italic / underline / wide probabilities."""
    return Style(
        bold=bool(rng.random() < probs.get("bold", 0.0)),
        italic=bool(rng.random() < probs.get("italic", 0.0)),
        underline=bool(rng.random() < probs.get("underline", 0.0)),
        x_scale=3 if rng.random() < probs.get("wide", 0.0) else 2,
        spacing=int(rng.integers(1, 4)),
        shear=float(rng.uniform(0.12, 0.3)),
        ink=int(rng.integers(0, 70)),
        paper=int(rng.integers(210, 256)),
        margin=int(rng.integers(2, 9)),
    )
