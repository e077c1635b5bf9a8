"""Probabilistic image perturbations for training data.

Each op fires independently with its own probability and draws its
magnitude uniformly from its parameter range. Images stay 8-bit grayscale;
geometric ops resample bilinearly into the same canvas and fill uncovered
pixels with the paper tone (white unless the border says otherwise). Only ``pad_edges`` changes the image size.

The shipped default probabilities and ranges are our own choices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

FILL = 255
MAX_ROTATION_DEG = 10.0
MAX_SHEAR = 0.3

# parameter name -> (low, high) defaults per op kind
PARAM_DEFAULTS = {
    "gaussian_noise": {"sigma": (3.0, 12.0)},
    "salt_pepper": {"density": (0.005, 0.03)},
    "speckle": {"sigma": (0.05, 0.2)},
    "random_lines": {"count": (1, 3), "thickness": (1, 2), "intensity": (0, 120)},
    "pad_edges": {"pad": (1, 6)},
    "rotate": {"degrees": (-4.0, 4.0)},
    "shear": {"factor": (-0.2, 0.2)},
    "morph_dilate": {"size": (2, 2)},
    "morph_erode": {"size": (2, 2)},
}


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    probability: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PARAM_DEFAULTS:
            raise ConfigurationError(f"unknown augmentation {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(f"{self.kind}: probability must be in [0, 1]")
        merged = {**PARAM_DEFAULTS[self.kind], **{k: tuple(v) for k, v in self.params.items()}}
        unknown = set(self.params) - set(PARAM_DEFAULTS[self.kind])
        if unknown:
            raise ConfigurationError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        for name, (lo, hi) in merged.items():
            if hi < lo:
                raise ConfigurationError(f"{self.kind}.{name}: empty range ({lo}, {hi})")
        if self.kind == "rotate" and max(abs(v) for v in merged["degrees"]) > MAX_ROTATION_DEG:
            raise ConfigurationError(f"rotation limited to +/-{MAX_ROTATION_DEG} degrees")
        if self.kind == "shear" and max(abs(v) for v in merged["factor"]) > MAX_SHEAR:
            raise ConfigurationError(f"shear limited to +/-{MAX_SHEAR}")
        if self.kind in ("salt_pepper",) and not 0 <= merged["density"][0] <= merged["density"][1] <= 1:
            raise ConfigurationError("salt_pepper density must lie in [0, 1]")
        object.__setattr__(self, "params", merged)

    def draw(self, name: str, rng: np.random.Generator, integer: bool = False):
        lo, hi = self.params[name]
        if integer:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "probability": self.probability, "params": {k: list(v) for k, v in self.params.items()}}


@dataclass(frozen=True)
class AugmentPipeline:
    ops: tuple = ()

    @classmethod
    def from_dict(cls, d) -> "AugmentPipeline":
        if d is None:
            return cls()
        try:
            return cls(tuple(AugmentOp(**op) for op in d.get("ops", [])))
        except TypeError as exc:
            raise ConfigurationError(f"malformed augmentation op: {exc}") from None

    def to_dict(self) -> dict:
        return {"ops": [op.to_dict() for op in self.ops]}


def default_pipeline() -> AugmentPipeline:
    return AugmentPipeline(
        (
            AugmentOp("pad_edges", 0.3),
            AugmentOp("rotate", 0.3),
            AugmentOp("shear", 0.3),
            AugmentOp("morph_dilate", 0.1),
            AugmentOp("morph_erode", 0.1),
            AugmentOp("random_lines", 0.15),
            AugmentOp("gaussian_noise", 0.3),
            AugmentOp("speckle", 0.15),
            AugmentOp("salt_pepper", 0.2),
        )
    )


def apply(pipeline: AugmentPipeline, image: np.ndarray, sample_seed) -> np.ndarray:
    """Run every op in order; ``(pipeline, image, sample_seed)`` fixes the output bytes."""
    rng = np.random.default_rng(sample_seed)
    out = np.asarray(image, dtype=np.uint8)
    for op in pipeline.ops:
        # draw the firing decision unconditionally so later ops see a stable stream
        fire = rng.random() < op.probability
        if fire:
            out = _APPLY[op.kind](out, op, rng)
    return out


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return _to_u8(image + rng.normal(0.0, sigma, image.shape))


def salt_pepper(image: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    out = image.copy()
    hit = rng.random(image.shape) < density
    salt = rng.random(image.shape) < 0.5
    out[hit & salt] = 255
    out[hit & ~salt] = 0
    return out


def speckle(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = image.astype(np.float64)
    return _to_u8(x + x * rng.normal(0.0, sigma, image.shape))


def random_lines(image: np.ndarray, count: int, thickness: int, intensity: int, rng) -> np.ndarray:
    """Draw straight strokes between random points on the left and right edges."""
    h, w = image.shape
    out = image.copy()
    cols = np.arange(w)
    for _ in range(count):
        y0, y1 = rng.uniform(0, h - 1, size=2)
        ys = np.rint(y0 + (y1 - y0) * cols / max(w - 1, 1)).astype(int)
        for dy in range(thickness):
            rows = np.clip(ys + dy, 0, h - 1)
            out[rows, cols] = np.minimum(out[rows, cols], intensity)
    return out


def pad_edges(image: np.ndarray, top: int, bottom: int, left: int, right: int, fill: int = FILL) -> np.ndarray:
    """Grow the canvas by the given margins; the original sits at offset (top, left)."""
    if min(top, bottom, left, right) < 0:
        raise ConfigurationError("pads must be >= 0")
    return np.pad(image, ((top, bottom), (left, right)), mode="constant", constant_values=fill)


def background(image: np.ndarray) -> int:
    """Paper tone estimated as the median of the border pixels."""
    if image.size == 0:
        return FILL
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    return int(np.median(border))


def _affine(image: np.ndarray, matrix: np.ndarray, fill) -> np.ndarray:
    """Resample with ``matrix`` mapping output (row, col) about the centre to input coordinates."""
    h, w = image.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    fill = background(image) if fill is None else fill
    out = ndimage.affine_transform(image.astype(np.float64), matrix, offset=offset, order=1, mode="constant", cval=fill)
    return _to_u8(out)


def rotate(image: np.ndarray, degrees: float, fill: int | None = None) -> np.ndarray:
    """Rotate about the centre; revealed pixels take ``fill`` (default: the image's paper tone)."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    # output->input map for a counter-clockwise rotation in (row, col) coordinates
    return _affine(image, np.array([[c, -s], [s, c]]), fill)


def shear(image: np.ndarray, factor: float, fill: int | None = None) -> np.ndarray:
    """Horizontal shear: content at row offset dy moves right by ``factor * -dy``."""
    return _affine(image, np.array([[1.0, 0.0], [factor, 1.0]]), fill)


def morph_dilate(image: np.ndarray, size: int) -> np.ndarray:
    """Thicken dark strokes (grey erosion of a light-background image)."""
    return ndimage.grey_erosion(image, size=(size, size))


def morph_erode(image: np.ndarray, size: int) -> np.ndarray:
    """Thin dark strokes."""
    return ndimage.grey_dilation(image, size=(size, size))


def _pad_random(image, op, rng):
    # two to four edges get padding
    n_edges = int(rng.integers(2, 5))
    edges = rng.permutation(4)[:n_edges]
    pads = [0, 0, 0, 0]
    for e in edges:
        pads[e] = op.draw("pad", rng, integer=True)
    return pad_edges(image, *pads, fill=background(image))


_APPLY = {
    "gaussian_noise": lambda im, op, rng: gaussian_noise(im, op.draw("sigma", rng), rng),
    "salt_pepper": lambda im, op, rng: salt_pepper(im, op.draw("density", rng), rng),
    "speckle": lambda im, op, rng: speckle(im, op.draw("sigma", rng), rng),
    "random_lines": lambda im, op, rng: random_lines(
        im,
        op.draw("count", rng, integer=True),
        op.draw("thickness", rng, integer=True),
        op.draw("intensity", rng, integer=True),
        rng,
    ),
    "pad_edges": _pad_random,
    "rotate": lambda im, op, rng: rotate(im, op.draw("degrees", rng)),
    "shear": lambda im, op, rng: shear(im, op.draw("factor", rng)),
    "morph_dilate": lambda im, op, rng: morph_dilate(im, op.draw("size", rng, integer=True)),
    "morph_erode": lambda im, op, rng: morph_erode(im, op.draw("size", rng, integer=True)),
}
