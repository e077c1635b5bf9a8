"""Dataset generation and the TSV manifest format."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ctc import Vocabulary
from ..errors import ConfigurationError, DataError
from ..images import INPUT_HEIGHT, write_pgm
from .atlas import default_atlas, render, sample_style
from .templates import DEFAULT_TEMPLATES, PatternTemplate, check_templates, sample_text

DEFAULT_STYLES = {"bold": 0.3, "italic": 0.3, "underline": 0.1, "wide": 0.4}
MANIFEST_NAME = "manifest.tsv"


@dataclass
class GeneratorConfig:
    templates: tuple = DEFAULT_TEMPLATES
    styles: dict = field(default_factory=lambda: dict(DEFAULT_STYLES))
    height: int = INPUT_HEIGHT
    size: int = 100
    seed: int = 0
    output_dir: str = "data"
    vocab: str = "printed"

    def validate(self) -> "GeneratorConfig":
        if self.size < 1:
            raise ConfigurationError("dataset size must be >= 1")
        for k, p in self.styles.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"style probability {k}={p} outside [0, 1]")
        unknown = set(self.styles) - set(DEFAULT_STYLES)
        if unknown:
            raise ConfigurationError(f"unknown style keys {sorted(unknown)}")
        vocab = Vocabulary.named(self.vocab)
        check_templates(self.templates, vocab)
        atlas = default_atlas()
        missing = set(vocab.chars) - set(atlas.chars)
        if missing:
            raise ConfigurationError(f"no glyphs for vocabulary characters {sorted(missing)}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {"templates", "styles", "height", "size", "seed", "output_dir", "vocab"}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown generator config keys {sorted(extra)}")
        d = dict(d)
        if "templates" in d:
            try:
                d["templates"] = tuple(PatternTemplate(**t) for t in d["templates"])
            except TypeError as exc:
                raise ConfigurationError(f"malformed template entry: {exc}") from None
        if "styles" in d:
            d["styles"] = {**DEFAULT_STYLES, **d["styles"]}
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "templates": [{"name": t.name, "pattern": t.pattern, "weight": t.weight} for t in self.templates],
            "styles": self.styles,
            "height": self.height,
            "size": self.size,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "vocab": self.vocab,
        }


def make_sample(config: GeneratorConfig, index: int) -> tuple[str, np.ndarray]:
    """Sample ``index`` depends only on ``(seed, index)``, so sharding cannot change it."""
    rng = np.random.default_rng([config.seed, index])
    text = sample_text(config.templates, rng)
    style = sample_style(config.styles, rng)
    return text, render(text, default_atlas(), style, config.height)


def _write_range(config: GeneratorConfig, start: int, stop: int) -> list[tuple[str, str]]:
    out_dir = Path(config.output_dir)
    rows = []
    for i in range(start, stop):
        text, image = make_sample(config, i)
        rel = f"images/{i:06d}.pgm"
        write_pgm(out_dir / rel, image)
        rows.append((rel, text))
    return rows


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("EASTER_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def generate_dataset(config: GeneratorConfig, workers: int | None = None) -> Path:
    """Write ``config.size`` PGM images and a manifest; return the manifest path."""
    config.validate()
    out_dir = Path(config.output_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from None
    workers = workers or num_workers()
    if workers == 1 or config.size < 2 * workers:
        rows = _write_range(config, 0, config.size)
    else:
        bounds = np.linspace(0, config.size, workers + 1).astype(int)
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_write_range, [config] * workers, bounds[:-1], bounds[1:])
            rows = [r for part in parts for r in part]
    path = out_dir / MANIFEST_NAME
    write_manifest(path, rows)
    return path


def write_manifest(path, rows) -> None:
    lines = []
    for rel, text in rows:
        if "\t" in text or "\n" in text:
            raise DataError(f"transcript for {rel} contains a tab or newline")
        lines.append(f"{rel}\t{text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    text: str

    @property
    def sample_id(self) -> str:
        return str(self.path)


def read_manifest(path) -> list[ManifestRecord]:
    """Parse ``relative_path<TAB>transcript`` lines; paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    base = path.parent
    out = []
    for n, line in enumerate(lines, 1):
        if not line:
            continue
        rel, sep, text = line.partition("\t")
        if not sep:
            raise DataError(f"{path}:{n}: expected 'path<TAB>transcript'")
        out.append(ManifestRecord((base / rel).resolve(), text))
    return out
