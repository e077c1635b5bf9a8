"""Seeded synthetic machine-printed text images."""

from .atlas import GlyphAtlas, Style, default_atlas, render, sample_style
from .generate import (
    DEFAULT_STYLES,
    GeneratorConfig,
    ManifestRecord,
    generate_dataset,
    make_sample,
    num_workers,
    read_manifest,
    write_manifest,
)
from .templates import ALNUM_TEMPLATES, DEFAULT_TEMPLATES, PatternTemplate, check_templates, sample_text

__all__ = [
    "ALNUM_TEMPLATES",
    "DEFAULT_STYLES",
    "DEFAULT_TEMPLATES",
    "GeneratorConfig",
    "GlyphAtlas",
    "ManifestRecord",
    "PatternTemplate",
    "Style",
    "check_templates",
    "default_atlas",
    "generate_dataset",
    "make_sample",
    "num_workers",
    "read_manifest",
    "render",
    "sample_style",
    "sample_text",
    "write_manifest",
]
