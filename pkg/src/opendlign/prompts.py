"""Depth-specific text prompt generation and pooling of encoded prompt
features into per-label classifier directions.

The shipped template file holds 80 prompt templates (one per line, "{}" as
the label slot) that weave depth-domain keywords into classic image-prompt
phrasing, steering a text encoder toward geometry and contours rather than
color or texture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingMatrix, normalize_rows

N_TEMPLATES = 80
DEFAULT_KEYWORDS = ("depth map", "raytraced image", "silhouette of")


class PromptError(Exception):
    pass


@dataclass
class PromptSet:
    """Exactly 80 one-slot templates plus the keyword vocabulary woven into
    them."""

    base_templates: list[str]
    depth_keywords: list[str] = field(default_factory=lambda: list(DEFAULT_KEYWORDS))

    def __post_init__(self):
        if len(self.base_templates) != N_TEMPLATES:
            raise PromptError(
                f"expected {N_TEMPLATES} templates, got {len(self.base_templates)}")
        for t in self.base_templates:
            if t.count("{}") != 1:
                raise PromptError(f"template needs exactly one '{{}}' slot: {t!r}")
        if len(set(self.base_templates)) != N_TEMPLATES:
            raise PromptError("templates must be distinct")
        if not self.depth_keywords:
            raise PromptError("keyword list must be non-empty")
        if len(set(self.depth_keywords)) != len(self.depth_keywords):
            raise PromptError("keywords must be unique")

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptSet":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls(base_templates=lines)


def default_prompt_set() -> PromptSet:
    text = resources.files("opendlign").joinpath("data/templates.txt").read_text()
    return PromptSet(base_templates=[ln for ln in text.splitlines() if ln.strip()])


def generate_prompts(label: str, ps: PromptSet | None = None) -> list[str]:
    """Render all 80 templates with the label, in template order."""
    if not label:
        raise PromptError("label must be non-empty")
    if ps is None:
        ps = default_prompt_set()
    return [t.format(label) for t in ps.base_templates]


def prompts_for_labels(labels: list[str], ps: PromptSet | None = None) -> dict[str, list[str]]:
    if ps is None:
        ps = default_prompt_set()
    return {label: generate_prompts(label, ps) for label in labels}


def export_prompts_json(labels: list[str], out_path: str | Path,
                        ps: PromptSet | None = None) -> dict[str, list[str]]:
    doc = prompts_for_labels(labels, ps)
    Path(out_path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


@dataclass
class LabelTextFeature:
    """Classifier direction for one label.

    `vector` is the re-normalized mean of the 80 normalized prompt encodings
    (unit norm; classification consumes this one); `pooled_mean` is the plain
    mean before re-normalization, kept for reference.
    """

    label: str
    vector: np.ndarray
    pooled_mean: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.vector) - 1.0) > 1e-5:
            raise PromptError(f"direction for {self.label!r} is not unit norm")


def pool_text_features(encoded: EmbeddingMatrix, label: str) -> LabelTextFeature:
    """Merge 80 encoded prompt rows into one unit classifier direction:
    L2-normalize each row, average, then L2-normalize the mean."""
    if encoded.rows != N_TEMPLATES:
        raise PromptError(
            f"expected {N_TEMPLATES} encoded prompts for {label!r}, got {encoded.rows}")
    mean = normalize_rows(encoded.data).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise PromptError(f"prompt encodings for {label!r} average to the zero vector")
    return LabelTextFeature(label=label, vector=mean / norm, pooled_mean=mean)
