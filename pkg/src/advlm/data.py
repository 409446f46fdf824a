"""Synthetic VQA data: colored geometric shapes with templated questions.

Each image is a grid of 8x8 cells on a dark background; a sample places
one to three copies of a single shape, all in one color, in distinct
cells. Shape silhouettes, background shade, and colors are jittered so
trained decision boundaries sit close enough for small perturbations to
matter. Questions come in four templated families (color, shape name,
count, existence) with single gold answers, and generation is byte-
deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .autodiff import ContractViolation
from .models import default_vocab
from .seeding import make_rng
from .vqa import write_manifest, write_ppm

__all__ = ["SyntheticSpec", "gen_dataset", "COLOR_RGB", "COUNT_WORDS", "CELL"]

CELL = 8

COLOR_RGB = {
    "red": (0.80, 0.12, 0.12),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.12, 0.20, 0.80),
    "yellow": (0.85, 0.80, 0.10),
}

COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

QUESTION_KINDS = ("color", "shape", "count", "existence")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; palettes must stay inside the model vocabulary."""

    n_samples: int
    image_size: tuple = (32, 32, 3)
    shapes: tuple = ("circle", "square", "triangle")
    colors: tuple = ("red", "green", "blue", "yellow")
    counts: tuple = (1, 2, 3)
    question_kinds: tuple = QUESTION_KINDS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "question_kinds", tuple(self.question_kinds))
        if self.n_samples < 0:
            raise ContractViolation("n_samples must be >= 0")
        if not (self.shapes and self.colors and self.counts and self.question_kinds):
            raise ContractViolation("palettes must be non-empty")
        h, w, c = self.image_size
        if c != 3 or h % CELL or w % CELL:
            raise ContractViolation(f"image size must be [8k, 8m, 3], got {self.image_size}")
        vocab = set(default_vocab())
        needed = set(self.colors) | set(self.shapes) | {s + "s" for s in self.shapes}
        needed |= {COUNT_WORDS[c] for c in self.counts if c in COUNT_WORDS}
        needed |= {"yes", "no"}
        missing = needed - vocab
        if missing:
            raise ContractViolation(f"palette words missing from vocab: {sorted(missing)}")
        for c in self.counts:
            if c not in COUNT_WORDS or c > (h // CELL) * (w // CELL):
                raise ContractViolation(f"count {c} unsupported for this grid")
        for k in self.question_kinds:
            if k not in QUESTION_KINDS:
                raise ContractViolation(f"unknown question kind {k!r}")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise ContractViolation(f"unknown color {c!r}")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "image_size": list(self.image_size),
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "counts": list(self.counts),
            "question_kinds": list(self.question_kinds),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        kwargs = {"n_samples": int(d["n_samples"]), "seed": int(d.get("seed", 0))}
        for key in ("image_size", "shapes", "colors", "counts", "question_kinds"):
            if key in d:
                kwargs[key] = tuple(d[key])
        return cls(**kwargs)


def _shape_masks() -> dict:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    square = (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    circle = (yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 3.2**2
    triangle = (yy >= 1) & (yy <= 6) & (np.abs(xx - 3.5) <= (yy - 1) * 0.55 + 0.3)
    return {"square": square, "circle": circle, "triangle": triangle}


_MASKS = _shape_masks()


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(0, len(items)))]


def _distinct_cells(rng: np.random.Generator, n_cells: int, k: int) -> list:
    cells = list(range(n_cells))
    for i in range(k):
        j = int(rng.integers(i, n_cells))
        cells[i], cells[j] = cells[j], cells[i]
    return cells[:k]


def _render(rng: np.random.Generator, spec: SyntheticSpec, shape: str, color: str,
            cells: list) -> np.ndarray:
    h, w, _ = spec.image_size
    grid_w = w // CELL
    background = 0.04 + rng.uniform(0.0, 0.06)
    image = np.full((h, w, 3), background)
    rgb = np.clip(np.asarray(COLOR_RGB[color]) + rng.uniform(-0.06, 0.06, 3), 0.0, 1.0)
    mask = _MASKS[shape]
    for cell in cells:
        r, c = divmod(cell, grid_w)
        block = image[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL]
        block[mask] = rgb
    image += rng.uniform(-0.015, 0.015, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _question_answer(rng: np.random.Generator, spec: SyntheticSpec, shape: str,
                     color: str, count: int):
    kind = _pick(rng, spec.question_kinds)
    if kind == "color":
        return f"what color is the {shape}", color
    if kind == "shape":
        return "what shape is in the image", shape
    if kind == "count":
        return f"how many {shape}s", COUNT_WORDS[count]
    # existence: ask about the present shape half the time
    if int(rng.integers(0, 2)) == 0:
        return f"is there a {shape}", "yes"
    others = [s for s in spec.shapes if s != shape] or [shape]
    asked = _pick(rng, others)
    return f"is there a {asked}", "yes" if asked == shape else "no"


def gen_dataset(spec: SyntheticSpec, out_dir: Union[str, Path]) -> Path:
    """Render the dataset into `out_dir` and return the manifest path.

    Layout: manifest.jsonl plus images/<sample_id>.ppm. Identical specs
    produce byte-identical manifests and images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    rng = make_rng(spec.seed)
    n_cells = (spec.image_size[0] // CELL) * (spec.image_size[1] // CELL)

    rows = []
    if spec.n_samples > 0:
        (out_dir / "images").mkdir(exist_ok=True)
    for i in range(spec.n_samples):
        shape = _pick(rng, spec.shapes)
        color = _pick(rng, spec.colors)
        count = _pick(rng, spec.counts)
        cells = _distinct_cells(rng, n_cells, count)
        image = _render(rng, spec, shape, color, cells)
        question, answer = _question_answer(rng, spec, shape, color, count)
        sample_id = f"s{i:05d}"
        rel = f"images/{sample_id}.ppm"
        write_ppm(out_dir / rel, image)
        rows.append({
            "sample_id": sample_id,
            "image": rel,
            "question": question,
            "answers": [answer],
        })
    write_manifest(manifest_path, rows)
    return manifest_path
