"""Synthetic shapes-world grounding corpus.

Renders colored geometric shapes on a dark noisy background and emits gold
grounded records whose captions ("a red circle and two blue squares") parse
back to their own boxes with the rule-based chunker. Held-out (color, shape)
pairs never appear in training images or captions; they stand in for rare
categories when probing zero-shot compositional transfer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import iou_matrix
from .errors import SpecInfeasible
from .records import Annotation, GroundedRecord

COLOR_RGB: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.16, 0.16),
    "green": (0.16, 0.78, 0.24),
    "blue": (0.20, 0.35, 0.90),
    "yellow": (0.92, 0.86, 0.20),
    "purple": (0.63, 0.24, 0.78),
    "orange": (0.94, 0.55, 0.12),
    "cyan": (0.16, 0.80, 0.80),
    "magenta": (0.86, 0.20, 0.70),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.55, 0.55, 0.55),
}

_COUNT_WORDS = {1: "a", 2: "two", 3: "three", 4: "four", 5: "five"}


@dataclass(frozen=True)
class ShapesWorldSpec:
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    held_out_pairs: tuple[tuple[str, str], ...] = (
        ("green", "circle"),
        ("blue", "square"),
        ("red", "triangle"),
        ("yellow", "triangle"),
    )
    objects_per_image: tuple[int, int] = (1, 3)
    image_size: int = 64
    size_range: tuple[int, int] = (14, 28)
    max_object_iou: float = 0.05
    noise_std: float = 0.02
    background: float = 0.08
    style: str = "filled"  # or "hollow"

    def __post_init__(self) -> None:
        for color, shape in self.held_out_pairs:
            if color not in self.colors or shape not in self.shapes:
                raise SpecInfeasible(f"held-out pair ({color}, {shape}) outside the vocabulary")
        unknown = [c for c in self.colors if c not in COLOR_RGB]
        if unknown:
            raise SpecInfeasible(f"no RGB value for colors {unknown}")
        if not self.train_pairs:
            raise SpecInfeasible("every (color, shape) pair is held out")
        if self.style not in ("filled", "hollow"):
            raise SpecInfeasible(f"unknown style {self.style!r}")

    @property
    def all_pairs(self) -> list[tuple[str, str]]:
        return [(c, s) for c in self.colors for s in self.shapes]

    @property
    def train_pairs(self) -> list[tuple[str, str]]:
        held = set(self.held_out_pairs)
        return [p for p in self.all_pairs if p not in held]

    def class_name(self, pair: tuple[str, str]) -> str:
        return f"{pair[0]} {pair[1]}"

    @property
    def class_names(self) -> list[str]:
        return [self.class_name(p) for p in self.all_pairs]

    @property
    def train_class_names(self) -> list[str]:
        return [self.class_name(p) for p in self.train_pairs]

    @property
    def held_out_class_names(self) -> list[str]:
        return [self.class_name(p) for p in self.held_out_pairs]


def _shape_mask(shape: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "triangle":
        top = cy - half
        return (yy >= top) & (yy <= cy + half) & (np.abs(xx - cx) <= (yy - top) / 2.0)
    if shape == "ellipse":
        return ((xx - cx) / half) ** 2 + ((yy - cy) / (0.55 * half)) ** 2 <= 1.0
    raise SpecInfeasible(f"no renderer for shape {shape!r}")


def _object_mask(spec: ShapesWorldSpec, shape: str, cx: float, cy: float, half: float) -> np.ndarray:
    mask = _shape_mask(shape, spec.image_size, cx, cy, half)
    if spec.style == "hollow" and half > 4:
        mask &= ~_shape_mask(shape, spec.image_size, cx, cy, half - 3.0)
    return mask


@dataclass
class PlacedObject:
    color: str
    shape: str
    mask: np.ndarray
    box: tuple[float, float, float, float]


def _place_objects(
    spec: ShapesWorldSpec, pairs: Sequence[tuple[str, str]], rng: np.random.Generator
) -> list[PlacedObject]:
    placed: list[PlacedObject] = []
    for color, shape in pairs:
        for _ in range(60):
            half = rng.uniform(spec.size_range[0] / 2.0, spec.size_range[1] / 2.0)
            margin = half + 1.5
            cx = rng.uniform(margin, spec.image_size - margin)
            cy = rng.uniform(margin, spec.image_size - margin)
            mask = _object_mask(spec, shape, cx, cy, half)
            if not mask.any():
                continue
            ys, xs = np.nonzero(_shape_mask(shape, spec.image_size, cx, cy, half))
            box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            if placed:
                ious = iou_matrix(np.array([box]), np.array([p.box for p in placed]))
                if ious.max() > spec.max_object_iou:
                    continue
            placed.append(PlacedObject(color, shape, mask, box))
            break
    return placed


def render_image(
    spec: ShapesWorldSpec, objects: Sequence[PlacedObject], rng: np.random.Generator
) -> np.ndarray:
    size = spec.image_size
    image = np.full((size, size, 3), spec.background, dtype=np.float64)
    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=(size, size, 3))
    for obj in objects:
        rgb = np.array(COLOR_RGB[obj.color]) + rng.uniform(-0.04, 0.04, size=3)
        image[obj.mask] = rgb
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _caption_for(
    spec: ShapesWorldSpec, objects: Sequence[PlacedObject], rng: np.random.Generator
) -> tuple[str, list[Annotation]]:
    groups: dict[tuple[str, str], list[PlacedObject]] = {}
    for obj in objects:
        groups.setdefault((obj.color, obj.shape), []).append(obj)
    keys = list(groups)
    rng.shuffle(keys)
    pieces: list[str] = []
    annotations: list[Annotation] = []
    cursor = 0
    for i, key in enumerate(keys):
        color, shape = key
        count = len(groups[key])
        noun = shape if count == 1 else shape + "s"
        phrase = f"{_COUNT_WORDS[count]} {color} {noun}"
        if i > 0:
            cursor += len(" and ")
        annotations.append(
            Annotation(
                char_span=(cursor, cursor + len(phrase)),
                class_name=spec.class_name(key),
                boxes=[obj.box for obj in groups[key]],
            )
        )
        pieces.append(phrase)
        cursor += len(phrase)
    return " and ".join(pieces), annotations


def generate_records(
    spec: ShapesWorldSpec,
    seed: int,
    count: int,
    id_prefix: str,
    pair_pool: Sequence[tuple[str, str]],
    force_first_pair: Sequence[tuple[str, str]] | None = None,
    bind_distractors: bool = False,
) -> list[GroundedRecord]:
    """Generate `count` gold records with object classes drawn from `pair_pool`.

    With `bind_distractors`, the first object additionally gets one same-color
    and one same-shape companion from the training pairs, making half-matching
    detections distinguishable from true compositional matches.
    """
    rng = np.random.default_rng(seed)
    pool = list(pair_pool)
    records: list[GroundedRecord] = []
    for i in range(count):
        lo, hi = spec.objects_per_image
        n_objects = int(rng.integers(lo, hi + 1))
        if force_first_pair is not None:
            first = force_first_pair[int(rng.integers(0, len(force_first_pair)))]
        else:
            first = pool[int(rng.integers(0, len(pool)))]
        pairs = [first]
        if bind_distractors:
            color, shape = first
            same_color = [p for p in spec.train_pairs if p[0] == color and p != first]
            same_shape = [p for p in spec.train_pairs if p[1] == shape and p != first]
            if same_color:
                pairs.append(same_color[int(rng.integers(0, len(same_color)))])
            if same_shape:
                pairs.append(same_shape[int(rng.integers(0, len(same_shape)))])
        else:
            for _ in range(n_objects - 1):
                pairs.append(pool[int(rng.integers(0, len(pool)))])
        objects = _place_objects(spec, pairs, rng)
        image = render_image(spec, objects, rng)
        caption, annotations = _caption_for(spec, objects, rng)
        record = GroundedRecord(
            image_id=f"{id_prefix}_{i:05d}",
            caption=caption,
            annotations=annotations,
            provenance="gold",
            image=image,
        )
        record.validate()
        records.append(record)
    return records


def generate_shapes_world(
    spec: ShapesWorldSpec,
    seed: int,
    counts: dict[str, int] | None = None,
) -> dict[str, list[GroundedRecord]]:
    """Standard three-way corpus: train covers only training pairs, val and
    test draw from the full vocabulary (held-out pairs included)."""
    counts = counts or {"train": 2000, "val": 200, "test": 200}
    splits: dict[str, list[GroundedRecord]] = {}
    for name, pool in (
        ("train", spec.train_pairs),
        ("val", spec.all_pairs),
        ("test", spec.all_pairs),
    ):
        if name in counts and counts[name] > 0:
            splits[name] = generate_records(
                spec, seed + {"train": 0, "val": 1, "test": 2}[name], counts[name], name, pool
            )
    return splits


def generate_compositional_eval(
    spec: ShapesWorldSpec, seed: int, count: int, id_prefix: str = "comp"
) -> list[GroundedRecord]:
    """Evaluation split for held-out pairs: every image contains exactly one
    held-out object plus binding distractors sharing its color and its shape."""
    return generate_records(
        spec,
        seed,
        count,
        id_prefix,
        pair_pool=spec.all_pairs,
        force_first_pair=list(spec.held_out_pairs),
        bind_distractors=True,
    )
