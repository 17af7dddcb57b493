"""Synthetic referring-segmentation scenes with a small compositional
expression grammar, plus manifest/mask IO for datasets on disk.

Scenes are colored shapes on an 8x8 cell grid (8 px per cell by default).
Expressions combine attributes ("red square"), superlatives ("leftmost
circle"), and spatial relations ("square left of the blue circle"), padded
with semantics-free filler words to hit a target length. Every emitted
expression is checked by brute force to denote exactly one object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .language import MAX_TOKENS

CELL = 8

SHAPES = ("square", "circle", "triangle")
GENERIC_SHAPE = "shape"  # wildcard noun matching any shape

COLORS = {
    "red": (220, 50, 50),
    "green": (60, 190, 70),
    "blue": (60, 90, 220),
    "yellow": (230, 220, 60),
}

SIZES = {"small": 2, "large": 3}  # extent in cells

BACKGROUND = (0, 0, 0)

SPATIAL_SUPERLATIVES = ("leftmost", "rightmost", "topmost", "bottommost")
SIZE_SUPERLATIVES = ("largest", "smallest")
RELATIONS = ("left", "right", "above", "below")

# Words that carry location information; --no-spatial-words must exclude all.
SPATIAL_LEXICON = frozenset(SPATIAL_SUPERLATIVES) | frozenset(RELATIONS)

FILLER_PREFIXES = ((), ("the",), ("find", "the"), ("please", "find", "the"), ("now", "find", "the"))
FILLER_CHUNKS = (
    ("in", "the", "image"),
    ("in", "this", "picture"),
    ("in", "the", "scene"),
    ("shown", "here"),
    ("please",),
    ("now",),
)


class GenerationError(RuntimeError):
    """The generator could not satisfy the configuration within its retry budget."""


class ManifestError(ValueError):
    """A manifest record failed to load; the message names the line."""


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    row: int  # top-left cell
    col: int

    @property
    def cells(self) -> int:
        return SIZES[self.size]

    @property
    def center(self) -> tuple:
        # (x, y) in pixels
        half = self.cells * CELL / 2.0
        return (self.col * CELL + half, self.row * CELL + half)

    def overlaps(self, other: "SceneObject") -> bool:
        return not (
            self.row + self.cells <= other.row
            or other.row + other.cells <= self.row
            or self.col + self.cells <= other.col
            or other.col + other.cells <= self.col
        )

    def pixel_mask(self, canvas: int) -> np.ndarray:
        mask = np.zeros((canvas, canvas), dtype=bool)
        x0, y0 = self.col * CELL, self.row * CELL
        extent = self.cells * CELL
        ys, xs = np.mgrid[0:extent, 0:extent]
        px, py = xs + 0.5, ys + 0.5  # pixel centers inside the box
        if self.shape == "square":
            inside = np.ones((extent, extent), dtype=bool)
        elif self.shape == "circle":
            r = extent / 2.0
            inside = (px - r) ** 2 + (py - r) ** 2 <= r * r
        elif self.shape == "triangle":
            # Apex at the top-center, base along the bottom edge.
            half_width = (py / extent) * (extent / 2.0)
            inside = np.abs(px - extent / 2.0) <= half_width
        else:
            raise ValueError(f"unknown shape {self.shape!r}")
        mask[y0 : y0 + extent, x0 : x0 + extent] = inside
        return mask


@dataclass(frozen=True)
class Scene:
    canvas: int
    objects: tuple

    def render(self) -> np.ndarray:
        image = np.empty((self.canvas, self.canvas, 3), dtype=np.uint8)
        image[:, :] = BACKGROUND
        for obj in self.objects:
            image[obj.pixel_mask(self.canvas)] = COLORS[obj.color]
        return image

    def masks(self) -> list:
        return [obj.pixel_mask(self.canvas) for obj in self.objects]


# ---------------------------------------------------------------------------
# expression grammar and brute-force semantics


@dataclass(frozen=True)
class NounPhrase:
    shape: str  # a concrete shape or the generic noun
    color: str = None
    size: str = None

    def words(self) -> tuple:
        out = []
        if self.size:
            out.append(self.size)
        if self.color:
            out.append(self.color)
        out.append(self.shape)
        return tuple(out)

    def matches(self, obj: SceneObject) -> bool:
        if self.shape != GENERIC_SHAPE and obj.shape != self.shape:
            return False
        if self.color and obj.color != self.color:
            return False
        if self.size and obj.size != self.size:
            return False
        return True


@dataclass(frozen=True)
class Expression:
    """Core structure: a head noun phrase plus at most one qualifier."""

    head: NounPhrase
    superlative: str = None
    relation: tuple = None  # (relation word, anchor NounPhrase)

    def core_words(self) -> tuple:
        words = []
        if self.superlative:
            words.append(self.superlative)
        words.extend(self.head.words())
        if self.relation:
            rel, anchor = self.relation
            words.extend((rel, "of", "the"))
            words.extend(anchor.words())
        return tuple(words)

    def denote(self, scene: Scene):
        """The set of object indices the expression refers to, evaluated by
        brute force; None when the expression is ill-formed for the scene
        (ambiguous anchor or tied superlative)."""
        objs = scene.objects
        matches = {i for i, o in enumerate(objs) if self.head.matches(o)}
        if self.relation:
            rel, anchor_np = self.relation
            anchors = [i for i, o in enumerate(objs) if anchor_np.matches(o)]
            if len(anchors) != 1:
                return None
            ax, ay = objs[anchors[0]].center
            if rel == "left":
                matches = {i for i in matches if objs[i].center[0] < ax}
            elif rel == "right":
                matches = {i for i in matches if objs[i].center[0] > ax}
            elif rel == "above":
                matches = {i for i in matches if objs[i].center[1] < ay}
            elif rel == "below":
                matches = {i for i in matches if objs[i].center[1] > ay}
            else:
                raise ValueError(f"unknown relation {rel!r}")
        if self.superlative:
            if not matches:
                return set()
            sup = self.superlative
            if sup in ("leftmost", "rightmost"):
                key = {i: objs[i].center[0] for i in matches}
            elif sup in ("topmost", "bottommost"):
                key = {i: objs[i].center[1] for i in matches}
            elif sup in ("largest", "smallest"):
                key = {i: objs[i].cells for i in matches}
            else:
                raise ValueError(f"unknown superlative {sup!r}")
            pick = max if sup in ("rightmost", "bottommost", "largest") else min
            best = pick(key.values())
            winners = {i for i, v in key.items() if v == best}
            if len(winners) != 1:
                return None  # tie: ambiguous
            matches = winners
        return matches


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenConfig:
    num_samples: int
    objects: tuple = (2, 4)  # inclusive range of objects per scene
    length_range: tuple = (2, 14)  # inclusive target token lengths
    spatial_words: bool = True
    canvas: int = 64
    train_frac: float = 0.8
    val_frac: float = 0.0
    max_attempts: int = 300

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if self.canvas % CELL:
            raise ValueError(f"canvas must be divisible by {CELL}")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects range {self.objects}")
        if hi > 1 and len(SHAPES) + len(COLORS) + len(SIZES) < 2:
            raise ValueError("need at least 2 attribute dimensions for multi-object scenes")
        tlo, thi = self.length_range
        if not 1 <= tlo <= thi <= MAX_TOKENS:
            raise ValueError(f"length range {self.length_range} outside [1, {MAX_TOKENS}]")
        if not 0.0 <= self.train_frac + self.val_frac <= 1.0:
            raise ValueError("train_frac + val_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "objects": list(self.objects),
            "length_range": list(self.length_range),
            "spatial_words": self.spatial_words,
            "canvas": self.canvas,
            "train_frac": self.train_frac,
            "val_frac": self.val_frac,
        }


@dataclass
class GeneratedSample:
    scene: Scene
    target: int
    expression: Expression
    words: tuple
    split: str = "train"

    @property
    def expression_string(self) -> str:
        return " ".join(self.words)

    def to_sample(self) -> "SegmentationSample":
        return SegmentationSample(
            image=self.scene.render().astype(np.float64) / 255.0,
            expression=self.expression_string,
            mask=self.scene.masks()[self.target],
            split=self.split,
            target_id=self.target,
        )


@dataclass
class SegmentationSample:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    expression: str
    mask: np.ndarray  # (H, W) bool
    split: str = "train"
    target_id: int = None


def _sample_scene(rng: np.random.Generator, config: GenConfig):
    lo, hi = config.objects
    count = int(rng.integers(lo, hi + 1))
    grid = config.canvas // CELL
    objects = []
    for _ in range(count):
        for _ in range(40):
            size = ("small", "large")[int(rng.integers(2))]
            k = SIZES[size]
            candidate = SceneObject(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=list(COLORS)[int(rng.integers(len(COLORS)))],
                size=size,
                row=int(rng.integers(grid - k + 1)),
                col=int(rng.integers(grid - k + 1)),
            )
            if all(not candidate.overlaps(o) for o in objects):
                objects.append(candidate)
                break
        else:
            return None  # could not place without overlap; caller retries
    return Scene(canvas=config.canvas, objects=tuple(objects))


def _noun_phrases(obj: SceneObject):
    for shape in (obj.shape, GENERIC_SHAPE):
        for color in (None, obj.color):
            for size in (None, obj.size):
                yield NounPhrase(shape=shape, color=color, size=size)


def _candidate_expressions(scene: Scene, target: int, config: GenConfig):
    """Every grammar production that uniquely denotes the target."""
    objs = scene.objects
    out = []
    superlatives = SPATIAL_SUPERLATIVES + SIZE_SUPERLATIVES if config.spatial_words else SIZE_SUPERLATIVES
    for np_ in _noun_phrases(objs[target]):
        plain = Expression(head=np_)
        if plain.denote(scene) == {target}:
            out.append(plain)
        for sup in superlatives:
            expr = Expression(head=np_, superlative=sup)
            if expr.denote(scene) == {target}:
                out.append(expr)
        if config.spatial_words:
            for anchor_idx, anchor in enumerate(objs):
                if anchor_idx == target:
                    continue
                for anchor_np in _noun_phrases(anchor):
                    if {i for i, o in enumerate(objs) if anchor_np.matches(o)} != {anchor_idx}:
                        continue
                    for rel in RELATIONS:
                        expr = Expression(head=np_, relation=(rel, anchor_np))
                        if expr.denote(scene) == {target}:
                            out.append(expr)
    return out


def _pad_words(core: tuple, target_len: int, rng: np.random.Generator) -> tuple:
    need = target_len - len(core)
    prefixes = [p for p in FILLER_PREFIXES if len(p) <= need]
    prefix = prefixes[int(rng.integers(len(prefixes)))]
    need -= len(prefix)
    suffix = []
    while need > 0:
        chunks = [c for c in FILLER_CHUNKS if len(c) <= need]
        chunk = chunks[int(rng.integers(len(chunks)))]
        suffix.extend(chunk)
        need -= len(chunk)
    return prefix + core + tuple(suffix)


def _generate_one(seed: int, index: int, config: GenConfig) -> GeneratedSample:
    rng = np.random.default_rng([seed, index])
    lo, hi = config.length_range
    for _ in range(config.max_attempts):
        scene = _sample_scene(rng, config)
        if scene is None:
            continue
        target = int(rng.integers(len(scene.objects)))
        target_len = int(rng.integers(lo, hi + 1))
        candidates = [e for e in _candidate_expressions(scene, target, config) if len(e.core_words()) <= target_len]
        if not candidates:
            continue
        # Favor richer cores so long sentences are semantically long, not
        # just padded short ones.
        weights = np.array([len(e.core_words()) ** 2 for e in candidates], dtype=np.float64)
        choice = int(rng.choice(len(candidates), p=weights / weights.sum()))
        expr = candidates[choice]
        words = _pad_words(expr.core_words(), target_len, rng)
        return GeneratedSample(scene=scene, target=target, expression=expr, words=words)
    raise GenerationError(f"sample {index}: no valid scene/expression in {config.max_attempts} attempts")


def generate_synthetic(seed: int, config: GenConfig) -> list:
    """Deterministic corpus: (seed, config) fixes every byte.

    Split tags are assigned by position: the first floor(n * train_frac)
    samples are train, the next floor(n * val_frac) are val, the rest test.
    """
    samples = [_generate_one(seed, i, config) for i in range(config.num_samples)]
    n = config.num_samples
    n_train = int(n * config.train_frac)
    n_val = int(n * config.val_frac)
    for i, s in enumerate(samples):
        s.split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return samples


# ---------------------------------------------------------------------------
# dataset IO


def write_dataset(samples, out_dir) -> Path:
    """Write images (PPM P6), masks (PGM P5, foreground 255), and a
    JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            image_rel = f"images/{i:05d}.ppm"
            mask_rel = f"masks/{i:05d}.pgm"
            netpbm.write_ppm(out_dir / image_rel, s.scene.render())
            netpbm.write_pgm(out_dir / mask_rel, s.scene.masks()[s.target].astype(np.uint8) * 255)
            record = {
                "image": image_rel,
                "expr": s.expression_string,
                "mask": mask_rel,
                "split": s.split,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list:
    """Load a JSON-lines manifest into samples with decoded images/masks.

    Masks are binarized at 128. Any per-record failure raises ManifestError
    naming the offending line.
    """
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                image_path = base / record["image"]
                mask_path = base / record["mask"]
                expr = record["expr"]
                split = record.get("split", "train")
                if not isinstance(expr, str) or not expr.strip():
                    raise ValueError("empty expression")
                image = netpbm.read_ppm(image_path).astype(np.float64) / 255.0
                mask = netpbm.read_pgm(mask_path) >= 128
                if image.shape[:2] != mask.shape:
                    raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} extents differ")
            except ManifestError:
                raise
            except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            samples.append(SegmentationSample(image=image, expression=expr, mask=mask, split=split))
    return samples


def split_samples(samples) -> dict:
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        out.setdefault(s.split, []).append(s)
    return out


def length_histogram(samples) -> dict:
    counts = {}
    for s in samples:
        n = len(s.expression.split()) if isinstance(s.expression, str) else len(s.words)
        counts[n] = counts.get(n, 0) + 1
    return dict(sorted(counts.items()))
