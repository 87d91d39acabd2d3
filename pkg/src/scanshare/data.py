"""Fixation datasets: types, on-disk format, synthetic scenes and oracle scanpaths.

On disk a dataset is a JSON-lines fixation file (one scanpath per line with
fields ``image_id, task, target, fixations, terminated``) next to an image
directory holding ``<id>.ppm`` RGB images and optional ``<id>.seg.pgm``
label maps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError, LoadError, ValidationError

NUM_CATEGORIES = 18
FREE_VIEWING = "fv"
VISUAL_SEARCH = "vs"
CENTER = (0.5, 0.5)

# six colour families x three shape kinds = 18 categories; category c has
# hue (c-1) % 6 and kind (c-1) // 6
_HUES = np.array([
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 200, 40],
    [200, 50, 200],
    [40, 200, 210],
], dtype=np.float64)
_KIND_SHADE = (1.0, 0.6, 0.8)
_KINDS = ("square", "disk", "diamond")
BACKGROUND = np.array([118, 118, 118], dtype=np.uint8)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    target: int | None = None

    def __post_init__(self):
        if self.kind == FREE_VIEWING:
            if self.target is not None:
                raise InputError("free-viewing tasks carry no target")
        elif self.kind == VISUAL_SEARCH:
            if self.target is None or not 1 <= int(self.target) <= NUM_CATEGORIES:
                raise InputError(f"visual-search target must be in [1, {NUM_CATEGORIES}], got {self.target}")
        else:
            raise InputError(f"unknown task kind {self.kind!r}")

    @classmethod
    def free_viewing(cls) -> "TaskSpec":
        return cls(FREE_VIEWING)

    @classmethod
    def search(cls, target: int) -> "TaskSpec":
        return cls(VISUAL_SEARCH, int(target))

    @property
    def condition(self) -> str:
        """Key used for per-condition statistics (``fv`` or ``vs:<target>``)."""
        return self.kind if self.kind == FREE_VIEWING else f"vs:{self.target}"


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"fixation ({self.x}, {self.y}) outside the unit square")

    def pixel(self, width: int, height: int) -> tuple[int, int]:
        """Column/row of the pixel containing this fixation."""
        return min(int(self.x * width), width - 1), min(int(self.y * height), height - 1)


@dataclass(frozen=True)
class Scanpath:
    image_id: str
    task: TaskSpec
    fixations: tuple[Fixation, ...]
    terminated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fixations", tuple(self.fixations))
        if not self.fixations:
            raise ValidationError("a scanpath needs at least one fixation")

    def __len__(self):
        return len(self.fixations)

    def points(self) -> np.ndarray:
        return np.array([[f.x, f.y] for f in self.fixations], dtype=np.float64)


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    segmentation: np.ndarray | None = None  # [H, W] int, 0 = background
    present_targets: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValidationError(f"image {self.id}: pixels must be [3,H,W], got {self.pixels.shape}")
        if self.segmentation is not None:
            if self.segmentation.shape != self.pixels.shape[1:]:
                raise ValidationError(f"image {self.id}: segmentation shape mismatch")
            if not self.present_targets:
                labels = np.unique(self.segmentation)
                self.present_targets = frozenset(int(c) for c in labels if c != 0)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def category_hue(category: int) -> int:
    return (category - 1) % len(_HUES)


def category_kind(category: int) -> str:
    return _KINDS[(category - 1) // len(_HUES)]


def category_color(category: int) -> np.ndarray:
    rgb = _HUES[category_hue(category)] * _KIND_SHADE[(category - 1) // len(_HUES)]
    return np.round(rgb).astype(np.uint8)


def shape_mask(kind: str, radius: int, height: int, width: int, cx: int, cy: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "disk":
        return dx * dx + dy * dy <= radius * radius
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def pixel_to_unit(pixel: int, size: int) -> float:
    return (pixel + 0.5) / size


def generate_scene(seed: int, grid: tuple[int, int] = (3, 4), categories: int = 4,
                   size: tuple[int, int] = (128, 96)) -> ImageSample:
    """Deterministic scene with one uniformly coloured shape per sampled category.

    ``size`` is (width, height); both must be divisible by 32. Shapes sit in
    distinct cells of a ``grid`` = (rows, cols) layout and never overlap.
    """
    width, height = size
    rows, cols = grid
    if width % 32 or height % 32:
        raise ConfigurationError(f"image size {size} must be divisible by 32")
    if not 1 <= categories <= NUM_CATEGORIES:
        raise ConfigurationError(f"categories must be in [1, {NUM_CATEGORIES}]")
    if rows * cols < categories:
        raise ConfigurationError(f"grid {rows}x{cols} cannot hold {categories} shapes")
    cell_h, cell_w = height // rows, width // cols
    max_r = (min(cell_h, cell_w) - 6) // 2
    if max_r < 2:
        raise ConfigurationError(f"grid {rows}x{cols} too fine for a {width}x{height} image")
    rng = np.random.default_rng(seed)
    cats = rng.choice(np.arange(1, NUM_CATEGORIES + 1), size=categories, replace=False)
    cells = rng.choice(rows * cols, size=categories, replace=False)
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND
    seg = np.zeros((height, width), dtype=np.int32)
    for cat, cell in zip(cats.tolist(), cells.tolist()):
        r, c = divmod(cell, cols)
        radius = int(rng.integers(max(2, max_r // 2), max_r + 1))
        # centres land in the middle of a 4x4 block so they align with the finest feature grid
        cx = (c * cell_w + cell_w // 2) // 4 * 4 + 2
        cy = (r * cell_h + cell_h // 2) // 4 * 4 + 2
        mask = shape_mask(category_kind(cat), radius, height, width, cx, cy)
        pixels[mask] = category_color(cat)
        seg[mask] = cat
    image = pixels.transpose(2, 0, 1).astype(np.float32) / 255.0
    return ImageSample(f"scene{seed:06d}", image, seg, frozenset(int(c) for c in cats))


def scene_shapes(scene: ImageSample) -> list[dict]:
    """Recover per-shape statistics (category, centre, area, colour) from a labelled scene."""
    if scene.segmentation is None:
        raise InputError(f"image {scene.id} has no segmentation")
    shapes = []
    for cat in sorted(scene.present_targets):
        ys, xs = np.nonzero(scene.segmentation == cat)
        cy = int(round((ys.min() + ys.max()) / 2))
        cx = int(round((xs.min() + xs.max()) / 2))
        color = scene.pixels[:, cy, cx].astype(np.float64)
        shapes.append({
            "category": cat,
            "cx": cx,
            "cy": cy,
            "area": int(xs.size),
            "color": color,
            "fixation": Fixation(pixel_to_unit(cx, scene.width), pixel_to_unit(cy, scene.height)),
        })
    return shapes


def shape_salience(shape: dict, background=BACKGROUND) -> float:
    """Bottom-up salience proxy: colour distance to the background times area."""
    bg = np.asarray(background, dtype=np.float64) / 255.0
    return float(np.linalg.norm(shape["color"] - bg) * shape["area"])


def oracle_scanpath_fv(scene: ImageSample, seed: int = 0, length: int | None = None) -> Scanpath:
    """Free-viewing oracle: centre start, then shapes in decreasing salience.

    The default length visits every shape once; longer paths cycle. Ties are
    broken by category id, so ``seed`` has no influence on the result.
    """
    shapes = scene_shapes(scene)
    if length is None:
        length = 1 + len(shapes)
    if length < 1:
        raise ConfigurationError("scanpath length must be >= 1")
    ranked = sorted(shapes, key=lambda s: (-shape_salience(s), s["category"]))
    fixations = [Fixation(*CENTER)]
    i = 0
    while len(fixations) < length and ranked:
        fixations.append(ranked[i % len(ranked)]["fixation"])
        i += 1
    return Scanpath(scene.id, TaskSpec.free_viewing(), fixations, terminated=True)


def oracle_scanpath_vs(scene: ImageSample, target: int, seed: int = 0) -> Scanpath:
    """Visual-search oracle: centre, 0-2 same-colour distractors, then the target."""
    if target not in scene.present_targets:
        raise InputError(f"target {target} is not present in image {scene.id}")
    shapes = {s["category"]: s for s in scene_shapes(scene)}
    hue = category_hue(target)
    distractors = [c for c in sorted(shapes) if c != target and category_hue(c) == hue]
    rng = np.random.default_rng([seed, target])
    k = int(rng.integers(0, min(2, len(distractors)) + 1)) if distractors else 0
    chosen = rng.permutation(distractors)[:k].tolist() if k else []
    fixations = [Fixation(*CENTER)] + [shapes[c]["fixation"] for c in chosen] + [shapes[target]["fixation"]]
    return Scanpath(scene.id, TaskSpec.search(target), fixations, terminated=True)


def synthesize(seed: int, count: int, grid=(3, 4), categories: int = 4, size=(128, 96),
               fv_length: int | None = None) -> list[tuple[ImageSample, Scanpath]]:
    """Scenes plus one free-viewing and one visual-search scanpath per present category."""
    pairs = []
    for i in range(count):
        scene = generate_scene(seed * 100_003 + i, grid, categories, size)
        pairs.append((scene, oracle_scanpath_fv(scene, seed, fv_length)))
        for target in sorted(scene.present_targets):
            pairs.append((scene, oracle_scanpath_vs(scene, target, seed)))
    return pairs


# --------------------------------------------------------------------------
# file format


def scanpath_record(sp: Scanpath) -> dict:
    return {
        "image_id": sp.image_id,
        "task": sp.task.kind,
        "target": sp.task.target,
        "fixations": [[f.x, f.y] for f in sp.fixations],
        "terminated": bool(sp.terminated),
    }


def parse_record(record: dict, index: int) -> Scanpath:
    try:
        task = TaskSpec(record["task"], record.get("target") if record["task"] == VISUAL_SEARCH else None)
        raw = record["fixations"]
        for x, y in raw:
            if not (0.0 <= float(x) <= 1.0 and 0.0 <= float(y) <= 1.0):
                raise ValidationError(f"coordinate ({x}, {y}) outside [0,1]")
        fixations = [Fixation(float(x), float(y)) for x, y in raw]
        return Scanpath(str(record["image_id"]), task, fixations, bool(record.get("terminated", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"record {index}: {exc}") from exc


def read_scanpaths(fixation_file) -> list[Scanpath]:
    out = []
    with open(fixation_file, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if line.strip():
                out.append(parse_record(json.loads(line), index))
    return out


def write_scanpaths(scanpaths: Iterable[Scanpath], fixation_file) -> None:
    with open(fixation_file, "w", encoding="utf-8") as fh:
        for sp in scanpaths:
            fh.write(json.dumps(scanpath_record(sp), sort_keys=True) + "\n")


def save_image(sample: ImageSample, image_dir) -> None:
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    rgb = np.round(sample.pixels.transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(image_dir / f"{sample.id}.ppm")
    if sample.segmentation is not None:
        Image.fromarray(sample.segmentation.astype(np.uint8), "L").save(image_dir / f"{sample.id}.seg.pgm")


def load_image(image_id: str, image_dir) -> ImageSample:
    image_dir = Path(image_dir)
    path = image_dir / f"{image_id}.ppm"
    if not path.exists():
        raise LoadError(f"missing image for id {image_id!r} ({path})")
    rgb = np.asarray(Image.open(path).convert("RGB"))
    pixels = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
    seg_path = image_dir / f"{image_id}.seg.pgm"
    seg = np.asarray(Image.open(seg_path), dtype=np.int32) if seg_path.exists() else None
    return ImageSample(image_id, pixels, seg)


def save_dataset(pairs: Sequence[tuple[ImageSample, Scanpath]], fixation_file, image_dir) -> None:
    written = set()
    for sample, _ in pairs:
        if sample.id not in written:
            save_image(sample, image_dir)
            written.add(sample.id)
    Path(fixation_file).parent.mkdir(parents=True, exist_ok=True)
    write_scanpaths([sp for _, sp in pairs], fixation_file)


def load_dataset(fixation_file, image_dir) -> list[tuple[ImageSample, Scanpath]]:
    cache: dict[str, ImageSample] = {}
    pairs = []
    for sp in read_scanpaths(fixation_file):
        if sp.image_id not in cache:
            cache[sp.image_id] = load_image(sp.image_id, image_dir)
        pairs.append((cache[sp.image_id], sp))
    return pairs


def load_dataset_dir(root) -> list[tuple[ImageSample, Scanpath]]:
    root = Path(root)
    return load_dataset(root / "fixations.jsonl", root / "images")


def split_dataset(samples: Sequence[tuple[ImageSample, Scanpath]], fractions=(0.8, 0.1, 0.1),
                  seed: int = 0) -> DatasetSplit:
    """Split (image, scanpath) pairs by image id so no image crosses splits."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    ids = sorted({s.id for s, _ in samples})
    n = len(ids)
    if n < 3:
        raise ConfigurationError(f"need at least 3 images to split, got {n}")
    raw = [f * n for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    for i in sorted(range(3), key=lambda i: counts[i] - raw[i])[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    bounds = np.cumsum(counts)
    groups = [set(shuffled[:bounds[0]]), set(shuffled[bounds[0]:bounds[1]]), set(shuffled[bounds[1]:])]
    parts = [[p for p in samples if p[0].id in g] for g in groups]
    return DatasetSplit(*parts)


def group_by_image(pairs: Iterable[tuple[ImageSample, Scanpath]], kind: str | None = None):
    """[(sample, [scanpaths...])] in first-seen order, optionally filtered by task kind."""
    groups: dict[str, tuple[ImageSample, list]] = {}
    for sample, sp in pairs:
        if kind is not None and sp.task.kind != kind:
            continue
        groups.setdefault(sample.id, (sample, []))[1].append(sp)
    return list(groups.values())
