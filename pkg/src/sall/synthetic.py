"""Procedural graded "fundus" images with controllable cross-task lesion overlap.

Each image is a radially shaded disc on a dark field with a little uniform
noise. Lesions are drawn from four primitive kinds; a task's grade recipe gives
the expected count of each kind it uses. Grade 0 never contains lesions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

HEMORRHAGE = "dot-hemorrhage"
DRUSEN = "drusen-blob"
EXUDATE = "exudate-patch"
VESSEL = "vessel-thickening"

NOISE_AMPLITUDE = 0.02
FIELD_LEVEL = 0.03
DISC_COLOR = np.array([0.80, 0.40, 0.20])
DISC_RADIUS = 0.9  # fraction of the half-width


@dataclass(frozen=True)
class LesionPrimitive:
    kind: str
    radius: tuple  # (lo, hi) pixels at 64 x 64
    opacity: tuple  # (lo, hi) blend weight toward ``color``
    color: tuple  # RGB target, each in [0, 1]

    def __post_init__(self):
        lo, hi = self.radius
        if not 0 < lo <= hi:
            raise ValueError(f"{self.kind}: bad radius range {self.radius}")
        if not 0 <= self.opacity[0] <= self.opacity[1] <= 1:
            raise ValueError(f"{self.kind}: opacity must lie in [0, 1]")
        if not all(0 <= c <= 1 for c in self.color):
            raise ValueError(f"{self.kind}: color outside [0, 1]")


PRIMITIVES = {
    HEMORRHAGE: LesionPrimitive(HEMORRHAGE, (1.0, 2.2), (0.75, 1.0), (0.30, 0.04, 0.03)),
    DRUSEN: LesionPrimitive(DRUSEN, (1.8, 3.4), (0.6, 0.9), (0.98, 0.88, 0.40)),
    EXUDATE: LesionPrimitive(EXUDATE, (0.8, 1.6), (0.75, 1.0), (1.00, 0.97, 0.62)),
    VESSEL: LesionPrimitive(VESSEL, (0.7, 1.1), (0.7, 0.95), (0.28, 0.07, 0.05)),
}


@dataclass(frozen=True)
class GradedTaskSpec:
    """A graded task: ``counts[g][s]`` is the expected number of lesions of
    ``kinds[s]`` in an image of grade ``g``. Slot 0 is the progressive kind."""

    task_id: str
    kinds: tuple
    counts: tuple
    grade_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "counts", tuple(tuple(float(c) for c in row) for row in self.counts))
        if self.K < 2:
            raise ValueError(f"task {self.task_id!r} needs at least 2 grades")
        for k in self.kinds:
            if k not in PRIMITIVES:
                raise ValueError(f"unknown lesion kind {k!r}")
        if any(len(row) != len(self.kinds) for row in self.counts):
            raise ValueError("every grade recipe needs one count per lesion kind")
        if any(c != 0 for c in self.counts[0]):
            raise ValueError("grade 0 must contain no lesions")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("expected counts must be nonnegative")
        prog = [row[0] for row in self.counts]
        if any(b < a for a, b in zip(prog, prog[1:])) or prog[-1] <= prog[0]:
            raise ValueError("the progressive lesion count must be non-decreasing and grow with grade")

    @property
    def K(self) -> int:
        return len(self.counts)

    def fingerprint(self, kinds=None) -> str:
        blob = json.dumps({"task": self.task_id, "kinds": list(kinds or self.kinds),
                           "counts": [list(r) for r in self.counts]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class OverlapSpec:
    """Fraction of a task's lesion slots taken from a partner task.

    ``round(overlap * n_slots)`` trailing slots are replaced by the partner's
    leading kinds; at 1 every slot is replaced, giving the partner's kind set.
    """

    overlap: float = 0.0
    partner_kinds: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")


def resolve_kinds(task: GradedTaskSpec, overlap: OverlapSpec) -> tuple:
    kinds = list(task.kinds)
    n = len(kinds)
    shared = int(round(overlap.overlap * n)) if overlap.partner_kinds else 0
    if shared == 0:
        return tuple(kinds)
    partner = list(overlap.partner_kinds)
    if len(partner) < shared:
        raise ValueError("partner has fewer kinds than requested shared slots")
    if shared == n:
        if len(partner) != n:
            raise ValueError("full overlap needs a partner with the same number of kinds")
        return tuple(partner)
    borrowed = [k for k in partner if k not in kinds[: n - shared]][:shared]
    return tuple(kinds[: n - shared] + borrowed)


@dataclass
class LabeledExample:
    image: np.ndarray  # [3, h, w] in [0, 1]
    task_id: str
    grade: int
    n_classes: int
    example_id: str = ""
    soft_labels: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)  # lesion kind -> bool [h, w]

    @property
    def hard_label(self) -> np.ndarray:
        y = np.zeros(self.n_classes)
        y[self.grade] = 1.0
        return y

    def lesion_mask(self, kinds=None) -> np.ndarray:
        h, w = self.image.shape[1:]
        out = np.zeros((h, w), dtype=bool)
        for k, m in self.masks.items():
            if kinds is None or k in kinds:
                out |= m
        return out


# ----------------------------------------------------------------- rendering


def background(size: int = 64) -> np.ndarray:
    """Noise-free disc-on-dark-field image, shape [3, size, size]."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c) / (DISC_RADIUS * size / 2.0)
    inside = np.clip((1.0 - r) * size / 4.0, 0.0, 1.0)  # ~2 px anti-aliased rim
    shade = 1.0 - 0.45 * np.clip(r, 0, 1) ** 2
    disc = DISC_COLOR[:, None, None] * shade[None]
    return FIELD_LEVEL + inside[None] * (disc - FIELD_LEVEL)


def _disk_alpha(size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(yy - cy, xx - cx)
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


def _segment_alpha(size, y0, x0, y1, x1, half_width):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    d = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return np.clip(half_width + 0.5 - d, 0.0, 1.0)


def _lesion_alpha(kind, size, rng):
    s = size / 64.0
    prim = PRIMITIVES[kind]
    rad = (DISC_RADIUS * size / 2.0) * 0.8 * np.sqrt(rng.random())
    ang = rng.random() * 2 * np.pi
    c = (size - 1) / 2.0
    cy, cx = c + rad * np.sin(ang), c + rad * np.cos(ang)
    radius = rng.uniform(*prim.radius) * s
    if kind == EXUDATE:
        alpha = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            oy, ox = rng.uniform(-2.5, 2.5, size=2) * s
            alpha = np.maximum(alpha, _disk_alpha(size, cy + oy, cx + ox, radius))
    elif kind == VESSEL:
        length = rng.uniform(8, 16) * s
        th = rng.random() * np.pi
        dy, dx = 0.5 * length * np.sin(th), 0.5 * length * np.cos(th)
        alpha = _segment_alpha(size, cy - dy, cx - dx, cy + dy, cx + dx, radius)
    else:
        alpha = _disk_alpha(size, cy, cx, radius)
    return alpha * rng.uniform(*prim.opacity)


def render(kinds: Sequence[str], counts: Sequence[int], size: int, rng: np.random.Generator):
    """Draw one image with ``counts[i]`` lesions of ``kinds[i]``; returns ``(image, masks)``."""
    img = background(size)
    masks = {}
    for kind, n in zip(kinds, counts):
        color = np.asarray(PRIMITIVES[kind].color)[:, None, None]
        m = masks.setdefault(kind, np.zeros((size, size), dtype=bool))
        for _ in range(int(n)):
            a = _lesion_alpha(kind, size, rng)
            img = img * (1.0 - a[None]) + a[None] * color
            m |= a > 0.25
    img = img + NOISE_AMPLITUDE * (2.0 * rng.random(img.shape) - 1.0)
    return np.clip(img, 0.0, 1.0), {k: m for k, m in masks.items() if m.any()}


def _task_entropy(task_id: str) -> int:
    return zlib.crc32(task_id.encode())


def generate_dataset(task: GradedTaskSpec, overlap: OverlapSpec, n_per_grade: Sequence[int],
                     image_size=(64, 64), seed: int = 0) -> list:
    """Exactly ``n_per_grade[g]`` examples of each grade, deterministic in ``seed``.

    Lesion counts are Poisson around the recipe; the progressive kind always
    shows at least one lesion at grades above 0.
    """
    if len(n_per_grade) != task.K:
        raise ValueError(f"need {task.K} per-grade counts, got {len(n_per_grade)}")
    if any(int(n) < 0 for n in n_per_grade):
        raise ValueError(f"per-grade counts must be nonnegative: {list(n_per_grade)}")
    h, w = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    if h != w:
        raise ValueError("only square images are supported")
    kinds = resolve_kinds(task, overlap)
    rng = np.random.default_rng([seed, _task_entropy(task.task_id)])
    out = []
    for grade, n in enumerate(n_per_grade):
        for _ in range(int(n)):
            counts = rng.poisson(task.counts[grade])
            if grade > 0:
                counts[0] = max(counts[0], 1)
            img, masks = render(kinds, counts, h, rng)
            out.append(LabeledExample(img, task.task_id, grade, task.K,
                                      example_id=f"{task.task_id}-{len(out):05d}", masks=masks))
    return out


# --------------------------------------------------------------- benchmarks


DR_LIKE = GradedTaskSpec(
    "dr", (HEMORRHAGE, EXUDATE),
    ((0, 0), (2, 0.5), (5, 1.5), (9, 3), (14, 5)),
    ("normal", "npdr-1", "npdr-2", "npdr-3", "pdr"),
)
AMD_LIKE = GradedTaskSpec(
    "amd", (DRUSEN, VESSEL),
    ((0, 0), (3, 1), (6, 3), (10, 6)),
    ("normal", "small-drusen", "big-drusen", "cnv"),
)
ARTER_LIKE = GradedTaskSpec("arter", (VESSEL,), ((0,), (5,)), ("normal", "arteriosclerosis"))

CATALOG = {t.task_id: t for t in (DR_LIKE, AMD_LIKE, ARTER_LIKE)}


def benchmark_tasks(names=("dr", "amd"), overlap: float = 0.6) -> list:
    """``(task, OverlapSpec)`` pairs: the first task anchors, the second borrows
    from it at ``overlap``, any further task keeps its own kinds."""
    out = []
    for i, name in enumerate(names):
        task = CATALOG[name]
        ov = OverlapSpec(overlap, CATALOG[names[0]].kinds) if i == 1 else OverlapSpec(0.0)
        out.append((task, ov))
    return out


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    quarter_turns: int = 0
    flip: Optional[str] = None  # None, "v" or "h"
    shear: float = 0.0


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        scale=float(rng.uniform(0.9, 1.1)),
        quarter_turns=int(rng.integers(0, 4)),
        flip=[None, "v", "h"][int(rng.integers(0, 3))],
        shear=float(rng.uniform(-0.2, 0.2)),
    )


def _geometric(arr, p: AugmentParams, order: int):
    """Apply ``p`` to a [c, h, w] array."""
    if p.scale != 1.0 or p.shear != 0.0:
        h, w = arr.shape[1:]
        # output coord -> input coord: inverse of (scale then shear along x)
        fwd = np.array([[p.scale, 0.0], [p.shear * p.scale, p.scale]])
        inv = np.linalg.inv(fwd)
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - inv @ center
        arr = np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=order, mode="nearest")
                        for ch in arr])
    if p.quarter_turns % 4:
        arr = np.rot90(arr, p.quarter_turns, axes=(1, 2))
    if p.flip == "v":
        arr = arr[:, ::-1, :]
    elif p.flip == "h":
        arr = arr[:, :, ::-1]
    return np.ascontiguousarray(arr)


def augment(example: LabeledExample, seed=None, params: Optional[AugmentParams] = None) -> LabeledExample:
    """Random scale (+-10%), quarter-turn rotation, flip and shear (+-0.2).

    Labels are carried over unchanged; lesion masks follow the image.
    """
    if params is None:
        params = sample_augment_params(np.random.default_rng(seed))
    img = np.clip(_geometric(example.image, params, order=1), 0.0, 1.0)
    masks = {k: _geometric(m[None].astype(np.uint8), params, order=0)[0].astype(bool)
             for k, m in example.masks.items()}
    return dataclasses.replace(example, image=img, masks=masks, soft_labels=dict(example.soft_labels))


# --------------------------------------------------------------------- split


def split(dataset: Sequence[LabeledExample], seed: int = 0):
    """Stratified 50/25/25 split by (task, grade); remainders go to train."""
    if len(dataset) < 4:
        raise ValueError("need at least 4 examples to split")
    groups: dict = {}
    for i, ex in enumerate(dataset):
        groups.setdefault((ex.task_id, ex.grade), []).append(i)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) < 4:
            raise ValueError(f"grade {key} has {len(idx)} examples; stratifying needs at least 4")
        idx = [idx[j] for j in rng.permutation(len(idx))]
        q = len(idx) // 4
        val += idx[:q]
        test += idx[q:2 * q]
        train += idx[2 * q:]
    pick = lambda ids: [dataset[i] for i in sorted(ids)]
    return pick(train), pick(val), pick(test)


# ------------------------------------------------------------- export/import


def export_dataset(root, examples: Sequence[LabeledExample], split_of: Optional[Mapping] = None,
                   seed: Optional[int] = None, recipe_hash: Optional[Mapping] = None) -> Path:
    """One directory per task holding ``<example_id>.npz`` files and a
    ``manifest.jsonl`` (id, grade, split, seed, recipe hash)."""
    root = Path(root)
    manifests: dict = {}
    for ex in examples:
        d = root / ex.task_id
        d.mkdir(parents=True, exist_ok=True)
        arrays = {"image": ex.image}
        arrays.update({f"mask/{k}": m for k, m in ex.masks.items()})
        with open(d / f"{ex.example_id}.npz", "wb") as fh:
            np.savez(fh, **arrays)
        manifests.setdefault(ex.task_id, []).append({
            "example_id": ex.example_id,
            "task_id": ex.task_id,
            "grade": ex.grade,
            "n_classes": ex.n_classes,
            "split": (split_of or {}).get(ex.example_id),
            "seed": seed,
            "recipe_hash": (recipe_hash or {}).get(ex.task_id),
        })
    for task_id, rows in manifests.items():
        with open(root / task_id / "manifest.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return root


def import_dataset(root):
    """Read back an exported dataset; returns ``(examples, split_of)``."""
    root = Path(root)
    examples, split_of = [], {}
    for manifest in sorted(root.glob("*/manifest.jsonl")):
        for line in manifest.read_text().splitlines():
            row = json.loads(line)
            with np.load(manifest.parent / f"{row['example_id']}.npz") as z:
                image = z["image"]
                masks = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("mask/")}
            examples.append(LabeledExample(image, row["task_id"], row["grade"], row["n_classes"],
                                           example_id=row["example_id"], masks=masks))
            split_of[row["example_id"]] = row["split"]
    return examples, split_of
