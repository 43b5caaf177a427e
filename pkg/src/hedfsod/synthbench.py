"""Synthetic multi-domain shapes benchmark.

Each domain renders simple shapes in its own visual style and owns a set of
category ids that no other domain uses. Splits are written as PNG images
plus COCO-style annotation files; a manifest at the dataset root lists the
domains and their category ranges.

Rendering is a pure function of ``(spec, seed, split, index)``, so images
can be generated in any order or concurrently.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Box


class DatasetError(ValueError):
    pass


class KShotError(DatasetError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    shape: str
    color: tuple[float, float, float]


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str
    style: str
    categories: tuple[CategorySpec, ...]
    objects_per_image: tuple[int, int] = (1, 4)
    radius_range: tuple[float, float] = (0.09, 0.2)  # fraction of image side
    image_size: int = 96

    @property
    def category_ids(self) -> list[int]:
        return [c.id for c in self.categories]

    def with_size(self, image_size: int) -> "DomainSpec":
        return DomainSpec(**{**self.__dict__, "image_size": image_size})


@dataclass
class Annotation:
    box: Box
    category: int  # global category id


@dataclass
class AnnotationSet:
    image_id: int
    file_name: str
    objects: list[Annotation] = field(default_factory=list)

    @property
    def categories(self) -> list[int]:
        return [a.category for a in self.objects]


# -- shapes ----------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "diamond", "hexagon", "star", "cross", "ring", "bar", "pentagon")


def _polygon_mask(dx: np.ndarray, dy: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Inside test for a convex polygon with counter-clockwise vertices."""
    inside = np.ones(dx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        inside &= (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0
    return inside


def _regular(n: int, r: float, phase: float) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack((r * np.cos(ang), r * np.sin(ang)), axis=1)


def shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean (size, size) mask of ``shape`` centred at pixel coords (cx, cy)."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        return _polygon_mask(dx, dy, _regular(3, r, np.pi / 2))
    if shape == "hexagon":
        return _polygon_mask(dx, dy, _regular(6, r, 0.0))
    if shape == "pentagon":
        return _polygon_mask(dx, dy, _regular(5, r, np.pi / 2))
    if shape == "star":
        return _polygon_mask(dx, dy, _regular(3, r, np.pi / 2)) | _polygon_mask(dx, dy, _regular(3, r, -np.pi / 2))
    if shape == "cross":
        t = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= t)) | ((np.abs(dy) <= r) & (np.abs(dx) <= t))
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.4 * r)
    raise ValueError(f"unknown shape {shape!r}")


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight pixel box (x1, y1, x2, y2), exclusive upper corner."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not len(rows):
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


# -- domain styles ---------------------------------------------------------


def _cat(cid: int, shape: str, color: tuple[float, float, float], cname: str) -> CategorySpec:
    return CategorySpec(cid, f"{cname}_{shape}", shape, color)


RED, BLUE = (0.9, 0.15, 0.15), (0.15, 0.3, 0.9)
GREEN, MAGENTA = (0.1, 0.65, 0.2), (0.8, 0.1, 0.75)
YELLOW, CYAN = (0.95, 0.9, 0.3), (0.3, 0.95, 0.95)
ORANGE, PURPLE = (0.95, 0.55, 0.1), (0.45, 0.15, 0.6)
WHITE, BLACK = (0.97, 0.97, 0.97), (0.05, 0.05, 0.05)


def _domain(did: int, name: str, style: str, shapes: Sequence[str], colors, **kw) -> DomainSpec:
    cats = []
    cid = did * 6
    for color, cname in colors:
        for shape in shapes:
            cats.append(_cat(cid, shape, color, cname))
            cid += 1
    return DomainSpec(did, name, style, tuple(cats), **kw)


DEFAULT_DOMAINS: tuple[DomainSpec, ...] = (
    _domain(0, "filled_noise", "filled_noise", ("circle", "square", "triangle"), [(RED, "red"), (BLUE, "blue")]),
    _domain(1, "outlined", "outlined", ("diamond", "hexagon", "star"), [(GREEN, "green"), (MAGENTA, "magenta")]),
    _domain(2, "inverted", "inverted", ("ring", "cross", "pentagon"), [(YELLOW, "yellow"), (CYAN, "cyan")]),
    _domain(3, "textured", "textured", ("bar", "circle", "triangle"), [(ORANGE, "orange"), (PURPLE, "purple")]),
    _domain(
        4,
        "small_dense",
        "small_dense",
        ("square", "diamond", "ring"),
        [(WHITE, "white"), (BLACK, "black")],
        objects_per_image=(3, 6),
        radius_range=(0.06, 0.1),
    ),
)

TEAL, PINK = (0.1, 0.6, 0.55), (1.0, 0.6, 0.75)

# pretraining domain: every target style mixed per image, base-only colours
BASE_DOMAIN = _domain(
    5,
    "base",
    "mixed",
    ("circle", "square", "triangle", "diamond", "cross", "ring"),
    [(TEAL, "teal"), (PINK, "pink")],
    objects_per_image=(1, 5),
    radius_range=(0.07, 0.2),
)
MIXED_STYLES = ("filled_noise", "outlined", "inverted", "textured", "small_dense", "plain")


def check_disjoint(domains: Iterable[DomainSpec]) -> None:
    seen: dict[int, str] = {}
    for d in domains:
        for cid in d.category_ids:
            if cid in seen:
                raise DatasetError(f"category {cid} shared by domains {seen[cid]!r} and {d.name!r}")
            seen[cid] = d.name


def _image_rng(seed: int, domain_id: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, domain_id, zlib.crc32(split.encode()), index]))


def _background(style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if style == "filled_noise":
        img = 0.5 + 0.15 * rng.standard_normal((size, size, 3))
    elif style == "outlined":
        ramp = np.linspace(0.85, 0.97, size)[None, :, None]
        img = np.broadcast_to(ramp, (size, size, 3)) + 0.02 * rng.standard_normal((size, size, 3))
    elif style == "inverted":
        img = 0.08 + 0.04 * rng.standard_normal((size, size, 3))
    elif style == "textured":
        period = rng.integers(4, 9)
        ys, xs = np.mgrid[0:size, 0:size]
        theta = rng.uniform(0, np.pi)
        stripes = (np.floor((xs * np.cos(theta) + ys * np.sin(theta)) / period) % 2)[..., None]
        c0, c1 = rng.uniform(0.3, 0.5, 3), rng.uniform(0.55, 0.75, 3)
        img = c0 + (c1 - c0) * stripes
    elif style == "small_dense":
        img = np.broadcast_to(np.array([0.72, 0.62, 0.45]), (size, size, 3)) + 0.03 * rng.standard_normal((size, size, 3))
    elif style == "plain":
        img = np.broadcast_to(rng.uniform(0.2, 0.8, 3), (size, size, 3)) + 0.03 * rng.standard_normal((size, size, 3))
    else:
        raise ValueError(f"unknown style {style!r}")
    return np.array(img, dtype=np.float64)


def _paint(img: np.ndarray, mask: np.ndarray, style: str, color) -> np.ndarray:
    """Apply the style's fill to ``mask``; returns the mask actually painted."""
    if style == "outlined":
        thick = max(1, img.shape[0] // 40)
        painted = mask & ~ndimage.binary_erosion(mask, iterations=thick)
    else:
        painted = mask
    img[painted] = np.asarray(color)
    return painted


def render(spec: DomainSpec, seed: int, split: str, index: int, with_masks: bool = False):
    """Render one image. Returns ``(uint8 HxWx3, [(Box, category_id), ...])``.

    With ``with_masks`` a third element lists the painted mask of each object.
    """
    rng = _image_rng(seed, spec.domain_id, split, index)
    s = spec.image_size
    style = spec.style
    if style == "mixed":
        style = MIXED_STYLES[int(rng.integers(len(MIXED_STYLES)))]
    img = _background(style, s, rng)
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    objects = []
    masks = []
    for _ in range(n_obj):
        for _attempt in range(50):
            cat = spec.categories[int(rng.integers(len(spec.categories)))]
            r = rng.uniform(*spec.radius_range) * s
            cx, cy = rng.uniform(r + 1, s - r - 1, size=2)
            mask = shape_mask(cat.shape, cx, cy, r, s)
            bb = mask_bbox(mask)
            if bb is None or (bb[2] - bb[0]) < 2 or (bb[3] - bb[1]) < 2:
                continue
            if any(not (bb[2] + 1 <= p[0] or p[2] + 1 <= bb[0] or bb[3] + 1 <= p[1] or p[3] + 1 <= bb[1]) for p in placed):
                continue
            painted = _paint(img, mask, style, cat.color)
            pb = mask_bbox(painted)
            placed.append(bb)
            objects.append((Box.from_corners(*pb, scale=s), cat.id))
            masks.append(painted)
            break
    out = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    if with_masks:
        return out, objects, masks
    return out, objects


# -- persistence -----------------------------------------------------------


def coco_dict(spec: DomainSpec, sets: Sequence[AnnotationSet]) -> dict:
    s = spec.image_size
    images, anns = [], []
    aid = 0
    for a in sets:
        images.append({"id": a.image_id, "file_name": a.file_name, "width": s, "height": s})
        for obj in a.objects:
            x, y, w, h = obj.box.to_coco(s, s)
            anns.append(
                {
                    "id": aid,
                    "image_id": a.image_id,
                    "category_id": obj.category,
                    "bbox": [round(v, 6) for v in (x, y, w, h)],
                    "area": round(w * h, 6),
                    "iscrowd": 0,
                }
            )
            aid += 1
    cats = [{"id": c.id, "name": c.name, "supercategory": spec.name} for c in spec.categories]
    return {"images": images, "annotations": anns, "categories": cats}


def sets_from_coco(data: dict) -> list[AnnotationSet]:
    by_id: dict[int, AnnotationSet] = {}
    sizes = {}
    for im in data["images"]:
        by_id[im["id"]] = AnnotationSet(im["id"], im["file_name"])
        sizes[im["id"]] = (im["width"], im["height"])
    for a in data["annotations"]:
        w, h = sizes[a["image_id"]]
        by_id[a["image_id"]].objects.append(Annotation(Box.from_coco(a["bbox"], w, h), a["category_id"]))
    return [by_id[k] for k in sorted(by_id)]


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}


def generate_domain(
    spec: DomainSpec, out_dir: Path | str, n_train: int, n_test: int, seed: int, n_val: int = 0
) -> Path:
    """Render every split of one domain into ``out_dir / spec.name``."""
    root = Path(out_dir) / spec.name
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n == 0:
            continue
        sets = []
        for i in range(n):
            img, objs = render(spec, seed, split, i)
            fname = f"{split}_{i:05d}.png"
            Image.fromarray(img).save(root / "images" / fname)
            sets.append(AnnotationSet(SPLIT_OFFSETS[split] + i, fname, [Annotation(b, c) for b, c in objs]))
        _write_json(root / "annotations" / f"{split}.json", coco_dict(spec, sets))
    return root


def generate_benchmark(
    out_dir: Path | str,
    domains: Sequence[DomainSpec] = DEFAULT_DOMAINS,
    n_train: int = 200,
    n_val: int = 100,
    n_test: int = 200,
    seed: int = 0,
    shots: Sequence[int] = (),
    image_size: int | None = None,
) -> Path:
    """Generate all domains, optional K-shot splits, and the manifest."""
    check_disjoint(domains)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in domains:
        if image_size is not None:
            spec = spec.with_size(image_size)
        root = generate_domain(spec, out, n_train, n_test, seed, n_val=n_val)
        splits = [s for s, n in (("train", n_train), ("val", n_val), ("test", n_test)) if n]
        train = sets_from_coco(json.loads((root / "annotations" / "train.json").read_text())) if n_train else []
        for k in shots:
            chosen = sample_kshot(train, spec.category_ids, k, seed)
            name = f"train_{k}shot_seed{seed}"
            _write_json(root / "annotations" / f"{name}.json", coco_dict(spec, chosen))
            splits.append(name)
        entries.append(
            {
                "domain_id": spec.domain_id,
                "name": spec.name,
                "style": spec.style,
                "image_size": spec.image_size,
                "category_ids": spec.category_ids,
                "category_range": [min(spec.category_ids), max(spec.category_ids)],
                "splits": splits,
                "spec": _spec_json(spec),
            }
        )
    _write_json(out / "manifest.json", {"seed": seed, "domains": entries})
    return out


def _spec_json(spec: DomainSpec) -> dict:
    d = asdict(spec)
    d["categories"] = [asdict(c) for c in spec.categories]
    return d


def spec_from_json(d: dict) -> DomainSpec:
    cats = tuple(CategorySpec(c["id"], c["name"], c["shape"], tuple(c["color"])) for c in d["categories"])
    return DomainSpec(
        d["domain_id"], d["name"], d["style"], cats, tuple(d["objects_per_image"]), tuple(d["radius_range"]), d["image_size"]
    )


# -- K-shot sampling -------------------------------------------------------


def sample_kshot(
    sets: Sequence[AnnotationSet], category_ids: Sequence[int], k: int, seed: int, max_nodes: int = 200_000
) -> list[AnnotationSet]:
    """Pick whole images so every category has exactly ``k`` annotated instances.

    Images keep all of their annotations, so the search looks for a subset
    whose per-category counts sum to exactly ``k``. A randomized depth-first
    search (order fixed by ``seed``) is used; raises :class:`KShotError`
    when the pool cannot supply such a subset.
    """
    if k < 1:
        raise KShotError("k must be >= 1")
    cat_index = {c: i for i, c in enumerate(category_ids)}
    totals = np.zeros(len(cat_index), dtype=int)
    counts = []
    for s in sets:
        v = np.zeros(len(cat_index), dtype=int)
        for c in s.categories:
            if c not in cat_index:
                raise DatasetError(f"image {s.image_id} has category {c} outside the domain")
            v[cat_index[c]] += 1
        counts.append(v)
        totals += v
    short = [category_ids[i] for i in np.flatnonzero(totals < k)]
    if short:
        raise KShotError(f"categories {short} have fewer than {k} instances (counts {totals.tolist()})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, k, 0x5EED]))
    order = [i for i in rng.permutation(len(sets)) if counts[i].sum() and counts[i].max() <= k]
    need = np.full(len(cat_index), k)
    nodes = 0
    chosen: list[int] = []

    def search(need: np.ndarray) -> bool:
        nonlocal nodes
        if not need.any():
            return True
        nodes += 1
        if nodes > max_nodes:
            return False
        # branch on the open category with the fewest usable images
        used = set(chosen)
        best = None
        for c in np.flatnonzero(need):
            cand = [i for i in order if i not in used and counts[i][c] and np.all(counts[i] <= need)]
            if not cand:
                return False
            if best is None or len(cand) < len(best):
                best = cand
        for i in best:
            chosen.append(i)
            if search(need - counts[i]):
                return True
            chosen.pop()
        return False

    if not search(need):
        raise KShotError(f"no image subset gives exactly {k} instances per category")
    picked = sorted(chosen, key=lambda i: sets[i].image_id)
    return [sets[i] for i in picked]


def instance_counts(sets: Iterable[AnnotationSet]) -> dict[int, int]:
    out: dict[int, int] = {}
    for s in sets:
        for c in s.categories:
            out[c] = out.get(c, 0) + 1
    return out


# -- CD-Mixed construction ---------------------------------------------------


@dataclass
class MixedSet:
    """Target-domain images with GT plus foreign images with masked (empty) GT."""

    target: str
    category_ids: list[int]
    sets: list[AnnotationSet]
    sources: list[str]

    @property
    def num_gt(self) -> int:
        return sum(len(s.objects) for s in self.sets)


def build_cd_mixed(
    target_name: str,
    target_categories: Sequence[int],
    target_test: Sequence[AnnotationSet],
    others: Sequence[tuple[str, Sequence[int], Sequence[AnnotationSet]]] = (),
) -> MixedSet:
    """Union of the target's test images and every other domain's test images.

    Foreign images keep their files but contribute no ground truth for the
    target's categories. Image ids are re-keyed as ``(source, id)`` strings
    to stay unique across domains.
    """
    tcats = set(target_categories)
    for name, cats, _ in others:
        if tcats & set(cats):
            raise DatasetError(f"domain {name!r} shares categories with target {target_name!r}")
    sets = [AnnotationSet(f"{target_name}/{s.image_id}", s.file_name, list(s.objects)) for s in target_test]
    sources = [target_name] * len(sets)
    for name, _, test in others:
        for s in test:
            sets.append(AnnotationSet(f"{name}/{s.image_id}", s.file_name, []))
            sources.append(name)
    return MixedSet(target_name, list(target_categories), sets, sources)
