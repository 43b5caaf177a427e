"""In-memory detection splits backed by the on-disk benchmark layout."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from PIL import Image

from .evaluator import ScoredBox
from .synthbench import SPLIT_OFFSETS, Annotation, AnnotationSet, DatasetError, DomainSpec, render, sets_from_coco, spec_from_json


@dataclass
class Sample:
    """One training example: float image in [0, 1], local labels, center-size boxes."""

    image: np.ndarray  # (H, W, 3) float32
    labels: np.ndarray  # (M,) int64, indices into the split's category list
    boxes: np.ndarray  # (M, 4) float32


@dataclass
class DetectionSplit:
    images: np.ndarray  # (N, H, W, 3) uint8
    sets: list[AnnotationSet]
    category_ids: list[int]

    def __len__(self) -> int:
        return len(self.sets)

    @property
    def local_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.category_ids)}

    def sample(self, i: int) -> Sample:
        idx = self.local_index
        objs = self.sets[i].objects
        try:
            labels = np.array([idx[o.category] for o in objs], dtype=np.int64)
        except KeyError as e:
            raise DatasetError(f"image {self.sets[i].image_id} has category {e.args[0]} outside the split") from None
        boxes = np.array([o.box.as_tuple() for o in objs], dtype=np.float32).reshape(-1, 4)
        return Sample(self.images[i].astype(np.float32) / 255.0, labels, boxes)

    def gts(self) -> dict[Hashable, list]:
        return {s.image_id: [(o.box, o.category) for o in s.objects] for s in self.sets}

    def to_global(self, dets_per_image) -> dict[Hashable, list[ScoredBox]]:
        """Map per-image detector outputs (local category ids) to evaluator inputs."""
        return {
            s.image_id: [ScoredBox(d.box, self.category_ids[d.category], d.score) for d in dets]
            for s, dets in zip(self.sets, dets_per_image)
        }


def read_manifest(root: Path | str) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no benchmark manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def domain_entry(root: Path | str, name: str) -> dict:
    for d in read_manifest(root)["domains"]:
        if d["name"] == name:
            return d
    raise DatasetError(f"domain {name!r} not in manifest")


def load_split(root: Path | str, domain: str, split: str) -> DetectionSplit:
    entry = domain_entry(root, domain)
    ddir = Path(root) / domain
    ann = ddir / "annotations" / f"{split}.json"
    if not ann.exists():
        raise DatasetError(f"missing split {split!r} for domain {domain!r}")
    sets = sets_from_coco(json.loads(ann.read_text(encoding="utf-8")))
    images = np.stack([np.asarray(Image.open(ddir / "images" / s.file_name).convert("RGB")) for s in sets])
    return DetectionSplit(images, sets, list(entry["category_ids"]))


def render_split(spec: DomainSpec, seed: int, split: str, indices: Sequence[int]) -> DetectionSplit:
    """Build a split directly from the renderer, skipping the disk round trip."""
    imgs, sets = [], []
    for i in indices:
        img, objs = render(spec, seed, split, i)
        imgs.append(img)
        sets.append(
            AnnotationSet(SPLIT_OFFSETS[split] + i, f"{split}_{i:05d}.png", [Annotation(b, c) for b, c in objs])
        )
    return DetectionSplit(np.stack(imgs), sets, spec.category_ids)


def subset(split: DetectionSplit, chosen: Sequence[AnnotationSet]) -> DetectionSplit:
    pos = {s.image_id: i for i, s in enumerate(split.sets)}
    idx = [pos[s.image_id] for s in chosen]
    return DetectionSplit(split.images[idx], [split.sets[i] for i in idx], split.category_ids)


def spec_for(root: Path | str, domain: str) -> DomainSpec:
    return spec_from_json(domain_entry(root, domain)["spec"])
