"""COCO-style mAP and out-of-distribution robustness metrics.

Detections and ground truth are keyed by image id; categories are global
ids. Matching is greedy in score order against the highest-IoU unmatched
ground truth, AP uses 101-point interpolation, and mAP averages over IoU
thresholds 0.50:0.05:0.95 and over the categories that have ground truth.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, iou_xyxy

COCO_THRESHOLDS: tuple[float, ...] = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ScoredBox:
    """A detection as the evaluator sees it: global category id and score."""

    box: Box
    category: int
    score: float


@dataclass
class EvalResult:
    map: float  # percent
    per_category: dict[int, float] = field(default_factory=dict)  # percent, mean over thresholds
    per_threshold: dict[float, float] = field(default_factory=dict)  # percent, mean over categories

    @property
    def ap50(self) -> float:
        return self.per_threshold.get(0.5, float("nan"))


@dataclass
class RobustnessReport:
    map_clean: float
    map_mixed: float
    reduction_rate: float  # percent; nan when map_clean == 0


def reduction_rate(map_clean: float, map_mixed: float) -> float:
    """Relative change (percent) from clean to mixed; nan with a warning if clean is 0."""
    if map_clean == 0:
        warnings.warn("reduction rate undefined for zero clean mAP", RuntimeWarning, stacklevel=2)
        return float("nan")
    return (map_mixed - map_clean) / map_clean * 100.0


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp, dtype=np.float64)
    fps = np.cumsum(~tp, dtype=np.float64)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # precision envelope: max precision at any recall to the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _greedy_match(dets: Sequence[ScoredBox], gts: Sequence[Box], threshold: float) -> np.ndarray:
    """TP flags for score-sorted ``dets`` of one image and category."""
    used = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    gt_corners = [g.corners() for g in gts]
    for i, d in enumerate(dets):
        best, best_j = -1.0, -1
        dc = d.box.corners()
        for j, gc in enumerate(gt_corners):
            if used[j]:
                continue
            v = iou_xyxy(dc, gc)
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            flags[i] = True
    return flags


def compute_map(
    detections: Mapping[Hashable, Sequence[ScoredBox]],
    gts: Mapping[Hashable, Sequence[tuple[Box, int]]],
    category_ids: Sequence[int],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    max_dets: int = 100,
) -> EvalResult:
    """COCO-style mAP over ``category_ids`` (those without any GT are skipped).

    Args:
        detections: image id -> detections (any order; sorted internally with
            insertion order breaking score ties).
        gts: image id -> list of (Box, category). Every evaluated image must
            appear here, even with an empty list.
        category_ids: categories to evaluate.
    """
    cats = list(category_ids)
    known = set(cats)
    for img, dets in detections.items():
        if img not in gts:
            raise KeyError(f"detections for unknown image {img!r}")
        for d in dets:
            if d.category not in known:
                raise ValueError(f"detection on image {img!r} has unknown category {d.category}")
    for img, objs in gts.items():
        for _, c in objs:
            if c not in known:
                raise ValueError(f"ground truth on image {img!r} has unknown category {c}")

    thresholds = [float(t) for t in iou_thresholds]
    per_cat: dict[int, list[float]] = {}
    images = list(gts)
    for c in cats:
        gt_by_img = {img: [b for b, k in gts[img] if k == c] for img in images}
        n_gt = sum(len(v) for v in gt_by_img.values())
        if n_gt == 0:
            continue
        dets_by_img = {}
        for img in images:
            ds = [d for d in detections.get(img, ()) if d.category == c]
            order = sorted(range(len(ds)), key=lambda i: -ds[i].score)  # stable
            dets_by_img[img] = [ds[i] for i in order[:max_dets]]
        aps = []
        for t in thresholds:
            scores, flags = [], []
            for img in images:
                ds = dets_by_img[img]
                if not ds:
                    continue
                flags.append(_greedy_match(ds, gt_by_img[img], t))
                scores.append(np.array([d.score for d in ds]))
            if scores:
                s = np.concatenate(scores)
                f = np.concatenate(flags)
                order = np.argsort(-s, kind="stable")
                aps.append(interpolated_ap(f[order], n_gt))
            else:
                aps.append(0.0)
        per_cat[c] = aps
    if not per_cat:
        raise ValueError("no ground truth for any evaluated category")
    table = np.array(list(per_cat.values()))  # categories x thresholds
    return EvalResult(
        map=float(table.mean()) * 100.0,
        per_category={c: float(np.mean(v)) * 100.0 for c, v in per_cat.items()},
        per_threshold={t: float(table[:, i].mean()) * 100.0 for i, t in enumerate(thresholds)},
    )


def robustness_from_detections(
    detections: Mapping[Hashable, Sequence[ScoredBox]],
    gts: Mapping[Hashable, Sequence[tuple[Box, int]]],
    target_images: Iterable[Hashable],
    category_ids: Sequence[int],
) -> RobustnessReport:
    """Clean mAP on the target images vs mixed mAP on every image of ``gts``."""
    target = list(target_images)
    clean_gt = {i: gts[i] for i in target}
    if not any(clean_gt.values()):
        raise ValueError("mixed set has no ground truth on target images")
    clean = compute_map({i: detections.get(i, ()) for i in target}, clean_gt, category_ids).map
    mixed = compute_map(detections, gts, category_ids).map
    return RobustnessReport(clean, mixed, reduction_rate(clean, mixed))


def average_reports(reports: Sequence[RobustnessReport]) -> RobustnessReport:
    """Round-robin summary: mean mAPs, reduction rate of the means."""
    if not reports:
        raise ValueError("no reports to average")
    clean = float(np.mean([r.map_clean for r in reports]))
    mixed = float(np.mean([r.map_mixed for r in reports]))
    return RobustnessReport(clean, mixed, reduction_rate(clean, mixed))


# -- file formats ------------------------------------------------------------


def load_coco_gt(path: Path | str) -> tuple[dict[int, list[tuple[Box, int]]], list[int], dict[int, tuple[int, int]]]:
    """Read a COCO annotation file: (gts by image id, category ids, image sizes)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    sizes = {im["id"]: (im["width"], im["height"]) for im in data["images"]}
    gts: dict[int, list[tuple[Box, int]]] = {i: [] for i in sizes}
    for a in data["annotations"]:
        w, h = sizes[a["image_id"]]
        gts[a["image_id"]].append((Box.from_coco(a["bbox"], w, h), a["category_id"]))
    return gts, [c["id"] for c in data["categories"]], sizes


def load_detections(path: Path | str, sizes: Mapping[int, tuple[int, int]]) -> dict[int, list[ScoredBox]]:
    """Read a COCO results list of {image_id, category_id, bbox, score}."""
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    out: dict[int, list[ScoredBox]] = {}
    for r in rows:
        img = r["image_id"]
        if img not in sizes:
            raise KeyError(f"detection for unknown image {img!r}")
        w, h = sizes[img]
        out.setdefault(img, []).append(ScoredBox(Box.from_coco(r["bbox"], w, h), r["category_id"], float(r["score"])))
    return out


def detections_to_coco(detections: Mapping[int, Sequence[ScoredBox]], sizes: Mapping[int, tuple[int, int]]) -> list[dict]:
    rows = []
    for img, dets in detections.items():
        w, h = sizes[img]
        for d in dets:
            rows.append({"image_id": img, "category_id": d.category, "bbox": d.box.to_coco(w, h), "score": d.score})
    return rows


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_report(path: Path | str, payload: EvalResult | RobustnessReport | dict) -> None:
    data = asdict(payload) if not isinstance(payload, dict) else payload
    Path(path).write_text(json.dumps(_jsonable(data), indent=1, sort_keys=True), encoding="utf-8")


def format_eval_table(result: EvalResult, names: Mapping[int, str] | None = None) -> str:
    names = names or {}
    lines = [f"{'category':<20}{'AP':>8}"]
    for c, ap in result.per_category.items():
        lines.append(f"{names.get(c, str(c)):<20}{ap:>8.2f}")
    lines.append(f"{'mAP':<20}{result.map:>8.2f}")
    lines.append(f"{'AP50':<20}{result.ap50:>8.2f}")
    return "\n".join(lines)


def format_robustness_table(rows: Sequence[tuple[str, RobustnessReport]]) -> str:
    """Aligned columns: name | clean mAP | mixed mAP | reduction %."""
    width = max([len("round")] + [len(n) for n, _ in rows])
    lines = [f"{'round':<{width}}  {'clean':>8}  {'mixed':>8}  {'reduction %':>12}"]
    for name, r in rows:
        lines.append(f"{name:<{width}}  {r.map_clean:>8.2f}  {r.map_mixed:>8.2f}  {r.reduction_rate:>12.2f}")
    return "\n".join(lines)
