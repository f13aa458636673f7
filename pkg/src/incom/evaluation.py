"""HOI detection evaluation: greedy IoU matching, per-category AP, and split means.

A prediction is a true positive when an unmatched ground-truth pair of the
same (verb, object class) category in the same scene overlaps both its boxes
with IoU above the threshold. AP uses all-point interpolation (area under the
monotone envelope of the step precision-recall curve). Categories are split
into rare / non-rare by their training-set frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SceneSample
from .geometry import Box, box_iou_xyxy

Category = tuple[int, int]  # (verb, object class)

RARE_THRESHOLD = 10


@dataclass(frozen=True)
class HoiPrediction:
    scene_id: int
    human_box: Box
    object_box: Box
    object_class: int
    verb: int
    score: float

    @property
    def category(self) -> Category:
        return (self.verb, self.object_class)


@dataclass
class EvalReport:
    mode: str
    map_full: float
    map_rare: float | None
    map_non_rare: float | None
    per_category_ap: dict[Category, float]
    category_gt_counts: dict[Category, int]
    rare_categories: list[Category]
    rare_threshold: int = RARE_THRESHOLD

    def to_json_dict(self) -> dict:
        def key(cat: Category) -> str:
            return f"{cat[0]}:{cat[1]}"

        return {
            "mode": self.mode,
            "map_full": self.map_full,
            "map_rare": self.map_rare,
            "map_non_rare": self.map_non_rare,
            "rare_threshold": self.rare_threshold,
            "num_categories": len(self.per_category_ap),
            "rare_categories": sorted(key(c) for c in self.rare_categories),
            "per_category_ap": {key(c): ap for c, ap in sorted(self.per_category_ap.items())},
            "category_gt_counts": {key(c): n for c, n in sorted(self.category_gt_counts.items())},
        }


def match_predictions(
    preds: list[HoiPrediction],
    gts_by_scene: dict[int, list[tuple[np.ndarray, np.ndarray]]],
    iou_threshold: float = 0.5,
) -> list[bool]:
    """Greedy TP/FP flags for one category's predictions, already sorted by
    descending score.

    Each ground-truth pair matches at most one prediction. Candidate ties are
    broken by larger min(human IoU, object IoU), then by lower GT index.
    """
    matched: dict[int, set[int]] = {}
    flags = []
    for pred in preds:
        gts = gts_by_scene.get(pred.scene_id, [])
        taken = matched.setdefault(pred.scene_id, set())
        h_box = np.asarray(pred.human_box.as_list())
        o_box = np.asarray(pred.object_box.as_list())
        best = None
        for gi, (gh, go) in enumerate(gts):
            if gi in taken:
                continue
            iou_h = box_iou_xyxy(h_box, gh)
            if iou_h <= iou_threshold:
                continue
            iou_o = box_iou_xyxy(o_box, go)
            if iou_o <= iou_threshold:
                continue
            quality = min(iou_h, iou_o)
            if best is None or quality > best[0] or (quality == best[0] and gi < best[1]):
                best = (quality, gi)
        if best is None:
            flags.append(False)
        else:
            taken.add(best[1])
            flags.append(True)
    return flags


def average_precision(flags: list[bool], n_gt: int) -> float | None:
    """All-point interpolated AP; None when the category has no ground truth."""
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(len(mrec) - 1):
        ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return float(ap)


def ground_truth_index(
    scenes: list[SceneSample],
) -> tuple[dict[Category, dict[int, list[tuple[np.ndarray, np.ndarray]]]], dict[Category, int]]:
    """Per-category, per-scene GT box pairs plus per-category totals."""
    index: dict[Category, dict[int, list[tuple[np.ndarray, np.ndarray]]]] = {}
    counts: dict[Category, int] = {}
    for scene in scenes:
        for t in scene.triplets:
            cat = (t.verb, scene.instances[t.o].class_id)
            pair = (
                np.asarray(scene.instances[t.h].box.as_list()),
                np.asarray(scene.instances[t.o].box.as_list()),
            )
            index.setdefault(cat, {}).setdefault(scene.scene_id, []).append(pair)
            counts[cat] = counts.get(cat, 0) + 1
    return index, counts


def evaluate_predictions(
    preds: list[HoiPrediction],
    gt_scenes: list[SceneSample],
    train_counts: dict[Category, int],
    mode: str = "full",
    iou_threshold: float = 0.5,
    rare_threshold: int = RARE_THRESHOLD,
) -> EvalReport:
    """Match predictions against scenes and average per-category APs per split.

    Categories with no ground truth in `gt_scenes` are skipped. The rare split
    holds categories whose training-set count is below `rare_threshold`.
    """
    gt_index, gt_counts = ground_truth_index(gt_scenes)
    by_cat: dict[Category, list[HoiPrediction]] = {}
    for pred in preds:
        by_cat.setdefault(pred.category, []).append(pred)
    per_cat_ap: dict[Category, float] = {}
    for cat, n_gt in gt_counts.items():
        cat_preds = sorted(by_cat.get(cat, []), key=lambda p: -p.score)
        flags = match_predictions(cat_preds, gt_index[cat], iou_threshold)
        per_cat_ap[cat] = average_precision(flags, n_gt)
    rare = [c for c in per_cat_ap if train_counts.get(c, 0) < rare_threshold]
    non_rare = [c for c in per_cat_ap if c not in set(rare)]

    def mean_over(cats: list[Category]) -> float | None:
        if not cats:
            return None
        return float(np.mean([per_cat_ap[c] for c in cats]))

    return EvalReport(
        mode=mode,
        map_full=mean_over(sorted(per_cat_ap)) if per_cat_ap else 0.0,
        map_rare=mean_over(sorted(rare)),
        map_non_rare=mean_over(sorted(non_rare)),
        per_category_ap=per_cat_ap,
        category_gt_counts=gt_counts,
        rare_categories=sorted(rare),
        rare_threshold=rare_threshold,
    )
