"""Open-set detection metrics.

Detections carry K+1 scores (K in-vocabulary classes then OOV) and a
predicted label; each detection enters exactly one class pool, keyed by its
predicted label and scored by that slot. Matching is VOC-style greedy
one-to-one per image and class at a fixed IoU threshold.

Reported quantities: per-class all-point average precision and its means
over the seen / unseen / in-vocabulary / OOV splits, OOV recall at the base
threshold and averaged over the 0.50:0.05:0.95 sweep, wilderness impact at
a fixed closed-set recall level, and the absolute open-set error count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .types import DetectionRecord, GroundTruthRecord, box_iou

__all__ = [
    "EvalSet",
    "ClassSplit",
    "MetricsReport",
    "match_detections",
    "average_precision",
    "wilderness_impact",
    "absolute_open_set_error",
    "oov_recall",
    "full_report",
    "AR_IOU_SWEEP",
]

# COCO-style IoU sweep used for average recall.
AR_IOU_SWEEP = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass(frozen=True)
class EvalSet:
    """Detections and ground truth for one evaluation pass.

    Every detection's image id must belong to the ground-truth image set;
    images that genuinely have no objects can be declared via
    ``extra_image_ids``.
    """

    detections: tuple[DetectionRecord, ...]
    ground_truth: tuple[GroundTruthRecord, ...]
    iou_threshold: float = 0.5
    extra_image_ids: tuple[str, ...] = ()
    n_class_slots: int | None = None

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "extra_image_ids", tuple(self.extra_image_ids))
        images = {g.image_id for g in self.ground_truth} | set(self.extra_image_ids)
        orphans = {d.image_id for d in self.detections} - images
        if orphans:
            raise ValueError(f"detections reference unknown images: {sorted(orphans)}")
        if self.n_class_slots is not None:
            bad = [d for d in self.detections if d.scores.shape[0] != self.n_class_slots]
            if bad:
                raise ValueError("detections disagree with declared class slot count")

    @property
    def n_classes(self) -> int:
        """Number of score slots (K IV classes + 1 OOV)."""
        if self.n_class_slots is not None:
            return self.n_class_slots
        if self.detections:
            return self.detections[0].scores.shape[0]
        return max((g.class_index for g in self.ground_truth), default=0) + 1

    @property
    def oov_class(self) -> int:
        return self.n_classes - 1


@dataclass(frozen=True)
class ClassSplit:
    """Partition of class indices [0, K]: seen + unseen IV classes, OOV last."""

    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    oov: int

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", tuple(int(c) for c in self.unseen))
        iv = sorted(self.seen + self.unseen)
        if iv != list(range(len(iv))) or self.oov != len(iv):
            raise ValueError("split must partition [0, K] with OOV as the final index")

    @property
    def iv_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen + self.unseen))


@dataclass(frozen=True)
class MetricsReport:
    """All reported metrics; mAP and recall fields are percentages."""

    map_iv: float
    map_oov: float
    map_seen: float
    map_unseen: float
    r_oov: float
    ar_oov: float
    wi: float
    aose: int

    def __post_init__(self):
        for name in ("map_iv", "map_oov", "map_seen", "map_unseen", "r_oov", "ar_oov"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")
        if self.aose < 0:
            raise ValueError("aose must be >= 0")

    def to_dict(self) -> dict:
        return {
            "map_iv": self.map_iv,
            "map_oov": self.map_oov,
            "map_seen": self.map_seen,
            "map_unseen": self.map_unseen,
            "r_oov": self.r_oov,
            "ar_oov": self.ar_oov,
            "wi": self.wi,
            "aose": self.aose,
        }


def _sorted_by_score(dets: Iterable[DetectionRecord]) -> list[DetectionRecord]:
    """Score-descending, stable: ties keep insertion order."""
    return sorted(dets, key=lambda d: -d.score)


def match_detections(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    iou_threshold: float,
) -> list[bool]:
    """Greedy one-to-one TP/FP flags for one class's detections.

    Detections must already be sorted by score descending. Each detection
    matches the highest-IoU still-unmatched ground-truth box in its image
    if that IoU reaches the threshold; each ground truth is consumed at
    most once.
    """
    by_image: dict[str, list[GroundTruthRecord]] = {}
    for g in ground_truth:
        by_image.setdefault(g.image_id, []).append(g)
    used: dict[str, list[bool]] = {k: [False] * len(v) for k, v in by_image.items()}
    flags: list[bool] = []
    for det in detections:
        gts = by_image.get(det.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if used[det.image_id][j]:
                continue
            iou = box_iou(det.box, g.box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            used[det.image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], n_gt: int, all_point: bool = True) -> float:
    """Area under the interpolated precision-recall curve, in [0, 1].

    ``flags`` are score-ordered TP/FP indicators. Returns 0 when there is
    no ground truth (with or without detections). The default is all-point
    interpolation; ``all_point=False`` selects the legacy 11-point variant.
    """
    if n_gt < 0:
        raise ValueError("ground-truth count must be >= 0")
    if sum(flags) > n_gt:
        raise ValueError("more true positives than ground-truth objects")
    if n_gt == 0 or not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if not all_point:
        ap = 0.0
        for t in np.arange(0.0, 1.01, 0.1):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_pool(eval_set: EvalSet, class_index: int) -> list[DetectionRecord]:
    return _sorted_by_score(
        d for d in eval_set.detections if d.predicted_label == class_index
    )


def _class_gt(eval_set: EvalSet, class_index: int) -> list[GroundTruthRecord]:
    return [g for g in eval_set.ground_truth if g.class_index == class_index]


def _class_ap(eval_set: EvalSet, class_index: int) -> tuple[float, int, int]:
    """(AP, n_gt, n_det) for one class at the evaluation threshold."""
    dets = _class_pool(eval_set, class_index)
    gts = _class_gt(eval_set, class_index)
    flags = match_detections(dets, gts, eval_set.iou_threshold)
    return average_precision(flags, len(gts)), len(gts), len(dets)


def wilderness_impact(eval_set: EvalSet, recall_level: float = 0.8) -> float:
    """Precision degradation caused by OOV objects, at a fixed IV recall.

    All IV-labeled detections are swept in score order. A detection is a
    true positive when it matches unmatched same-class IV ground truth. A
    detection overlapping OOV ground truth is an artifact of the open set:
    it is excluded from the closed-set precision and counted as a false
    positive in the open-set precision. At the first operating point whose
    closed-set recall reaches ``recall_level``, returns
    (P_closed / P_open - 1) * 100.
    """
    if not 0.0 < recall_level <= 1.0:
        raise ValueError("recall_level must be in (0, 1]")
    oov = eval_set.oov_class
    iv_gt = [g for g in eval_set.ground_truth if g.class_index != oov]
    oov_gt_by_image: dict[str, list[GroundTruthRecord]] = {}
    for g in eval_set.ground_truth:
        if g.class_index == oov:
            oov_gt_by_image.setdefault(g.image_id, []).append(g)
    n_iv_gt = len(iv_gt)
    if n_iv_gt == 0:
        raise ValueError("wilderness impact needs in-vocabulary ground truth")

    gt_pool: dict[tuple[str, int], list[GroundTruthRecord]] = {}
    for g in iv_gt:
        gt_pool.setdefault((g.image_id, g.class_index), []).append(g)
    used = {k: [False] * len(v) for k, v in gt_pool.items()}

    dets = _sorted_by_score(d for d in eval_set.detections if d.predicted_label != oov)
    kinds: list[str] = []
    for det in dets:
        key = (det.image_id, det.predicted_label)
        gts = gt_pool.get(key, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if used[key][j]:
                continue
            iou = box_iou(det.box, g.box)
            if iou >= eval_set.iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            used[key][best_j] = True
            kinds.append("tp")
        elif any(
            box_iou(det.box, g.box) >= eval_set.iou_threshold
            for g in oov_gt_by_image.get(det.image_id, [])
        ):
            kinds.append("wild")
        else:
            kinds.append("fp")

    # Sweep score thresholds; detections tied on score enter together.
    tp = fp = wild = 0
    i = 0
    while i < len(dets):
        j = i
        while j < len(dets) and dets[j].score == dets[i].score:
            tp += kinds[j] == "tp"
            fp += kinds[j] == "fp"
            wild += kinds[j] == "wild"
            j += 1
        if tp / n_iv_gt >= recall_level:
            p_closed = tp / (tp + fp)
            p_open = tp / (tp + fp + wild)
            return (p_closed / p_open - 1.0) * 100.0
        i = j
    raise ValueError(
        f"closed-set recall never reached {recall_level}; maximum achieved "
        f"{tp / n_iv_gt:.4f}"
    )


def absolute_open_set_error(eval_set: EvalSet) -> int:
    """Count of OOV ground-truth objects claimed by IV-labeled detections.

    IV-labeled detections are matched greedily in score order against OOV
    ground truth at the evaluation threshold, one-to-one.
    """
    oov = eval_set.oov_class
    dets = _sorted_by_score(d for d in eval_set.detections if d.predicted_label != oov)
    oov_gt = _class_gt(eval_set, oov)
    flags = match_detections(dets, oov_gt, eval_set.iou_threshold)
    return int(sum(flags))


def _oov_recall_at(eval_set: EvalSet, iou_threshold: float) -> float:
    oov = eval_set.oov_class
    dets = _class_pool(eval_set, oov)
    gts = _class_gt(eval_set, oov)
    flags = match_detections(dets, gts, iou_threshold)
    return sum(flags) / len(gts)


def oov_recall(eval_set: EvalSet) -> tuple[float, float]:
    """(recall, average recall) of OOV ground truth, as percentages.

    Recall counts OOV ground truth matched by OOV-labeled detections at the
    evaluation threshold; average recall repeats the count over the
    0.50:0.05:0.95 IoU sweep and averages.
    """
    if not _class_gt(eval_set, eval_set.oov_class):
        raise ValueError("no OOV ground truth present")
    r = _oov_recall_at(eval_set, eval_set.iou_threshold) * 100.0
    ar = float(np.mean([_oov_recall_at(eval_set, t) for t in AR_IOU_SWEEP])) * 100.0
    return r, ar


def _mean_ap(aps: dict[int, tuple[float, int, int]], classes: Iterable[int]) -> float:
    """Mean AP over classes, skipping classes with neither GT nor detections."""
    vals = [aps[c][0] for c in classes if aps[c][1] > 0 or aps[c][2] > 0]
    return float(np.mean(vals)) if vals else 0.0


def full_report(eval_set: EvalSet, split: ClassSplit) -> MetricsReport:
    """Assemble the complete metric suite for one evaluation set."""
    if split.oov != eval_set.oov_class:
        raise ValueError(
            f"split OOV index {split.oov} does not match evaluation set "
            f"({eval_set.oov_class})"
        )
    aps = {c: _class_ap(eval_set, c) for c in range(eval_set.n_classes)}
    r, ar = oov_recall(eval_set)
    return MetricsReport(
        map_iv=_mean_ap(aps, split.iv_classes) * 100.0,
        map_oov=aps[split.oov][0] * 100.0,
        map_seen=_mean_ap(aps, split.seen) * 100.0,
        map_unseen=_mean_ap(aps, split.unseen) * 100.0,
        r_oov=r,
        ar_oov=ar,
        wi=wilderness_impact(eval_set),
        aose=absolute_open_set_error(eval_set),
    )
