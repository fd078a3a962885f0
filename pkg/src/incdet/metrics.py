"""Detection metrics: IoU, all-points AP, mAP and the incremental F1 score.

AP uses all-points interpolation (area under the monotone precision
envelope), not the legacy VOC-2007 11-point rule, so absolute numbers can
differ slightly from old VOC tooling.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AnnotationParseError, ConfigurationError

Box = tuple[float, float, float, float]

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def _check_box(box) -> None:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {tuple(box)}")
    if not all(math.isfinite(v) for v in box):
        raise ValueError(f"non-finite box {tuple(box)}")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        _check_box(self.box)
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    _check_box(box_a)
    _check_box(box_b)
    iw = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    ih = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return float(inter / (area_a + area_b - inter))


def sort_predictions(preds: Sequence[DetectionRecord]) -> list[DetectionRecord]:
    """Stable order: descending score, then image id, then insertion index."""
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, str(preds[k].image_id), k))
    return [preds[k] for k in order]


def match_predictions(preds, gts: Mapping[str, Sequence[Box]], iou_threshold: float) -> list[bool]:
    """Greedy TP/FP labelling of predictions already in ranked order.

    Each prediction is compared against the ground truth of its own image with
    the highest IoU; it is a true positive when that IoU reaches the threshold
    and the ground truth has not been claimed by a higher-ranked prediction.
    """
    claimed = {img: [False] * len(boxes) for img, boxes in gts.items()}
    labels = []
    for p in preds:
        boxes = gts.get(p.image_id, ())
        best, best_k = -1.0, -1
        for k, g in enumerate(boxes):
            o = iou(p.box, g)
            if o > best:
                best, best_k = o, k
        if best_k >= 0 and best >= iou_threshold and not claimed[p.image_id][best_k]:
            claimed[p.image_id][best_k] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def average_precision(preds: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]],
                      iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP for one class.

    ``preds`` are detections of a single class; ``gts`` maps image id to the
    ground-truth boxes of that class. Returns 0.0 when there is no ground truth.
    """
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0 or not preds:
        return 0.0
    ranked = sort_predictions(preds)
    labels = match_predictions(ranked, gts, iou_threshold)
    tp = np.cumsum(labels, dtype=np.int64)
    fp = np.cumsum([not x for x in labels], dtype=np.int64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    steps = np.flatnonzero(recall != prev)
    return float(math.fsum((recall[k] - prev[k]) * envelope[k] for k in steps))


def mean_ap(per_class_ap: Mapping[int, float], class_ids: Iterable[int]) -> float:
    ids = list(class_ids)
    if not ids:
        raise ValueError("mean_ap needs at least one class")
    return float(np.mean([per_class_ap[c] for c in ids]))


def f1i(p_old: float, p_new: float) -> float:
    """Harmonic mean of old-class and new-class mAP; 0 when both are 0."""
    for name, v in (("p_old", p_old), ("p_new", p_new)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name}={v} outside [0, 1]")
    if p_old + p_new == 0:
        return 0.0
    return 2.0 * p_old * p_new / (p_old + p_new)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    overall_map: float
    p_old: float | None
    p_new: float | None
    f1i: float | None
    iou_thresholds: list[float]
    class_names: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "overall_map": self.overall_map,
            "p_old": self.p_old,
            "p_new": self.p_new,
            "f1i": self.f1i,
            "iou_thresholds": list(self.iou_thresholds),
            "class_names": list(self.class_names),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_class_ap={int(k): float(v) for k, v in d["per_class_ap"].items()},
            overall_map=float(d["overall_map"]),
            p_old=None if d["p_old"] is None else float(d["p_old"]),
            p_new=None if d["p_new"] is None else float(d["p_new"]),
            f1i=None if d["f1i"] is None else float(d["f1i"]),
            iou_thresholds=[float(t) for t in d["iou_thresholds"]],
            class_names=list(d.get("class_names", [])),
            provenance=dict(d.get("provenance", {})),
        )


def _group_gts(gts, class_id):
    out: dict[str, list[Box]] = {}
    for image_id, anns in gts.items():
        out[image_id] = [tuple(b) for c, b in anns if c == class_id]
    return out


def evaluate_report(preds: Sequence[DetectionRecord], gts: Mapping[str, Sequence[tuple[int, Box]]],
                    old_class_ids: Iterable[int], new_class_ids: Iterable[int],
                    thresholds: Sequence[float] = (0.5,), class_names: Sequence[str] = ()) -> EvalReport:
    """Evaluate detections against ground truth split into old and new classes.

    ``gts`` maps image id to a list of ``(class_id, box)``. Per-class AP is
    averaged over ``thresholds``. With no old classes (the base step) P_o and
    F1^i are left as ``None``.
    """
    old = sorted(set(old_class_ids))
    new = sorted(set(new_class_ids))
    if set(old) & set(new):
        raise ConfigurationError(f"old and new class sets overlap: {sorted(set(old) & set(new))}")
    if not new and not old:
        raise ConfigurationError("no classes to evaluate")
    thresholds = [float(t) for t in thresholds]
    by_class: dict[int, list[DetectionRecord]] = {c: [] for c in old + new}
    for p in preds:
        if p.class_id in by_class:
            by_class[p.class_id].append(p)
    per_class = {}
    for c in old + new:
        g = _group_gts(gts, c)
        per_class[c] = float(np.mean([average_precision(by_class[c], g, t) for t in thresholds]))
    overall = mean_ap(per_class, old + new)
    p_new = mean_ap(per_class, new) if new else None
    p_old = mean_ap(per_class, old) if old else None
    score = f1i(p_old, p_new) if (old and new) else None
    return EvalReport(per_class, overall, p_old, p_new, score, thresholds, list(class_names))


def write_detections(path, records: Iterable[DetectionRecord], class_names: Sequence[str]) -> None:
    """One line per record: image id, class name, score, x_min, y_min, x_max, y_max."""
    lines = []
    for r in records:
        x0, y0, x1, y1 = r.box
        lines.append(f"{r.image_id} {class_names[r.class_id]} {r.score!r} {x0!r} {y0!r} {x1!r} {y1!r}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path, class_names: Sequence[str]) -> list[DetectionRecord]:
    index = {n: k for k, n in enumerate(class_names)}
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7 or parts[1] not in index:
            raise AnnotationParseError(f"{path}:{lineno}: malformed detection line {line!r}")
        try:
            vals = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise AnnotationParseError(f"{path}:{lineno}: {exc}") from None
        out.append(DetectionRecord(parts[0], index[parts[1]], vals[0], tuple(vals[1:])))
    return out


REPORT_FIELDS = ("per_class_ap", "overall_map", "p_old", "p_new", "f1i", "iou_thresholds")


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> EvalReport:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: not a report file ({exc})") from None
    for name in REPORT_FIELDS:
        if name not in d:
            raise AnnotationParseError(f"{path}: missing field '{name}'")
    try:
        return EvalReport.from_dict(d)
    except (TypeError, ValueError, AttributeError) as exc:
        raise AnnotationParseError(f"{path}: bad field value ({exc})") from None
