"""Detection and classification metrics.

AP is the all-point interpolated area under the precision envelope. mAP is
the unweighted mean of per-class AP over classes that occur in the ground
truth; classes without ground truth are excluded and listed.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ddx.distortions import DISTORTIONS, DistortionClass
from ddx.imgcore import Rect

DEFAULT_THRESHOLDS = (0.5, 0.75, 0.9)
DEFAULT_SIZE_EDGES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def iou(a: Rect, b: Rect) -> float:
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union


def _rect(obj) -> Rect:
    return obj if isinstance(obj, Rect) else obj.rect


def match_detections(preds: Sequence, gts: Sequence, iou_thresh: float) -> tuple[list[bool], list[bool]]:
    """Greedy matching of one image's same-class predictions.

    Predictions are visited by descending score (ties in input order); each
    takes the still-unmatched ground truth with the highest IoU if that IoU
    reaches ``iou_thresh``. Returns TP flags aligned with ``preds`` and
    matched flags aligned with ``gts``.
    """
    gt_rects = [_rect(g) for g in gts]
    tp = [False] * len(preds)
    matched = [False] * len(gts)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    for i in order:
        best, best_j = -1.0, -1
        pr = _rect(preds[i])
        for j, g in enumerate(gt_rects):
            if matched[j]:
                continue
            v = iou(pr, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            matched[best_j] = True
            tp[i] = True
    return tp, matched


def precision_envelope_area(tp_sorted: Sequence[bool], n_gt: int) -> float:
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    if len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_sorted, dtype=np.float64))
    rank = np.arange(1, len(tp_sorted) + 1)
    precision = tp / rank
    recall = tp / n_gt
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def average_precision(preds: Sequence[tuple[str, object]], gts: Mapping[str, Sequence],
                      iou_thresh: float) -> float:
    """AP of one class over a dataset.

    ``preds`` is a sequence of ``(image_id, box)`` with ``box.score``;
    ``gts`` maps image ids to that class's ground-truth rects/annotations.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ValueError("class has no ground truth; AP undefined")
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)
    matched = {k: [False] * len(v) for k, v in gts.items()}
    gt_rects = {k: [_rect(g) for g in v] for k, v in gts.items()}
    flags = []
    for i in order:
        image, box = preds[i]
        pr = _rect(box)
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_rects.get(image, ())):
            if matched[image][j]:
                continue
            v = iou(pr, g)
            if v > best:
                best, best_j = v, j
        hit = best_j >= 0 and best >= iou_thresh
        if hit:
            matched[image][best_j] = True
        flags.append(hit)
    return precision_envelope_area(flags, n_gt)


@dataclass
class DetectionResult:
    thresholds: tuple[float, ...]
    ap: dict[float, dict[DistortionClass, float]] = field(default_factory=dict)
    mean_ap: dict[float, float] = field(default_factory=dict)
    excluded: list[DistortionClass] = field(default_factory=list)

    def row(self) -> list[float]:
        return [self.mean_ap[t] for t in self.thresholds]


def _by_class(items: Mapping[str, Iterable], key) -> dict[DistortionClass, dict[str, list]]:
    out: dict[DistortionClass, dict[str, list]] = {}
    for image, objs in items.items():
        for o in objs:
            out.setdefault(DistortionClass.parse(key(o)), {}).setdefault(image, []).append(o)
    return out


def mean_ap(gts: Mapping[str, Sequence], preds: Mapping[str, Sequence],
            thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> DetectionResult:
    """Per-threshold mAP.

    ``gts`` maps image ids to region annotations (``.rect``, ``.spec.cls``);
    ``preds`` maps image ids to scored boxes (``.rect``, ``.cls``, ``.score``).
    Predictions for images absent from ``gts`` are false positives.
    """
    gt_cls = _by_class(gts, lambda g: g.spec.cls)
    if not gt_cls:
        raise ValueError("no ground-truth regions to evaluate")
    pred_cls = _by_class(preds, lambda p: p.cls)
    result = DetectionResult(tuple(thresholds))
    result.excluded = [c for c in DISTORTIONS if c not in gt_cls]
    for t in thresholds:
        per = {}
        for c in DISTORTIONS:
            if c not in gt_cls:
                continue
            flat = [(image, b) for image in preds for b in pred_cls.get(c, {}).get(image, ())]
            per[c] = average_precision(flat, gt_cls[c], t)
        result.ap[t] = per
        result.mean_ap[t] = float(np.mean(list(per.values())))
    return result


def classification_accuracy(truth: Sequence, predicted: Sequence) -> tuple[float, np.ndarray]:
    """Accuracy and 9x9 confusion matrix (rows = true class, columns = predicted)."""
    if len(truth) != len(predicted):
        raise ValueError("truth and predictions differ in length")
    cm = np.zeros((len(DistortionClass), len(DistortionClass)), dtype=np.int64)
    for t, p in zip(truth, predicted):
        cm[int(DistortionClass.parse(t)), int(DistortionClass.parse(p))] += 1
    total = int(cm.sum())
    acc = float(np.trace(cm) / total) if total else math.nan
    return acc, cm


@dataclass
class SizeBucket:
    lo: float
    hi: float
    n_gt: int
    n_matched: int

    @property
    def recall(self) -> float | None:
        return self.n_matched / self.n_gt if self.n_gt else None


def size_ratio(rect: Rect, image_size: int) -> float:
    return math.sqrt(rect.area) / image_size


def size_bucketed_recall(gts: Mapping[str, Sequence], preds: Mapping[str, Sequence],
                         image_sizes: Mapping[str, int], iou_thresh: float = 0.9,
                         edges: Sequence[float] = DEFAULT_SIZE_EDGES) -> list[SizeBucket]:
    """Recall of ground-truth regions grouped by ``sqrt(area) / image_size``.

    Matching is per image and class as in :func:`match_detections`. Buckets
    are ``[e_i, e_{i+1})`` with the last one closed; ratios outside the edges
    are clamped into the first/last bucket.
    """
    edges = list(edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be increasing with at least two values")
    n_gt = [0] * (len(edges) - 1)
    n_hit = [0] * (len(edges) - 1)
    for image, regions in gts.items():
        size = image_sizes[image]
        image_preds = preds.get(image, ())
        for c in {DistortionClass.parse(r.spec.cls) for r in regions}:
            cg = [r for r in regions if r.spec.cls == c]
            cp = [p for p in image_preds if DistortionClass.parse(p.cls) == c]
            _, matched = match_detections(cp, cg, iou_thresh)
            for r, m in zip(cg, matched):
                ratio = size_ratio(r.rect, size)
                k = int(np.searchsorted(edges, ratio, side="right")) - 1
                k = min(max(k, 0), len(edges) - 2)
                n_gt[k] += 1
                n_hit[k] += int(m)
    return [SizeBucket(edges[i], edges[i + 1], n_gt[i], n_hit[i]) for i in range(len(edges) - 1)]


def size_recall_csv(buckets: Sequence[SizeBucket]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_lo", "bucket_hi", "n_gt", "n_matched", "recall"])
    for b in buckets:
        w.writerow([f"{b.lo:g}", f"{b.hi:g}", b.n_gt, b.n_matched,
                    "" if b.recall is None else f"{b.recall:.6f}"])
    return buf.getvalue()


VARIANT_ORDER = ("basic", "difficult")


def transfer_matrix(predictors: Mapping[str, Callable], test_sets: Mapping[str, tuple],
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """mAP for every train-variant x test-variant pair, shape ``(2, 2, len(thresholds))``.

    ``predictors[train_variant](image_id)`` returns scored boxes for an image of
    any test set; ``test_sets[test_variant]`` is ``(gts, image_ids)``.
    """
    for v in VARIANT_ORDER:
        if v not in predictors:
            raise KeyError(f"missing predictor for train variant {v!r}")
        if v not in test_sets:
            raise KeyError(f"missing test set for variant {v!r}")
    table = np.zeros((2, 2, len(thresholds)))
    for i, train_v in enumerate(VARIANT_ORDER):
        for j, test_v in enumerate(VARIANT_ORDER):
            gts, image_ids = test_sets[test_v]
            preds = {img: predictors[train_v](img) for img in image_ids}
            table[i, j] = mean_ap(gts, preds, thresholds).row()
    return table


# ---------------------------------------------------------------------------
# text output


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[c if isinstance(c, str) else f"{c:.3f}" for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def map_table(rows: Sequence[tuple[str, Sequence[float]]], thresholds: Sequence[float]) -> str:
    return format_table(["Method"] + [f"@{t:g}" for t in thresholds], [[name, *vals] for name, vals in rows])


def transfer_table(table: np.ndarray, thresholds: Sequence[float]) -> str:
    rows = []
    for i, train_v in enumerate(VARIANT_ORDER):
        for j, test_v in enumerate(VARIANT_ORDER):
            rows.append((f"{train_v} -> {test_v}", list(table[i, j])))
    rows.sort(key=lambda r: (r[0].split(" -> ")[1] != "basic", r[0]))
    return format_table(["Train data -> Test data"] + [f"@{t:g}" for t in thresholds],
                        [[n, *v] for n, v in rows])


def confusion_table(cm: np.ndarray) -> str:
    names = [c.slug for c in DistortionClass]
    return format_table(["true\\pred"] + names, [[names[i], *[str(int(v)) for v in cm[i]]] for i in range(len(names))])


# ---------------------------------------------------------------------------
# predictions interchange (one JSON object per line)


def write_detection_predictions(preds: Mapping[str, Sequence], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image, boxes in preds.items():
            fh.write(json.dumps({"image": image, "boxes": [
                {"class": DistortionClass.parse(b.cls).name, "code": int(b.cls), "score": float(b.score),
                 "x": b.rect.x, "y": b.rect.y, "w": b.rect.w, "h": b.rect.h} for b in boxes]}, sort_keys=True) + "\n")


def read_detection_predictions(path: str | os.PathLike) -> dict[str, list]:
    from ddx.detector import ScoredBox

    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
                out[d["image"]] = [ScoredBox(Rect(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"])),
                                             DistortionClass.parse(b["class"]), float(b["score"]))
                                   for b in d["boxes"]]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed prediction record ({exc})") from None
    return out


def write_class_predictions(preds: Mapping[str, tuple], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image, (cls, conf) in preds.items():
            cls = DistortionClass.parse(cls)
            fh.write(json.dumps({"image": image, "class": cls.name, "code": int(cls),
                                 "confidence": float(conf)}, sort_keys=True) + "\n")


def read_class_predictions(path: str | os.PathLike) -> dict[str, tuple[DistortionClass, float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
                out[d["image"]] = (DistortionClass.parse(d["class"]), float(d["confidence"]))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed prediction record ({exc})") from None
    return out
