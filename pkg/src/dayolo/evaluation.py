"""mAP@0.5 evaluation and image-level feature export."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .model import BoxAnnotation, Detector, ValidationError, box_iou, decode_detections


class ScoredBox(NamedTuple):
    class_id: int
    score: float
    box: tuple  # cx, cy, w, h


@dataclass
class MatchResult:
    """Every detection's outcome (score, class, matched, image) and GT counts per class."""
    records: list[tuple[float, int, bool, int]] = field(default_factory=list)
    gt_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class APResult:
    per_class: dict[int, float]
    mAP: float
    matches: MatchResult
    curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)

    def table(self, class_names: Sequence[str] | None = None) -> dict:
        name = (lambda c: class_names[c]) if class_names else str
        return {
            "ap": {name(c): ap for c, ap in sorted(self.per_class.items())},
            "mAP": self.mAP,
            "num_gt": {name(c): n for c, n in sorted(self.matches.gt_counts.items())},
        }


def match_detections(detections: Sequence[Sequence], ground_truths: Sequence[Sequence[BoxAnnotation]],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching by descending score.

    Ties are broken by image index, then box coordinates, so the outcome does not
    depend on list order.  A detection takes the highest-IoU unmatched ground
    truth of its class; it is a true positive if that IoU reaches the threshold.
    """
    if len(detections) != len(ground_truths):
        raise ValidationError(
            f"{len(detections)} detection lists for {len(ground_truths)} images")
    result = MatchResult()
    gts_by_img_cls: dict[tuple[int, int], list[tuple]] = defaultdict(list)
    for i, gts in enumerate(ground_truths):
        for g in gts:
            gts_by_img_cls[(i, g.class_id)].append((g.cx, g.cy, g.w, g.h))
            result.gt_counts[g.class_id] = result.gt_counts.get(g.class_id, 0) + 1
    flat = []
    for i, dets in enumerate(detections):
        for d in dets:
            s = float(d.score)
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"detection score {s} outside [0, 1]")
            flat.append((-s, i, tuple(float(v) for v in d.box), int(d.class_id)))
    flat.sort()
    used: dict[tuple[int, int], set[int]] = defaultdict(set)
    for neg_s, i, box, c in flat:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts_by_img_cls.get((i, c), ())):
            if j in used[(i, c)]:
                continue
            iou = box_iou(box, g)
            if iou > best_iou:
                best, best_iou = j, iou
        hit = best >= 0 and best_iou >= iou_threshold
        if hit:
            used[(i, c)].add(best)
        result.records.append((-neg_s, c, hit, i))
    return result


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections: Sequence[Sequence], ground_truths: Sequence[Sequence[BoxAnnotation]],
                      iou_threshold: float = 0.5) -> APResult:
    """Per-class AP and mAP over the classes that have ground truth.

    ``detections[i]`` lists objects with ``class_id``, ``score`` and ``box``
    attributes for image i.  Classes that only appear in detections add false
    positives nowhere else and get no AP entry.
    """
    matches = match_detections(detections, ground_truths, iou_threshold)
    per_class, curves = {}, {}
    for c, n_gt in sorted(matches.gt_counts.items()):
        hits = np.array([m for s, cls, m, _ in matches.records if cls == c], dtype=bool)
        tp = np.cumsum(hits)
        fp = np.cumsum(~hits)
        recall = tp / n_gt
        precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        per_class[c] = interpolated_ap(recall, precision) if len(hits) else 0.0
        curves[c] = (recall, precision)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, m, matches, curves)


# ---------------------------------------------------------------------------
# model-level evaluation

@torch.no_grad()
def predict(detector: Detector, samples, conf_threshold: float = 0.05, nms_iou: float = 0.5,
            batch_size: int = 16) -> list[list]:
    detector.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = torch.from_numpy(np.stack([s.pixels for s in chunk]))
        _, grids = detector(x)
        out.extend(decode_detections(grids, detector.anchors, conf_threshold, nms_iou))
    return out


def evaluate_detector(detector: Detector, dataset, conf_threshold: float = 0.05,
                      nms_iou: float = 0.5, iou_threshold: float = 0.5) -> APResult:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    if not dataset.annotated:
        raise ValidationError(f"dataset {dataset.name!r} carries no annotations")
    if dataset.num_classes != detector.config.num_classes:
        raise ValidationError(
            f"checkpoint predicts {detector.config.num_classes} classes, dataset has "
            f"{dataset.num_classes}")
    dets = predict(detector, dataset.samples, conf_threshold, nms_iou)
    return average_precision(dets, [s.annotations for s in dataset.samples], iou_threshold)


def evaluate_map(checkpoint, manifest, split: str | None = None, conf_threshold: float = 0.05,
                 nms_iou: float = 0.5) -> dict:
    """AP table (per-class AP and mAP) for a checkpoint on a dataset split."""
    from .checkpoint import load_checkpoint
    from .data import load_dataset

    detector, _, _ = load_checkpoint(checkpoint)
    ds = load_dataset(manifest, split)
    res = evaluate_detector(detector, ds, conf_threshold, nms_iou)
    table = res.table(ds.class_names)
    table["split"] = ds.name
    table["conf_threshold"] = conf_threshold
    table["nms_iou"] = nms_iou
    return table


def render_table(table: dict) -> str:
    names = list(table["ap"])
    width = max([len(n) for n in names] + [4])
    lines = [f"{'class':<{width}}  AP@0.5"]
    for n in names:
        lines.append(f"{n:<{width}}  {100 * table['ap'][n]:6.2f}")
    lines.append(f"{'mAP':<{width}}  {100 * table['mAP']:6.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# feature export

@dataclass
class FeatureRecord:
    image_id: str
    domain: int
    scale_index: int
    vector: np.ndarray


@torch.no_grad()
def feature_records(detector: Detector, datasets: Iterable, batch_size: int = 16) -> list[FeatureRecord]:
    """Spatially averaged tap features, one record per (image, scale)."""
    detector.eval()
    records = []
    for ds in datasets:
        for start in range(0, len(ds), batch_size):
            chunk = ds.samples[start:start + batch_size]
            x = torch.from_numpy(np.stack([s.pixels for s in chunk]))
            feats = detector.backbone(x)
            for k, f in enumerate(feats):
                pooled = f.mean(dim=(2, 3)).double().numpy()
                for s, v in zip(chunk, pooled):
                    records.append(FeatureRecord(f"{ds.name}/{s.id}", s.domain, k + 1, v))
    return records


def write_feature_table(records: Sequence[FeatureRecord], path) -> Path:
    path = Path(path)
    width = max((len(r.vector) for r in records), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "domain", "scale"] + [f"v{i}" for i in range(width)])
    for r in records:
        vals = [repr(float(v)) for v in r.vector] + [""] * (width - len(r.vector))
        w.writerow([r.image_id, r.domain, r.scale_index] + vals)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def read_feature_table(path) -> list[FeatureRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    out = []
    for row in rows[1:]:
        vec = np.array([float(v) for v in row[3:] if v != ""])
        out.append(FeatureRecord(row[0], int(row[1]), int(row[2]), vec))
    return out


def export_features(checkpoint, datasets, out_path) -> Path:
    from .checkpoint import load_checkpoint

    detector, _, _ = load_checkpoint(checkpoint)
    return write_feature_table(feature_records(detector, datasets), out_path)


def write_table_json(table: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return path
