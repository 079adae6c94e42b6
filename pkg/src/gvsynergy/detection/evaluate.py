"""Average precision over rotated 3D IoU, plus CSV exchange formats."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .boxes import Box3D, rotated_iou_3d

PREDICTION_COLUMNS = ["scene_id", "class_id", "score", "cx", "cy", "cz", "l", "w", "h", "yaw"]
EVAL_COLUMNS = ["class_id", "AP"]


def average_precision(tp, n_gt):
    """Area under the monotone precision envelope of a ranked TP/FP list."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    # envelope: max precision at any recall >= r
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[:-1]))


def _match_class(preds, gts, iou_threshold):
    """Greedy one-to-one matching over (scene, box) lists sorted by score."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)  # stable: insertion order on ties
    used = {}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        scene, box = preds[i]
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gts.get(scene, [])):
            if used.get((scene, j)):
                continue
            iou = rotated_iou_3d(box, g)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            used[(scene, best_j)] = True
            tp[rank] = 1.0
    return tp


def per_class_ap(predictions, ground_truth, iou_threshold=0.25):
    """AP for every class with at least one ground-truth box.

    ``predictions`` and ``ground_truth`` map a scene id to a list of
    :class:`Box3D`; a plain list is treated as a single scene.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if not isinstance(predictions, dict):
        predictions = {0: list(predictions)}
    if not isinstance(ground_truth, dict):
        ground_truth = {0: list(ground_truth)}
    classes = sorted({b.class_id for boxes in ground_truth.values() for b in boxes})
    out = {}
    for k in classes:
        gts = {s: [b for b in boxes if b.class_id == k] for s, boxes in ground_truth.items()}
        n_gt = sum(len(v) for v in gts.values())
        preds = [(s, b) for s, boxes in predictions.items() for b in boxes if b.class_id == k]
        out[k] = average_precision(_match_class(preds, gts, iou_threshold), n_gt)
    return out


def eval_map(predictions, ground_truth, iou_threshold=0.25) -> float:
    aps = per_class_ap(predictions, ground_truth, iou_threshold)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def write_predictions_csv(path, predictions):
    """``predictions`` maps scene id -> list of Box3D."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PREDICTION_COLUMNS)
        for scene, boxes in predictions.items():
            for b in boxes:
                w.writerow([scene, b.class_id, repr(b.score), *map(repr, b.center), *map(repr, b.dims), repr(b.yaw)])


def read_predictions_csv(path):
    path = Path(path)
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(PREDICTION_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            box = Box3D((float(row["cx"]), float(row["cy"]), float(row["cz"])),
                        (float(row["l"]), float(row["w"]), float(row["h"])),
                        float(row["yaw"]), int(row["class_id"]), float(row["score"]))
            scene = row["scene_id"]
            out.setdefault(int(scene) if scene.lstrip("-").isdigit() else scene, []).append(box)
    return out


def write_eval_csv(path, aps):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for k, ap in sorted(aps.items()):
            w.writerow([k, f"{ap:.6f}"])
        w.writerow(["mAP", f"{np.mean(list(aps.values())) if aps else 0.0:.6f}"])
