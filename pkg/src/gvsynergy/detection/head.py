"""FPN-lite neck, anchor-free three-branch head, target assignment and
box decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Tensor, ops
from ..lifting import VoxelGridSpec
from .boxes import Box3D, rotated_iou_3d

SCORE_THRESHOLD = 0.05
NMS_IOU = 0.25
PRE_NMS_TOP_K = 200


def neck_shapes(channels):
    c = channels
    return {"neck.lat.w": (c, c, 3, 3, 3), "neck.lat.b": (c,),
            "neck.down.w": (c, c, 3, 3, 3), "neck.down.b": (c,),
            "neck.smooth.w": (c, c, 3, 3, 3), "neck.smooth.b": (c,)}


def head_shapes(channels, n_classes):
    c = channels
    return {"head.ctr.w": (1, c, 3, 3, 3), "head.ctr.b": (1,),
            "head.reg.w": (7, c, 3, 3, 3), "head.reg.b": (7,),
            "head.cls.w": (n_classes, c, 3, 3, 3), "head.cls.b": (n_classes,)}


def fpn_forward(v_e, p):
    """Two levels: full resolution and a stride-2 level, with top-down
    nearest upsampling added back into level 0 before a smoothing conv."""
    c0 = ops.relu(ops.conv3d(v_e, p["neck.lat.w"], p["neck.lat.b"]))
    c1 = ops.relu(ops.conv3d(c0, p["neck.down.w"], p["neck.down.b"], stride=2))
    dims = c0.shape[1:]
    half = tuple(max(1, d // 2) for d in dims)
    if c1.shape[1:] != half:
        c1 = c1[(np.s_[:],) + tuple(np.s_[:h] for h in half)]
    top = ops.upsample_nearest(c1, dims)
    p0 = ops.conv3d(ops.add(c0, top), p["neck.smooth.w"], p["neck.smooth.b"])
    return [p0, c1]


@dataclass
class HeadOutput:
    centerness: object  # [1, X, Y, Z] logits
    regression: object  # [7, X, Y, Z]: 6 face distances (after exp), raw yaw
    class_logits: object  # [K, X, Y, Z]


def head_forward(levels, p):
    outs = []
    for x in levels:
        ctr = ops.conv3d(x, p["head.ctr.w"], p["head.ctr.b"])
        reg = ops.conv3d(x, p["head.reg.w"], p["head.reg.b"])
        dist = ops.exp(reg[0:6])
        reg = ops.concat([dist, reg[6:7]], axis=0)
        cls = ops.conv3d(x, p["head.cls.w"], p["head.cls.b"])
        outs.append(HeadOutput(ctr, reg, cls))
    return outs


def level_grids(grid: VoxelGridSpec, n_levels=2):
    grids = [grid]
    for _ in range(n_levels - 1):
        grids.append(grids[-1].coarsen(2))
    return grids


def decode_distances(points, dist, yaw):
    """Centres and dims from face distances (-x, +x, -y, +y, -z, +z) in the
    yaw-rotated frame anchored at ``points`` [N, 3]."""
    dist = np.asarray(dist, dtype=np.float64)
    off = np.stack([(dist[:, 1] - dist[:, 0]) / 2, (dist[:, 3] - dist[:, 2]) / 2,
                    (dist[:, 5] - dist[:, 4]) / 2], axis=1)
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.stack([c * off[:, 0] - s * off[:, 1], s * off[:, 0] + c * off[:, 1], off[:, 2]], axis=1)
    dims = np.stack([dist[:, 0] + dist[:, 1], dist[:, 2] + dist[:, 3], dist[:, 4] + dist[:, 5]], axis=1)
    return np.asarray(points) + world, dims


def encode_box(points, box: Box3D):
    """Face distances of ``points`` [N, 3] to the faces of ``box``."""
    local = box.to_local(points)
    half = np.array(box.dims) / 2.0
    return np.stack([half[0] + local[:, 0], half[0] - local[:, 0],
                     half[1] + local[:, 1], half[1] - local[:, 1],
                     half[2] + local[:, 2], half[2] - local[:, 2]], axis=1)


def centerness_target(dist):
    """Geometric mean of the three min/max face-distance ratios."""
    r = [np.minimum(dist[:, 2 * a], dist[:, 2 * a + 1]) / np.maximum(dist[:, 2 * a], dist[:, 2 * a + 1])
         for a in range(3)]
    return np.cbrt(r[0] * r[1] * r[2])


@dataclass
class Targets:
    """Flattened over all levels (level 0 voxels first)."""

    points: np.ndarray  # [M, 3] voxel centres
    positive: np.ndarray  # [M] bool
    centerness: np.ndarray  # [M]
    distances: np.ndarray  # [M, 6]
    yaw: np.ndarray  # [M]
    class_id: np.ndarray  # [M], -1 for negatives
    box_index: np.ndarray  # [M], -1 for negatives

    @property
    def n_positive(self):
        return int(self.positive.sum())


def assign_targets(gt_boxes, grid: VoxelGridSpec, n_levels=2) -> Targets:
    """Voxels whose centres lie inside a box are positive for it; the
    smallest box wins overlaps."""
    pts = np.concatenate([g.centers().reshape(-1, 3) for g in level_grids(grid, n_levels)])
    m = len(pts)
    best = np.full(m, -1, dtype=np.int64)
    best_vol = np.full(m, np.inf)
    for k, box in enumerate(gt_boxes):
        inside = box.contains(pts) & (box.volume < best_vol)
        best[inside] = k
        best_vol[inside] = box.volume
    pos = best >= 0
    dist = np.zeros((m, 6))
    yaw = np.zeros(m)
    cls = np.full(m, -1, dtype=np.int64)
    ctr = np.zeros(m)
    for k, box in enumerate(gt_boxes):
        sel = best == k
        if not sel.any():
            continue
        dist[sel] = encode_box(pts[sel], box)
        yaw[sel] = box.yaw
        cls[sel] = box.class_id
        ctr[sel] = centerness_target(dist[sel])
    return Targets(pts, pos, ctr, dist, yaw, cls, best)


def flatten_outputs(outputs):
    """Concatenate per-level head outputs into [C, M] tensors."""
    def flat(t):
        return ops.reshape(t, (t.shape[0], -1))
    ctr = ops.concat([flat(o.centerness) for o in outputs], axis=1)
    reg = ops.concat([flat(o.regression) for o in outputs], axis=1)
    cls = ops.concat([flat(o.class_logits) for o in outputs], axis=1)
    return ctr, reg, cls


def _data(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nms_rotated(boxes, iou_threshold=NMS_IOU):
    """Greedy NMS; ``boxes`` must already be ordered by priority."""
    keep = []
    for b in boxes:
        if all(rotated_iou_3d(b, k) <= iou_threshold for k in keep):
            keep.append(b)
    return keep


def decode_boxes(outputs, grid: VoxelGridSpec, score_threshold=SCORE_THRESHOLD,
                 iou_threshold=NMS_IOU, top_k=PRE_NMS_TOP_K):
    """Scored boxes after thresholding and per-class greedy rotated NMS.

    Scores are sigmoid(centerness) * max_k sigmoid(class_k); ties are
    broken by the lower voxel linear index (level 0 first).
    """
    grids = level_grids(grid, len(outputs))
    pts = np.concatenate([g.centers().reshape(-1, 3) for g in grids])
    ctr = np.concatenate([_data(o.centerness).reshape(1, -1) for o in outputs], axis=1)[0]
    reg = np.concatenate([_data(o.regression).reshape(7, -1) for o in outputs], axis=1)
    cls = np.concatenate([_data(o.class_logits).reshape(_data(o.class_logits).shape[0], -1) for o in outputs], axis=1)
    probs = _sigmoid(cls)
    label = np.argmax(probs, axis=0)
    score = _sigmoid(ctr) * probs[label, np.arange(len(label))]
    cand = np.nonzero(score >= score_threshold)[0]
    cand = cand[np.lexsort((cand, -score[cand]))][:top_k]
    if len(cand) == 0:
        return []
    centers, dims = decode_distances(pts[cand], reg[:6, cand].T, reg[6, cand])
    boxes = []
    for i, c in enumerate(cand):
        if np.any(dims[i] <= 0) or not np.all(np.isfinite(dims[i])):
            continue
        boxes.append(Box3D(centers[i], dims[i], float(reg[6, c]), int(label[c]), float(score[c])))
    out = []
    for k in sorted({b.class_id for b in boxes}):
        out.extend(nms_rotated([b for b in boxes if b.class_id == k], iou_threshold))
    out.sort(key=lambda b: -b.score)
    return out


def boxes_from_targets(targets: Targets):
    """Decode ground-truth encodings back into boxes (one per positive voxel)."""
    sel = np.nonzero(targets.positive)[0]
    centers, dims = decode_distances(targets.points[sel], targets.distances[sel], targets.yaw[sel])
    return [Box3D(centers[i], dims[i], targets.yaw[s], targets.class_id[s]) for i, s in enumerate(sel)]
