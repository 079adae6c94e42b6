"""Detection and total losses."""

from __future__ import annotations

import numpy as np

from ..diffcore import Tensor, ops
from .boxes import Box3D, rotated_iou_3d, wrap_angle
from .head import decode_distances

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
YAW_EPS = 1e-6


def bce_with_logits(logits, targets):
    """Elementwise -[t log s(x) + (1 - t) log s(-x)]."""
    t = np.asarray(targets, dtype=np.float64)
    return ops.neg(ops.add(ops.mul(ops.log_sigmoid(logits), t),
                           ops.mul(ops.log_sigmoid(ops.neg(logits)), 1.0 - t)))


def loss_center(logits, targets, mask):
    """BCE on centerness logits averaged over positive voxels."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    flat = ops.reshape(logits, (-1,))
    if flat.shape[0] != mask.shape[0] or np.shape(targets)[0] != mask.shape[0]:
        raise ValueError(f"loss_center: shape mismatch {logits.shape} vs {mask.shape}")
    g = logits.graph
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        return g.constant(0.0)
    sel = ops.take(flat, idx)
    return ops.mean(bce_with_logits(sel, np.asarray(targets)[idx]))


def loss_cls(class_logits, class_targets, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Sigmoid focal loss summed and divided by max(1, #positives).

    ``class_logits`` is [K, M]; ``class_targets`` [M] with -1 for background.
    """
    ct = np.asarray(class_targets).reshape(-1)
    K, M = class_logits.shape
    if M != ct.shape[0]:
        raise ValueError(f"loss_cls: shape mismatch {class_logits.shape} vs {ct.shape}")
    onehot = np.zeros((K, M))
    pos = ct >= 0
    onehot[ct[pos], np.nonzero(pos)[0]] = 1.0
    p = ops.sigmoid(class_logits)
    p_t = ops.add(ops.mul(p, onehot), ops.mul(ops.sub(1.0, p), 1.0 - onehot))
    mod = ops.square(ops.sub(1.0, p_t)) if gamma == 2.0 else None
    if mod is None:
        raise NotImplementedError("only gamma = 2 is supported")
    a_t = alpha * onehot + (1.0 - alpha) * (1.0 - onehot)
    per = ops.mul(ops.mul(bce_with_logits(class_logits, onehot), mod), a_t)
    return ops.div(ops.sum(per), float(max(1, int(pos.sum()))))


def aligned_iou(pred_dist, target_dist):
    """IoU of two boxes sharing an anchor point and axes, from face distances [N, 6]."""
    inter = None
    vol_p = vol_t = None
    for a in range(3):
        lo = ops.minimum(pred_dist[:, 2 * a], target_dist[:, 2 * a])
        hi = ops.minimum(pred_dist[:, 2 * a + 1], target_dist[:, 2 * a + 1])
        ext = ops.add(lo, hi)
        ep = ops.add(pred_dist[:, 2 * a], pred_dist[:, 2 * a + 1])
        et = ops.add(target_dist[:, 2 * a], target_dist[:, 2 * a + 1])
        inter = ext if inter is None else ops.mul(inter, ext)
        vol_p = ep if vol_p is None else ops.mul(vol_p, ep)
        vol_t = et if vol_t is None else ops.mul(vol_t, et)
    return ops.div(inter, ops.sub(ops.add(vol_p, vol_t), inter))


def loss_bbox(reg, targets, points=None):
    """Mean over positives of 1 - rotated IoU.

    ``reg`` is the flattened [7, M] regression Tensor. The forward value is
    the exact rotated IoU; gradients come from the aligned face-distance
    IoU scaled by (1 + cos 2*dyaw) / 2, which equals the exact IoU when the
    yaws agree.
    """
    pos = np.nonzero(targets.positive)[0]
    g = reg.graph
    if len(pos) == 0:
        return g.constant(0.0)
    pr = ops.transpose(ops.take(reg, pos, axis=1), (1, 0))  # [P, 7]
    pd = pr[:, 0:6]
    pyaw = ops.reshape(pr[:, 6:7], (-1,))
    td = g.constant(targets.distances[pos])
    tyaw = targets.yaw[pos]
    surrogate = aligned_iou(pd, td)
    near = np.abs([wrap_angle(d) for d in pyaw.data - tyaw]) < YAW_EPS
    factor = ops.mul(ops.add(ops.cos(ops.mul(ops.sub(pyaw, tyaw), 2.0)), 1.0), 0.5)
    surrogate = ops.mul(surrogate, factor)
    pts = targets.points[pos] if points is None else points
    exact = surrogate.data.copy()
    pc, pdims = decode_distances(pts, pd.data, pyaw.data)
    tc, tdims = decode_distances(pts, targets.distances[pos], tyaw)
    for i in np.nonzero(~near)[0]:
        if np.any(pdims[i] <= 0):
            exact[i] = 0.0
            continue
        exact[i] = rotated_iou_3d(Box3D(pc[i], pdims[i], pyaw.data[i]), Box3D(tc[i], tdims[i], tyaw[i]))
    iou = ops.straight_through(surrogate, exact)
    return ops.mean(ops.sub(1.0, iou))


def box_iou_loss(pred_boxes, target_boxes):
    """Mean of 1 - rotated IoU over paired boxes (value only)."""
    if len(pred_boxes) != len(target_boxes):
        raise ValueError(f"box_iou_loss: {len(pred_boxes)} predictions vs {len(target_boxes)} targets")
    if not pred_boxes:
        return 0.0
    return float(np.mean([1.0 - rotated_iou_3d(a, b) for a, b in zip(pred_boxes, target_boxes)]))


def total_loss(center, bbox, cls, render=None, lambda_render=1.0):
    """L_center + L_bbox + L_cls + lambda_render * L_render."""
    if lambda_render < 0:
        raise ValueError("lambda_render must be >= 0")
    det = ops.add(ops.add(center, bbox), cls) if isinstance(center, Tensor) else center + bbox + cls
    if render is None:
        return det
    if isinstance(det, Tensor):
        return ops.add(det, ops.mul(render, float(lambda_render)))
    return det + lambda_render * render
