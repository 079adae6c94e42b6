"""Boxes, detection head, losses and evaluation."""

from .boxes import Box3D, bev_intersection, clip_polygon, polygon_area, rotated_iou_3d, wrap_angle
from .evaluate import (average_precision, eval_map, per_class_ap, read_predictions_csv,
                       write_eval_csv, write_predictions_csv)
from .head import (HeadOutput, Targets, assign_targets, boxes_from_targets, centerness_target,
                   decode_boxes, decode_distances, encode_box, flatten_outputs, fpn_forward,
                   head_forward, head_shapes, level_grids, neck_shapes, nms_rotated)
from .losses import (aligned_iou, bce_with_logits, box_iou_loss, loss_bbox, loss_center, loss_cls,
                     total_loss)

__all__ = [
    "Box3D", "bev_intersection", "clip_polygon", "polygon_area", "rotated_iou_3d", "wrap_angle",
    "average_precision", "eval_map", "per_class_ap", "read_predictions_csv", "write_eval_csv",
    "write_predictions_csv", "HeadOutput", "Targets", "assign_targets", "boxes_from_targets",
    "centerness_target", "decode_boxes", "decode_distances", "encode_box", "flatten_outputs",
    "fpn_forward", "head_forward", "head_shapes", "level_grids", "neck_shapes", "nms_rotated",
    "aligned_iou", "bce_with_logits", "box_iou_loss", "loss_bbox", "loss_center", "loss_cls",
    "total_loss",
]
