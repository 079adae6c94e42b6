"""Tiny trainable image encoder standing in for a pretrained backbone.

Three conv2d layers (strides 2, 2, 1) give patch tokens at 1/4 resolution;
their mean is the class token. Class-token fusion produces the image
features f_i, and a two-layer conv head turns those into the depth
features F_i.
"""

from __future__ import annotations

import numpy as np

from ..diffcore import ops
from ..lifting import fuse_class_token


def encoder_param_shapes(feat_channels: int, depth_channels: int, hidden=(16, 24)) -> dict:
    h1, h2 = hidden
    d = feat_channels
    return {
        "enc.c1.w": (h1, 3, 3, 3), "enc.c1.b": (h1,),
        "enc.c2.w": (h2, h1, 3, 3), "enc.c2.b": (h2,),
        "enc.c3.w": (d, h2, 3, 3), "enc.c3.b": (d,),
        "proj.w": (2 * d, d), "proj.b": (d,),
    }


def depth_feature_shapes(feat_channels: int, depth_channels: int) -> dict:
    return {
        "dfeat.c1.w": (depth_channels, feat_channels, 3, 3), "dfeat.c1.b": (depth_channels,),
        "dfeat.c2.w": (depth_channels, depth_channels, 3, 3), "dfeat.c2.b": (depth_channels,),
    }


def image_features(images, p):
    """images: Tensor [n, 3, H, W] -> f: Tensor [n, D, H/4, W/4]."""
    n, _, H, W = images.shape
    if H % 4 or W % 4:
        raise ValueError(f"image size {W}x{H} is not divisible by 4")
    x = ops.relu(ops.conv2d(images, p["enc.c1.w"], p["enc.c1.b"], stride=2))
    x = ops.relu(ops.conv2d(x, p["enc.c2.w"], p["enc.c2.b"], stride=2))
    x = ops.conv2d(x, p["enc.c3.w"], p["enc.c3.b"])
    d, h, w = x.shape[1:]
    feats = []
    for i in range(n):
        tokens = ops.transpose(ops.reshape(x[i], (d, h * w)), (1, 0))
        cls = ops.mean(tokens, axis=0, keepdims=True)
        fused = fuse_class_token(tokens, cls, p["proj.w"], p["proj.b"])
        feats.append(ops.reshape(ops.transpose(fused, (1, 0)), (1, -1, h, w)))
    return ops.concat(feats, axis=0)


def depth_features(f, p):
    """f: [n, D, h, w] -> F: [n, C_F, h, w]."""
    x = ops.relu(ops.conv2d(f, p["dfeat.c1.w"], p["dfeat.c1.b"]))
    return ops.relu(ops.conv2d(x, p["dfeat.c2.w"], p["dfeat.c2.b"]))


def encode_images(scene, p, graph, with_depth_features=True):
    """Forward the encoder stack on every view of ``scene``.

    Returns ``(f, F)`` as Tensors; ``F`` is None when not requested.
    """
    imgs = graph.constant(np.stack(scene.images) - 0.5)
    f = image_features(imgs, p)
    F = depth_features(f, p) if with_depth_features else None
    return f, F
