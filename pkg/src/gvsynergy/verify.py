"""Finite-difference gradient suite over the primitives and learned blocks.

Each entry builds a small random problem and returns the per-input max
relative error from :func:`check_gradients`. Primitives must stay under
``PRIMITIVE_TOL`` and composite blocks under ``BLOCK_TOL``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .detection import (Box3D, assign_targets, flatten_outputs, fpn_forward, head_forward,
                        head_shapes, loss_bbox, loss_center, loss_cls, neck_shapes)
from .diffcore import check_gradients, ops
from .gaussianfield import GaussianSet, predict_depth, render
from .gaussianfield.field import (decode_latent, decoder_shapes, depth_head_shapes, gru_shapes,
                                  gru_update, regress_gaussians, regressor_shapes)
from .geometry import Camera
from .lifting import VoxelGridSpec, fuse_class_token, lift_features
from .scenegen.encoder import (depth_feature_shapes, depth_features, encoder_param_shapes,
                               image_features)
from .voxelfusion import (adaptive_weights, apply_occupancy, cross_enhance, encode_gaussian_volume,
                          fusion_net_shapes, gaussian_encoder_shapes, weight_net_shapes)

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4
STEP = 1e-6
MAX_COORDS = 12


@dataclass
class CheckResult:
    name: str
    kind: str
    errors: dict
    tolerance: float
    seconds: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _weights(rng, shapes, scale=0.3):
    return {k: rng.normal(0.0, scale, s) for k, s in shapes.items()}


def _sq(t):
    """Generic scalar readout with a fixed random projection."""
    r = np.random.default_rng(7).normal(size=t.shape)
    return ops.sum(ops.mul(t, r))


# --------------------------------------------------------------------------
# primitives

def _primitive_cases():
    r = np.random.default_rng(1)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    c = {
        "add": (lambda g, p: _sq(ops.add(p["a"], p["b"])), {"a": a, "b": b[:1]}),
        "sub": (lambda g, p: _sq(ops.sub(p["a"], p["b"])), {"a": a, "b": b}),
        "mul": (lambda g, p: _sq(ops.mul(p["a"], p["b"])), {"a": a, "b": b[:, :1]}),
        "div": (lambda g, p: _sq(ops.div(p["a"], p["b"])), {"a": a, "b": pos}),
        "neg": (lambda g, p: _sq(ops.neg(p["a"])), {"a": a}),
        "square": (lambda g, p: _sq(ops.square(p["a"])), {"a": a}),
        "minimum": (lambda g, p: _sq(ops.minimum(p["a"], p["b"])), {"a": a, "b": a + np.where(b > 0, 0.3, -0.3)}),
        "relu": (lambda g, p: _sq(ops.relu(p["a"])), {"a": _away_from_zero(r, (3, 4))}),
        "sigmoid": (lambda g, p: _sq(ops.sigmoid(p["a"])), {"a": 3 * a}),
        "log_sigmoid": (lambda g, p: _sq(ops.log_sigmoid(p["a"])), {"a": 3 * a}),
        "softplus": (lambda g, p: _sq(ops.softplus(p["a"])), {"a": 3 * a}),
        "tanh": (lambda g, p: _sq(ops.tanh(p["a"])), {"a": a}),
        "exp": (lambda g, p: _sq(ops.exp(p["a"])), {"a": a}),
        "log": (lambda g, p: _sq(ops.log(p["a"])), {"a": pos}),
        "cos": (lambda g, p: _sq(ops.cos(p["a"])), {"a": a}),
        "softmax": (lambda g, p: _sq(ops.softmax(p["a"], axis=0)), {"a": a}),
        "sum": (lambda g, p: _sq(ops.sum(p["a"], axis=1)), {"a": a}),
        "mean": (lambda g, p: _sq(ops.mean(p["a"], axis=0, keepdims=True)), {"a": a}),
        "concat": (lambda g, p: _sq(ops.concat([p["a"], p["b"]], axis=1)), {"a": a, "b": b}),
        "slice": (lambda g, p: _sq(p["a"][1:, ::2]), {"a": a}),
        "reshape": (lambda g, p: _sq(ops.reshape(p["a"], (2, 6))), {"a": a}),
        "transpose": (lambda g, p: _sq(ops.transpose(p["a"])), {"a": a}),
        "take": (lambda g, p: _sq(ops.take(p["a"], [0, 2, 2, 1], axis=1)), {"a": a}),
        "index_update": (lambda g, p: _sq(ops.index_update(p["a"], [2, 0], p["b"])), {"a": a, "b": b[:2]}),
        "matmul": (lambda g, p: _sq(ops.matmul(p["a"], p["b"])), {"a": a, "b": b.T}),
        "sparse_matmul": (lambda g, p: _sq(ops.sparse_matmul(sp.random(5, 3, 0.5, random_state=3, format="csr"), p["a"])),
                          {"a": a}),
        "upsample_nearest": (lambda g, p: _sq(ops.upsample_nearest(p["a"], (5, 4, 3))),
                             {"a": r.normal(size=(2, 2, 2, 1))}),
        "conv2d": (lambda g, p: _sq(ops.conv2d(p["x"], p["w"], p["b"], stride=2)),
                   {"x": r.normal(size=(2, 3, 5, 6)), "w": r.normal(size=(4, 3, 3, 3)), "b": r.normal(size=4)}),
        "conv3d": (lambda g, p: _sq(ops.conv3d(p["x"], p["w"], p["b"])),
                   {"x": r.normal(size=(2, 4, 3, 5)), "w": r.normal(size=(3, 2, 3, 3, 3)), "b": r.normal(size=3)}),
    }
    return c


# --------------------------------------------------------------------------
# learned blocks

def _toy_camera(eye, target, size=(8, 8)):
    return Camera.look_at(eye, target, focal=6.0, image_size=size)


def _block_cases():
    r = np.random.default_rng(2)
    C = 3
    cases = {}

    v = {"tok": r.normal(size=(5, 4)), **_weights(r, {"w": (8, 3), "b": (3,)})}
    v["b"] = v["b"] + 1.0  # keep the ReLU mostly active
    cases["class_token_projection"] = (
        lambda g, p: _sq(fuse_class_token(p["tok"], ops.mean(p["tok"], axis=0, keepdims=True), p["w"], p["b"])), v)

    v = {"img": r.uniform(-0.5, 0.5, size=(2, 3, 8, 8)), **_weights(r, encoder_param_shapes(C, C, (3, 4)))}
    cases["image_encoder"] = (lambda g, p: _sq(image_features(p["img"], p)), v)

    v = {"f": r.normal(size=(2, C, 4, 4)), **_weights(r, depth_feature_shapes(C, 4))}
    cases["depth_features"] = (lambda g, p: _sq(depth_features(p["f"], p)), v)

    cams = [_toy_camera((-1.0, 0.5, 1.2), (1.0, 1.0, 0.4)), _toy_camera((1.2, -1.5, 1.4), (1.0, 1.0, 0.4)),
            _toy_camera((3.0, 2.5, 1.0), (1.0, 1.0, 0.4))]
    grid = VoxelGridSpec((0.2, 0.2, 0.0), 0.4, (4, 4, 2))
    v = {"maps": r.normal(size=(3, C, 8, 8))}
    cases["lift"] = (lambda g, p: _sq(lift_features(p["maps"], cams, grid)), v)

    v = {"F": r.normal(size=(2, 4, 3, 3)), **_weights(r, depth_head_shapes(4, 5))}
    cases["depth_head"] = (lambda g, p: _sq(predict_depth(p["F"], p, 0.5, 4.0)), v)

    v = {"F": r.normal(size=(1, 4, 3, 3)), **_weights(r, regressor_shapes(4, 5))}
    fcam = [_toy_camera((-1.0, 0.5, 1.2), (1.0, 1.0, 0.4), (3, 3))]

    def regressor(g, p):
        s = regress_gaussians(p["F"], np.full((1, 3, 3), 2.0), fcam, p)[0]
        return ops.add(ops.add(_sq(s.opacity), _sq(s.weight)), _sq(s.latent))
    cases["gaussian_regressor"] = (regressor, v)

    v = {"h": r.normal(size=(4, 64)), **_weights(r, decoder_shapes(), 0.1)}
    cases["latent_decoder"] = (lambda g, p: _sq(decode_latent(p["h"], p)[0]), v)

    v = {"old": r.normal(size=(3, 64)), "new": r.normal(size=(3, 64)), "w": r.uniform(0.1, 0.9, 3),
         **_weights(r, gru_shapes(), 0.1)}
    cases["gru_cell"] = (lambda g, p: _sq(gru_update(p["old"], p["new"], ops.reshape(p["w"], (3, 1)), p)), v)

    v = {"vg": r.normal(size=(64, 3, 3, 2)), **_weights(r, gaussian_encoder_shapes(C), 0.1)}
    occ = (r.uniform(size=(3, 3, 2)) < 0.6).astype(float)
    cases["gaussian_encoder"] = (lambda g, p: _sq(apply_occupancy(encode_gaussian_volume(p["vg"], p), occ)), v)

    v = {"v": r.normal(size=(C, 3, 3, 2)), "vg": r.normal(size=(C, 3, 3, 2)), **_weights(r, weight_net_shapes(C))}
    cases["weight_net"] = (lambda g, p: _sq(ops.concat(list(adaptive_weights(p["v"], p["vg"], p)), axis=0)), v)

    v = {"v": r.normal(size=(C, 3, 3, 2)), "vg": r.normal(size=(C, 3, 3, 2)),
         **_weights(r, weight_net_shapes(C)), **_weights(r, fusion_net_shapes(C), 0.2)}

    def fusion(g, p):
        a_v, a_g = adaptive_weights(p["v"], p["vg"], p)
        return _sq(cross_enhance(p["v"], p["vg"], a_v, a_g, p))
    cases["adaptive_fusion"] = (fusion, v)

    v = {"v": r.normal(size=(C, 4, 4, 3)), **_weights(r, {**neck_shapes(C), **head_shapes(C, 2)}, 0.2)}

    def neck_head(g, p):
        out = head_forward(fpn_forward(p["v"], p), p)
        return ops.add(ops.add(_sq(out[0].regression), _sq(out[1].class_logits)), _sq(out[0].centerness))
    cases["fpn_head"] = (neck_head, v)

    v = {"x": r.normal(size=(20,))}
    tgt = r.uniform(0.05, 1.0, 20)
    mask = r.uniform(size=20) < 0.6
    cases["loss_center"] = (lambda g, p: loss_center(p["x"], tgt, mask), v)

    v = {"x": 2 * r.normal(size=(3, 20))}
    labels = np.where(r.uniform(size=20) < 0.3, r.integers(0, 3, 20), -1)
    cases["loss_cls"] = (lambda g, p: loss_cls(p["x"], labels), v)

    bgrid = VoxelGridSpec((0.0, 0.0, 0.0), 0.5, (4, 4, 2))
    tg = assign_targets([Box3D((1.0, 1.0, 0.5), (1.4, 1.2, 0.8), 0.4, 0)], bgrid)
    n_all = len(tg.points)
    v = {"logd": np.log(np.clip(tg.distances, 0.05, None)) + r.normal(0.0, 0.2, (n_all, 6))}

    def bbox(g, p):
        dist = ops.transpose(ops.exp(p["logd"]), (1, 0))
        reg = ops.concat([dist, g.constant(tg.yaw[None])], axis=0)
        return loss_bbox(reg, tg)
    cases["loss_bbox"] = (bbox, v)

    n = 6
    pts = np.column_stack([r.uniform(-0.4, 0.4, n), r.uniform(-0.4, 0.4, n), r.uniform(2.0, 3.0, n)])
    cam = Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 10.0, (10, 10), up=(0.0, 1.0, 0.0))
    quat = r.normal(size=(n, 4))
    scale = r.uniform(0.1, 0.3, (n, 3))
    v = {"op": r.uniform(0.2, 0.8, n), "sh": r.normal(0.0, 0.5, (n, 3, 4))}

    def splat(g, p):
        gs = GaussianSet(positions=pts, opacity=p["op"], weight=np.ones(n), latent=np.zeros((n, 64)),
                         source_view=np.zeros(n, dtype=np.int64), pixel=np.arange(n), depth=pts[:, 2],
                         sh=p["sh"], rotation=quat / np.linalg.norm(quat, axis=1, keepdims=True), scale=scale)
        return _sq(render(gs, cam, background=(0.1, 0.2, 0.3)))
    cases["render"] = (splat, v)
    return cases


def available_checks():
    return {**{k: "primitive" for k in _primitive_cases()}, **{k: "block" for k in _block_cases()}}


def run_gradient_suite(names=None, step=STEP, max_coords=MAX_COORDS):
    """Run the selected checks (all when ``names`` is None)."""
    prim, blocks = _primitive_cases(), _block_cases()
    table = {**{k: ("primitive", v) for k, v in prim.items()}, **{k: ("block", v) for k, v in blocks.items()}}
    names = list(table) if names is None else list(names)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    results = []
    for name in names:
        kind, (build, values) = table[name]
        t0 = time.perf_counter()
        errs = check_gradients(build, values, step=step, max_coords=max_coords,
                               rng=np.random.default_rng(0))
        tol = PRIMITIVE_TOL if kind == "primitive" else BLOCK_TOL
        results.append(CheckResult(name, kind, errs, tol, time.perf_counter() - t0))
    return results


MODULE_GROUPS = {
    "lifting": ["class_token_projection", "lift"],
    "scenegen": ["image_encoder", "depth_features"],
    "gaussianfield": ["depth_head", "gaussian_regressor", "latent_decoder", "gru_cell", "render"],
    "voxelfusion": ["gaussian_encoder", "weight_net", "adaptive_fusion"],
    "detection": ["fpn_head", "loss_center", "loss_cls", "loss_bbox"],
}


def resolve_checks(module):
    """Check names for ``module``: 'all', a module group, or one check name."""
    table = available_checks()
    if module == "all":
        return list(table)
    if module == "diffcore":
        return [k for k, kind in table.items() if kind == "primitive"]
    if module in MODULE_GROUPS:
        return list(MODULE_GROUPS[module])
    if module in table:
        return [module]
    raise KeyError(f"unknown gradcheck module {module!r}; choose all, diffcore, "
                   f"{', '.join(MODULE_GROUPS)} or a check name")
