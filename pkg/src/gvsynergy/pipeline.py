"""End-to-end wiring of the four model variants, SGD training and checkpoints.

Variants only ever add parameters and stages:

* ``baseline``: lift -> FPN -> head, detection loss only.
* ``aux_loss``: adds the Gaussian branch and the render loss; the head
  still sees the lifted volume unchanged.
* ``direct_fusion``: fuses the lifted and Gaussian volumes with fixed
  equal weights.
* ``full``: the fusion weights come from a learned 1x1x1 weight net.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .detection import (assign_targets, decode_boxes, eval_map, flatten_outputs, fpn_forward,
                        head_forward, head_shapes, loss_bbox, loss_center, loss_cls, neck_shapes,
                        total_loss)
from .diffcore import Graph, load_tensor, ops, save_tensor
from .gaussianfield import decode_set, fuse_views, predict_depth, psnr, regress_gaussians, render, render_loss
from .gaussianfield.field import decoder_shapes, depth_head_shapes, gru_shapes, regressor_shapes
from .lifting import VoxelGridSpec, lift_features
from .scenegen import depth_feature_shapes, encode_images, encoder_param_shapes, generate_scene
from .voxelfusion import (adaptive_weights, apply_occupancy, cross_enhance, encode_gaussian_volume,
                          fusion_net_shapes, gaussian_encoder_shapes, voxelize, weight_net_shapes)

VARIANTS = ("baseline", "aux_loss", "direct_fusion", "full")
FEATURE_STRIDE = 4
FOCAL_PRIOR = 0.01
METRIC_COLUMNS = ["epoch", "L_center", "L_bbox", "L_cls", "L_render", "L_total", "mAP@0.25", "PSNR"]


def default_grid():
    """16 x 16 x 8 voxels of 0.4 m covering the generated room."""
    return VoxelGridSpec((0.0, 0.0, 0.0), 0.4, (16, 16, 8))


class ConfigError(ValueError):
    """Bad or unknown configuration values."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "full"
    grid: VoxelGridSpec = field(default_factory=default_grid)
    channels: int = 32
    depth_channels: int = 16
    n_classes: int = 3
    lambda_render: float = 1.0
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float = 10.0
    epochs: int = 200
    seed: int = 0
    tau_rel: float = 0.05
    d_min: float = 0.25
    d_max: float = 8.0
    depth_supervision: bool = False
    min_views: int = 3
    threads: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if isinstance(self.grid, dict):
            object.__setattr__(self, "grid", VoxelGridSpec.from_dict(self.grid))
        if self.channels < 1 or self.depth_channels < 1 or self.n_classes < 1:
            raise ConfigError("channels, depth_channels and n_classes must be >= 1")
        if self.lambda_render < 0:
            raise ConfigError("lambda_render must be >= 0")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and 0 <= momentum < 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.tau_rel <= 0:
            raise ConfigError("tau_rel must be positive")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        if self.min_views < 1:
            raise ConfigError("min_views must be >= 1")

    @property
    def uses_gaussians(self):
        return self.variant != "baseline"

    def to_dict(self):
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except (TypeError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_json(path.read_text())

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return PipelineConfig(**d)


# --------------------------------------------------------------------------
# parameters

def param_shapes(config: PipelineConfig) -> dict:
    """Name -> shape for every trainable tensor of ``config.variant``."""
    C = config.channels
    shapes = {}
    shapes.update(encoder_param_shapes(C, C))
    shapes.update(neck_shapes(C))
    shapes.update(head_shapes(C, config.n_classes))
    if config.variant == "baseline":
        return shapes
    shapes.update(depth_feature_shapes(C, config.depth_channels))
    shapes.update(depth_head_shapes(config.depth_channels))
    shapes.update(regressor_shapes(config.depth_channels))
    shapes.update(decoder_shapes())
    shapes.update(gru_shapes())
    if config.variant == "aux_loss":
        return shapes
    shapes.update(gaussian_encoder_shapes(C))
    shapes.update(fusion_net_shapes(C))
    if config.variant == "direct_fusion":
        return shapes
    shapes.update(weight_net_shapes(C))
    return shapes


def _fan_in(name, shape):
    if name.startswith("gru.") or name == "dec.w":
        return shape[0]
    return int(np.prod(shape[1:]))


def init_param(name, shape, seed):
    """Uniform(-b, b), b = 1/sqrt(fan_in); biases start at zero.

    Each tensor draws from its own stream keyed by (seed, crc32(name)) so
    the tensors shared between variants start identical.
    """
    if name.endswith(".b") and len(shape) == 1:
        value = np.zeros(shape)
        if name == "head.cls.b":
            value[:] = -math.log((1.0 - FOCAL_PRIOR) / FOCAL_PRIOR)
        elif name == "dec.b":
            value[16:19] = -1.9  # initial scale s_min + softplus(-1.9) ~ 0.15 m
        return value
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    b = 1.0 / math.sqrt(_fan_in(name, shape))
    return rng.uniform(-b, b, size=shape)


def init_params(config: PipelineConfig) -> dict:
    return {name: init_param(name, shape, config.seed) for name, shape in param_shapes(config).items()}


@dataclass
class TrainState:
    params: dict
    velocity: dict
    step: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        for k, v in self.params.items():
            if self.velocity[k].shape != v.shape:
                raise ValueError(f"velocity shape mismatch for {k}")

    @classmethod
    def initial(cls, config: PipelineConfig):
        params = init_params(config)
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()})

    def copy(self):
        return TrainState({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.velocity.items()}, self.step, list(self.history))


# --------------------------------------------------------------------------
# forward

@dataclass
class StepResult:
    losses: dict  # name -> float, or None when the term is absent
    outputs: list  # HeadOutput per level
    diagnostics: dict
    total: object = None  # scalar Tensor
    graph: Graph | None = None

    def __iter__(self):
        return iter((self.losses, self.outputs, self.diagnostics))


def feature_cameras(scene, hw):
    h, w = hw
    return [cam.scaled(w / cam.image_size[0], h / cam.image_size[1]) for cam in scene.cameras]


def _pool_depth(depth, hw):
    """Block-average a full-resolution depth map down to the feature grid."""
    h, w = hw
    H, W = depth.shape
    return depth.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def build_gaussians(config, scene, p, f_depth, cams):
    """Depth -> per-view primitives -> fused global set (decoded)."""
    depth = predict_depth(f_depth, p, config.d_min, config.d_max)
    sets = regress_gaussians(f_depth, depth, cams, p)
    fused = fuse_views(sets, cams, config.tau_rel, p, f_depth.shape[2:])
    decoded, n_bad = decode_set(fused, p)
    return depth, decoded, n_bad


def forward_step(config: PipelineConfig, scene, state, render_view=0, targets=None) -> StepResult:
    """One forward pass on ``scene``; the returned ``total`` is differentiable
    with respect to every parameter bound in ``graph``."""
    if scene.n_views < config.min_views:
        raise ValueError(f"scene has {scene.n_views} views, need at least {config.min_views}")
    params = state.params if isinstance(state, TrainState) else state
    g = Graph()
    p = {k: g.param(k, v) for k, v in params.items()}
    f, F = encode_images(scene, p, g, with_depth_features=config.uses_gaussians)
    hw = f.shape[2:]
    cams = feature_cameras(scene, hw)
    v = lift_features(f, cams, config.grid, config.threads)
    diag = {}
    losses = {"L_render": None, "L_depth": None}
    extra = []
    if config.uses_gaussians:
        depth, gs, n_bad = build_gaussians(config, scene, p, F, cams)
        diag["n_gaussians"] = len(gs)
        diag["degenerate_quaternions"] = n_bad
        stats = {}
        img = render(gs, scene.cameras[render_view], background=(0.0, 0.0, 0.0),
                     threads=config.threads, stats=stats)
        l_render = render_loss(img, scene.images[render_view])
        losses["L_render"] = float(l_render.data)
        diag["singular_footprints"] = stats.get("singular", 0)
        if config.lambda_render > 0:
            extra.append(ops.mul(l_render, float(config.lambda_render)))
        if config.depth_supervision:
            gt = np.stack([_pool_depth(d, hw) for d in scene.depths])
            diff = ops.sub(depth, gt)
            l_depth = ops.mean(ops.add(ops.relu(diff), ops.relu(ops.neg(diff))))  # L1
            losses["L_depth"] = float(l_depth.data)
            extra.append(l_depth)
        vox = voxelize(gs.positions, gs.latent, config.grid, config.threads)
        diag["fill_rate"] = vox.occupancy.fill_rate
        diag["dropped"] = vox.n_dropped
        if config.variant == "aux_loss":
            v_e = v
        else:
            masked = apply_occupancy(encode_gaussian_volume(vox.volume, p), vox.occupancy)
            if config.variant == "direct_fusion":
                a_v = a_g = 0.5
            else:
                a_v, a_g = adaptive_weights(v, masked, p)
                diag["alpha_v_mean"] = float(np.mean(a_v.data))
            v_e = cross_enhance(v, masked, a_v, a_g, p)
    else:
        v_e = v
    outputs = head_forward(fpn_forward(v_e, p), p)
    if targets is None:
        targets = assign_targets(scene.boxes, config.grid, len(outputs))
    ctr, reg, cls = flatten_outputs(outputs)
    lc = loss_center(ctr, targets.centerness, targets.positive)
    lb = loss_bbox(reg, targets)
    lk = loss_cls(cls, targets.class_id)
    total = total_loss(lc, lb, lk)
    for t in extra:
        total = ops.add(total, t)
    losses.update(L_center=float(lc.data), L_bbox=float(lb.data), L_cls=float(lk.data),
                  L_total=float(total.data))
    diag["n_positive"] = targets.n_positive
    return StepResult(losses, outputs, diag, total, g)


def predict_scene(config, scene, state):
    """Decoded boxes for one scene."""
    res = forward_step(config, scene, state)
    return decode_boxes(res.outputs, config.grid)


def render_scene(config, scene, state, view=0, image_size=None):
    """Render ``view`` of ``scene`` from the fused Gaussian set (array)."""
    if not config.uses_gaussians:
        raise ValueError(f"variant {config.variant!r} has no Gaussian branch")
    params = state.params if isinstance(state, TrainState) else state
    g = Graph()
    p = {k: g.constant(v) for k, v in params.items()}
    f, F = encode_images(scene, p, g)
    _, gs, _ = build_gaussians(config, scene, p, F, feature_cameras(scene, f.shape[2:]))
    img = render(gs, scene.cameras[view], image_size, threads=config.threads)
    return np.asarray(img.data if hasattr(img, "graph") else img)


# --------------------------------------------------------------------------
# training

def sgd_step(state: TrainState, grads: dict, config: PipelineConfig):
    """Momentum SGD with global-norm clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = 1.0 if config.clip_norm <= 0 or norm <= config.clip_norm else config.clip_norm / norm
    for k, g in grads.items():
        vel = state.velocity[k]
        vel *= config.momentum
        vel += scale * g
        state.params[k] -= config.lr * vel
    state.step += 1
    return norm


def evaluate(config, state, scenes, iou=0.25):
    if not scenes:
        return None
    preds = {i: predict_scene(config, s, state) for i, s in enumerate(scenes)}
    gts = {i: s.boxes for i, s in enumerate(scenes)}
    return eval_map(preds, gts, iou)


def heldout_psnr(config, state, scenes):
    if not scenes or not config.uses_gaussians:
        return None
    img = render_scene(config, scenes[0], state, view=0)
    return psnr(img, scenes[0].images[0])


def _fmt(x):
    return "" if x is None else repr(float(x))


def metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def _epoch_row(epoch, per_step, config, state, held_out):
    row = {"epoch": epoch}
    for key in ("L_center", "L_bbox", "L_cls", "L_render", "L_total"):
        vals = [s[key] for s in per_step if s[key] is not None]
        row[key] = float(np.mean(vals)) if vals else None
    row["mAP@0.25"] = evaluate(config, state, held_out)
    row["PSNR"] = heldout_psnr(config, state, held_out)
    return row


def _render_view(config, epoch, position, n_views):
    rng = np.random.default_rng([config.seed, epoch, position])
    return int(rng.integers(n_views))


def train(config: PipelineConfig, scenes, held_out=(), state=None, out_dir=None, log=None):
    """Train for ``config.epochs`` epochs.

    Row 0 of the history holds the losses at initialisation; row ``e``
    holds the mean losses over epoch ``e``. Returns ``(state, csv_text)``.
    """
    scenes, held_out = list(scenes), list(held_out)
    if not scenes:
        raise ValueError("train needs at least one scene")
    state = TrainState.initial(config) if state is None else state
    if config.epochs == 0:
        return state, metrics_csv(state.history)
    out_dir = Path(out_dir) if out_dir is not None else None
    targets = [assign_targets(s.boxes, config.grid) for s in scenes]
    order_rng = np.random.default_rng(config.seed)
    last_good = None
    if not state.history:
        init = [forward_step(config, s, state, 0, t).losses for s, t in zip(scenes, targets)]
        state.history.append(_epoch_row(0, init, config, state, held_out))
    start = state.history[-1]["epoch"] + 1
    for epoch in range(start, start + config.epochs):
        per_step = []
        for pos, i in enumerate(order_rng.permutation(len(scenes))):
            view = _render_view(config, epoch, pos, scenes[i].n_views)
            res = forward_step(config, scenes[i], state, view, targets[i])
            if not math.isfinite(res.losses["L_total"]):
                where = f"; last good checkpoint: {last_good}" if last_good else "; no checkpoint was written"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {i}{where}", last_good)
            grads = res.graph.backward(res.total, params=state.params)
            res.graph.release()
            sgd_step(state, grads, config)
            per_step.append(res.losses)
        state.history.append(_epoch_row(epoch, per_step, config, state, held_out))
        if log is not None:
            log(state.history[-1])
        if out_dir is not None:
            last_good = save_checkpoint(out_dir / "checkpoint", config, state)
            (out_dir / "metrics.csv").write_text(metrics_csv(state.history))
    return state, metrics_csv(state.history)


# --------------------------------------------------------------------------
# fixed synthetic benchmark

BENCHMARK_LR = 1e-2
BENCHMARK_EPOCHS = 200


def benchmark_scenes(seed):
    """Five training and two held-out scenes (4 objects, 8 views, 64x64)."""
    train_scenes = [generate_scene(1000 * seed + i) for i in range(5)]
    held_out = [generate_scene(1000 * seed + 5 + i) for i in range(2)]
    return train_scenes, held_out


def benchmark_config(variant, seed, **kw):
    kw.setdefault("lr", BENCHMARK_LR)
    kw.setdefault("epochs", BENCHMARK_EPOCHS)
    return PipelineConfig(variant=variant, seed=seed, **kw)


def run_benchmark(variant, seed, log=None, **kw):
    """Train ``variant`` on benchmark seed ``seed``; returns ``(state, csv_text)``."""
    train_scenes, held_out = benchmark_scenes(seed)
    return train(benchmark_config(variant, seed, **kw), train_scenes, held_out, log=log)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, config, state: TrainState):
    """Directory of GVT1 tensors plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(state.params):
        fname = f"{name}.gvt"
        save_tensor(path / fname, state.params[name])
        files[name] = fname
    for name in sorted(state.velocity):
        fname = f"{name}.vel.gvt"
        save_tensor(path / fname, state.velocity[name])
    manifest = {"format_version": 1, "config": config.to_dict(), "tensors": files,
                "step": state.step, "history": state.history}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Returns ``(config, state)``."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{mpath}: invalid JSON ({e})") from None
    config = PipelineConfig.from_dict(manifest["config"])
    params, vel = {}, {}
    for name, fname in manifest["tensors"].items():
        params[name] = np.array(load_tensor(path / fname))
        vpath = path / f"{name}.vel.gvt"
        vel[name] = np.array(load_tensor(vpath)) if vpath.exists() else np.zeros_like(params[name])
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise ConfigError(f"{path}: tensor {name} missing or has the wrong shape")
    return config, TrainState(params, vel, manifest.get("step", 0), manifest.get("history", []))
