"""scikit-learn style front end for the detection pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .detection import eval_map
from .lifting import VoxelGridSpec
from .pipeline import VARIANTS, PipelineConfig, TrainState, predict_scene, train
from .scenegen import SyntheticScene


def check_scenes(X, min_views=1, name="X"):
    """Validate a list of scenes and return it as a list."""
    if isinstance(X, SyntheticScene):
        X = [X]
    try:
        scenes = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a sequence of SyntheticScene, got {type(X).__name__}") from None
    if not scenes:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(scenes):
        if not isinstance(s, SyntheticScene):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected SyntheticScene")
        if s.n_views < min_views:
            raise ValueError(f"{name}[{i}] has {s.n_views} views, need at least {min_views}")
    return scenes


def check_is_fitted(estimator):
    if getattr(estimator, "state_", None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")


class GVSynergyDetector(BaseEstimator):
    """Multi-view 3D box detector trained on :class:`SyntheticScene` lists.

    ``fit(X)`` reads the ground-truth boxes from the scenes themselves, so
    ``y`` is accepted only for API symmetry and must be None.
    """

    def __init__(self, variant="full", channels=32, lambda_render=1.0, lr=1e-2, momentum=0.9,
                 epochs=200, seed=0, tau_rel=0.05, voxel_size=0.4, grid_dims=(16, 16, 8),
                 grid_origin=(0.0, 0.0, 0.0), depth_supervision=False, threads=None):
        self.variant = variant
        self.channels = channels
        self.lambda_render = lambda_render
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.seed = seed
        self.tau_rel = tau_rel
        self.voxel_size = voxel_size
        self.grid_dims = grid_dims
        self.grid_origin = grid_origin
        self.depth_supervision = depth_supervision
        self.threads = threads

    def _config(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        grid = VoxelGridSpec(tuple(self.grid_origin), float(self.voxel_size), tuple(self.grid_dims))
        return PipelineConfig(variant=self.variant, grid=grid, channels=int(self.channels),
                              lambda_render=float(self.lambda_render), lr=float(self.lr),
                              momentum=float(self.momentum), epochs=int(self.epochs), seed=int(self.seed),
                              tau_rel=float(self.tau_rel), depth_supervision=bool(self.depth_supervision),
                              threads=self.threads)

    def fit(self, X, y=None, X_val=None):
        if y is not None:
            raise ValueError("y must be None; boxes are read from the scenes")
        config = self._config()
        scenes = check_scenes(X, config.min_views)
        held = check_scenes(X_val, config.min_views, "X_val") if X_val is not None else []
        self.config_ = config
        self.state_, self.history_csv_ = train(config, scenes, held)
        self.history_ = self.state_.history
        return self

    def predict(self, X):
        """List of Box3D lists, one per scene."""
        check_is_fitted(self)
        return [predict_scene(self.config_, s, self.state_) for s in check_scenes(X, self.config_.min_views)]

    def score(self, X, y=None, iou_threshold=0.25):
        """mAP at ``iou_threshold`` against the scenes' own boxes."""
        scenes = check_scenes(X)
        preds = self.predict(scenes)
        gts = {i: s.boxes for i, s in enumerate(scenes)}
        return eval_map(dict(enumerate(preds)), gts, iou_threshold)

    @property
    def n_parameters_(self):
        check_is_fitted(self)
        return int(sum(np.size(v) for v in self.state_.params.values()))

    def init_state(self):
        """Untrained state for the current parameters (no fitting)."""
        return TrainState.initial(self._config())
