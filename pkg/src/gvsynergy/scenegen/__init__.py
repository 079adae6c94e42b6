from .encoder import encode_images, encoder_param_shapes, depth_feature_shapes
from .generate import (CLASSES, N_CLASSES, PlacementError, SceneObject, SyntheticScene,
                       generate_scene, raycast)
from .io import SceneFormatError, read_ppm, read_scene, write_ppm, write_scene
from .rng import SplitMix64, Xoshiro256

__all__ = [
    "CLASSES", "N_CLASSES", "PlacementError", "SceneObject", "SyntheticScene", "generate_scene",
    "raycast", "SceneFormatError", "read_ppm", "read_scene", "write_ppm", "write_scene",
    "SplitMix64", "Xoshiro256", "encode_images", "encoder_param_shapes", "depth_feature_shapes",
]
