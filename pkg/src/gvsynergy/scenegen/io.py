"""Scene container: scene.json + images/view_%03d.ppm + depth/view_%03d.gvt."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..detection.boxes import Box3D
from ..diffcore.io import TensorFormatError, load_tensor, save_tensor
from ..geometry import Camera
from .generate import SceneObject, SyntheticScene

FORMAT_VERSION = 1


class SceneFormatError(ValueError):
    pass


def write_ppm(path, image) -> None:
    """Binary P6, 8-bit, values clamped to [0, 1]; ``image`` is [3, H, W]."""
    img = np.asarray(image, dtype=np.float64)
    _, H, W = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"missing image file: {path}")
    buf = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        end = pos
        while end < len(buf) and not buf[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise SceneFormatError(f"{path}: truncated PPM header")
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise SceneFormatError(f"{path}: not an 8-bit binary PPM")
    W, H = int(tokens[1]), int(tokens[2])
    pixels = buf[pos + 1:]
    if len(pixels) != W * H * 3:
        raise SceneFormatError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(H, W, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": scene.seed,
        "room": {"min": list(scene.room[0]), "max": list(scene.room[1])},
        "objects": [
            {"center": list(o.box.center), "dims": list(o.box.dims), "yaw": o.box.yaw,
             "class_id": o.box.class_id, "color": list(o.color)}
            for o in scene.objects
        ],
        "cameras": [c.to_dict() for c in scene.cameras],
    }


def write_scene(scene: SyntheticScene, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    (root / "scene.json").write_text(json.dumps(scene_to_dict(scene), indent=1), encoding="utf-8")
    for i, (img, dep) in enumerate(zip(scene.images, scene.depths)):
        write_ppm(root / "images" / f"view_{i:03d}.ppm", img)
        save_tensor(root / "depth" / f"view_{i:03d}.gvt", dep)
    return root


def read_scene(path) -> SyntheticScene:
    root = Path(path)
    meta_path = root / "scene.json"
    if not meta_path.exists():
        raise SceneFormatError(f"missing scene file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{meta_path}: invalid JSON ({exc})") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"{meta_path}: format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    try:
        room = (tuple(meta["room"]["min"]), tuple(meta["room"]["max"]))
        objects = [SceneObject(Box3D(o["center"], o["dims"], o["yaw"], o["class_id"]), tuple(o["color"]))
                   for o in meta["objects"]]
        cameras = [Camera.from_dict(c) for c in meta["cameras"]]
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"{meta_path}: malformed field {exc}") from None
    images, depths = [], []
    for i in range(len(cameras)):
        images.append(read_ppm(root / "images" / f"view_{i:03d}.ppm"))
        try:
            depths.append(load_tensor(root / "depth" / f"view_{i:03d}.gvt"))
        except FileNotFoundError as exc:
            raise SceneFormatError(str(exc)) from None
        except TensorFormatError as exc:
            raise SceneFormatError(str(exc)) from None
    return SyntheticScene(room, objects, cameras, images, depths, meta.get("seed", 0))
