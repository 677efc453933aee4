"""Scene directories on disk and the seeded synthetic scene generator.

A scene directory holds ``cameras.json``, an ``images/`` folder of 8-bit RGB
PNGs and optionally ``init.splt`` with the starting cloud.  Each camera entry
looks like::

    {"fx": 80.0, "fy": 80.0, "cx": 32.0, "cy": 32.0, "width": 64, "height": 64,
     "rotation": [9 numbers, row-major], "translation": [3 numbers],
     "image": "000.png"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadJson, DimensionMismatch, MissingFile
from .scene import Camera, GaussianCloud, ImageBuffer, load_checkpoint, logit, save_checkpoint

INIT_CHECKPOINT = "init.splt"


@dataclass(frozen=True)
class SceneBundle:
    name: str
    cameras: list[Camera]
    images: list[ImageBuffer]
    initial: GaussianCloud
    extent: float
    reference: GaussianCloud | None = None

    def __post_init__(self):
        if not self.cameras or len(self.cameras) != len(self.images):
            raise DimensionMismatch("need one image per camera and at least one camera")
        for cam, img in zip(self.cameras, self.images):
            if (cam.width, cam.height) != (img.width, img.height):
                raise DimensionMismatch(
                    f"image {cam.image_name!r} is {img.width}x{img.height}, camera says {cam.width}x{cam.height}"
                )
        if not self.extent > 0:
            raise ValueError("scene extent must be positive")


def scene_extent(cameras) -> float:
    centers = np.stack([c.center for c in cameras])
    return float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) or 1.0


def box_downsample(img: ImageBuffer, factor: int) -> ImageBuffer:
    if factor == 1:
        return img
    h, w = img.height // factor, img.width // factor
    px = img.pixels[: h * factor, : w * factor]
    return ImageBuffer(px.reshape(h, factor, w, factor, 3).mean(axis=(1, 3)).astype(img.pixels.dtype))


def random_cloud_in_box(n: int, lo, hi, extent: float, rng: np.random.Generator, dtype=np.float32) -> GaussianCloud:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return GaussianCloud(
        positions=rng.uniform(lo, hi, (n, 3)).astype(dtype),
        log_scales=np.full((n, 3), np.log(0.01 * extent), dtype=dtype),
        rotations=np.tile(np.array([1, 0, 0, 0], dtype=dtype), (n, 1)),
        opacity_logits=np.full(n, logit(0.1), dtype=dtype),
        colors=np.full((n, 3), 0.5, dtype=dtype),
    )


def load_scene(path, downscale: int = 1, n_init: int = 1000, seed: int = 0) -> SceneBundle:
    root = Path(path)
    if downscale < 1:
        raise ValueError("downscale must be >= 1")
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise MissingFile(f"{cam_file} not found")
    try:
        entries = json.loads(cam_file.read_text())
        cameras = [
            Camera(
                fx=float(e["fx"]), fy=float(e["fy"]), cx=float(e["cx"]), cy=float(e["cy"]),
                width=int(e["width"]), height=int(e["height"]),
                rotation=np.asarray(e["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(e["translation"], dtype=np.float64),
                image_name=str(e["image"]),
            )
            for e in entries
        ]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadJson(f"{cam_file}: {exc}") from exc

    images = []
    for cam in cameras:
        img_path = root / "images" / cam.image_name
        if not img_path.is_file():
            raise MissingFile(f"{img_path} not found")
        img = ImageBuffer.load_png(img_path)
        if (img.width, img.height) != (cam.width, cam.height):
            raise DimensionMismatch(f"{img_path} is {img.width}x{img.height}, camera says {cam.width}x{cam.height}")
        images.append(box_downsample(img, downscale))
    cameras = [c.downscaled(downscale) if downscale > 1 else c for c in cameras]

    extent = scene_extent(cameras)
    init_path = root / INIT_CHECKPOINT
    if init_path.is_file():
        initial = load_checkpoint(init_path)
    else:
        centers = np.stack([c.center for c in cameras])
        initial = random_cloud_in_box(
            n_init, centers.min(axis=0), centers.max(axis=0), extent, np.random.default_rng(seed)
        )
    return SceneBundle(root.name, cameras, images, initial, extent)


def write_scene(bundle: SceneBundle, path, include_init: bool = True) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(bundle.cameras, bundle.images)):
        name = cam.image_name or f"{i:03d}.png"
        img.save_png(root / "images" / name)
        entries.append(
            {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "rotation": cam.rotation.ravel().tolist(),
                "translation": cam.translation.tolist(),
                "image": name,
            }
        )
    (root / "cameras.json").write_text(json.dumps(entries, indent=2))
    if include_init:
        save_checkpoint(bundle.initial, root / INIT_CHECKPOINT)
    return root


def generate_synthetic(
    seed: int,
    n_gaussians: int,
    n_cameras: int,
    width: int,
    height: int,
    *,
    position_noise: float = 0.05,
    color_noise: float = 0.1,
    ring_radius: float = 4.0,
    focal_factor: float = 1.2,
    tile_size: int = 16,
    init_seed: int | None = None,
    name: str = "synthetic",
    dtype=np.float32,
) -> SceneBundle:
    """Seeded reference cloud, a ring of inward-looking cameras, self-rendered
    targets, and a perturbed copy of the reference as the starting cloud.

    ``init_seed`` (default: ``seed``) drives only the perturbation, so repeated
    runs can share one scene while starting from different clouds.
    """
    from .pipeline import render

    if min(n_gaussians, n_cameras, width, height) < 1:
        raise ValueError("counts and image size must be >= 1")
    rng = np.random.default_rng(seed)
    n = n_gaussians
    quats = rng.standard_normal((n, 4))
    reference = GaussianCloud(
        positions=rng.uniform(-0.8, 0.8, (n, 3)),
        log_scales=np.log(rng.uniform(0.08, 0.25, (n, 3))),
        rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        opacity_logits=logit(rng.uniform(0.5, 0.95, n)),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    ).astype(dtype)

    cameras = []
    for k in range(n_cameras):
        theta = 2 * np.pi * k / n_cameras
        eye = (ring_radius * np.cos(theta), -1.0, ring_radius * np.sin(theta))
        cameras.append(
            Camera.look_at(
                eye, (0.0, 0.0, 0.0), (0.0, -1.0, 0.0),
                fx=focal_factor * width, fy=focal_factor * width, width=width, height=height,
                image_name=f"{k:03d}.png",
            )
        )
    extent = scene_extent(cameras) if n_cameras > 1 else float(np.linalg.norm(cameras[0].center))
    images = [render(reference, cam, tile_size) for cam in cameras]

    init_rng = np.random.default_rng(seed if init_seed is None else [seed, init_seed])
    initial = reference.with_arrays(
        positions=(reference.positions + init_rng.normal(0, position_noise * extent, (n, 3))).astype(dtype),
        colors=np.clip(reference.colors + init_rng.normal(0, color_noise, (n, 3)), 0, 1).astype(dtype),
    )
    return SceneBundle(name, cameras, images, initial, extent, reference)
