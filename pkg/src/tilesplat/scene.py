"""Core value types: the trainable Gaussian cloud, cameras, tile grids and images.

Also holds the ``.splt`` checkpoint codec.  The layout is::

    b"SPLT" | u32 version (=1) | u64 count | positions | log_scales
            | rotations | opacity_logits | colors

with every array stored as contiguous little-endian float32 in that order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, ZeroQuaternion

CHECKPOINT_MAGIC = b"SPLT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")

# (field name, trailing shape) in checkpoint order
CLOUD_FIELDS = (
    ("positions", (3,)),
    ("log_scales", (3,)),
    ("rotations", (4,)),
    ("opacity_logits", ()),
    ("colors", (3,)),
)
FLOATS_PER_GAUSSIAN = sum(math.prod(shape) for _, shape in CLOUD_FIELDS)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianCloud:
    """Parallel arrays describing ``count`` anisotropic Gaussians.

    Scales are stored as logs and opacities as logits; colors are linear RGB
    and are clipped to [0, 1] where they are used.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        for name, shape in CLOUD_FIELDS:
            arr = getattr(self, name)
            if arr.shape != (n, *shape):
                raise DimensionMismatch(
                    f"{name} has shape {arr.shape}, expected {(n, *shape)}"
                )

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name, _ in CLOUD_FIELDS}

    def astype(self, dtype) -> GaussianCloud:
        return GaussianCloud(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def take(self, index) -> GaussianCloud:
        return GaussianCloud(**{k: v[index] for k, v in self.arrays().items()})

    def with_arrays(self, **changes) -> GaussianCloud:
        return replace(self, **changes)

    @classmethod
    def empty(cls, dtype=np.float32) -> GaussianCloud:
        return cls(
            **{name: np.zeros((0, *shape), dtype=dtype) for name, shape in CLOUD_FIELDS}
        )

    @classmethod
    def concat(cls, clouds) -> GaussianCloud:
        clouds = list(clouds)
        return cls(
            **{
                name: np.concatenate([getattr(c, name) for c in clouds])
                for name, _ in CLOUD_FIELDS
            }
        )


def normalize_rotations(cloud: GaussianCloud) -> GaussianCloud:
    norms = np.linalg.norm(cloud.rotations, axis=1)
    if np.any(norms <= 1e-12):
        bad = np.flatnonzero(norms <= 1e-12)
        raise ZeroQuaternion(f"quaternions with zero norm at indices {bad[:10].tolist()}")
    return cloud.with_arrays(rotations=cloud.rotations / norms[:, None])


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; shape (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3), dtype=q.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_name: str = ""

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be an orthonormal 3x3 matrix")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def downscaled(self, factor: int) -> Camera:
        return replace(
            self,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    @classmethod
    def look_at(cls, eye, target, up, *, fx, fy, width, height, image_name=""):
        """Pinhole camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            fx=fx, fy=fy, cx=width / 2, cy=height / 2, width=width, height=height,
            rotation=rot, translation=-rot @ eye, image_name=image_name,
        )


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    width: int
    height: int

    @classmethod
    def for_image(cls, width: int, height: int, tile_size: int = 16) -> TileGrid:
        return cls(
            tile_size=tile_size,
            tiles_x=-(-width // tile_size),
            tiles_y=-(-height // tile_size),
            width=width,
            height=height,
        )

    @classmethod
    def for_camera(cls, camera: Camera, tile_size: int = 16) -> TileGrid:
        return cls.for_image(camera.width, camera.height, tile_size)

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_bounds(self, tile_id: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``(x0, x1, y0, y1)`` of a tile, clipped to the image."""
        ty, tx = divmod(tile_id, self.tiles_x)
        x0, y0 = tx * self.tile_size, ty * self.tile_size
        return x0, min(x0 + self.tile_size, self.width), y0, min(y0 + self.tile_size, self.height)


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major linear RGB image, ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionMismatch(f"expected (H, W, 3) pixels, got {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def black(cls, width: int, height: int, dtype=np.float32) -> ImageBuffer:
        return cls(np.zeros((height, width, 3), dtype=dtype))

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255).astype(np.uint8)

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.to_uint8(), mode="RGB").save(path)

    @classmethod
    def load_png(cls, path, dtype=np.float32) -> ImageBuffer:
        from PIL import Image

        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"))
        return cls((data / 255.0).astype(dtype))


def save_checkpoint(cloud: GaussianCloud, path) -> None:
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cloud.count)]
    for name, _ in CLOUD_FIELDS:
        chunks.append(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    expected = _HEADER.size + 4 * FLOATS_PER_GAUSSIAN * count
    if len(data) != expected:
        raise FormatError(f"checkpoint holds {len(data)} bytes, expected {expected}")
    offset = _HEADER.size
    arrays = {}
    for name, shape in CLOUD_FIELDS:
        n = count * math.prod(shape)
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
        arrays[name] = arr.astype(np.float32).reshape((count, *shape))
        offset += 4 * n
    return GaussianCloud(**arrays)
