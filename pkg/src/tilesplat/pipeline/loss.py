"""Target upload and the photometric loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from ..scene import Camera, ImageBuffer
from ..stats.metrics import ssim_and_grad


@dataclass(frozen=True)
class DeviceImage:
    """Target image in the pipeline's resident layout: contiguous, pipeline dtype."""

    data: np.ndarray

    @property
    def shape(self):
        return self.data.shape


def copy_image_to_device(target: ImageBuffer, camera: Camera | None = None, dtype=np.float32) -> DeviceImage:
    if camera is not None and (target.width, target.height) != (camera.width, camera.height):
        raise DimensionMismatch(
            f"target is {target.width}x{target.height}, camera expects {camera.width}x{camera.height}"
        )
    return DeviceImage(np.array(target.pixels, dtype=dtype, order="C", copy=True))


def loss_gradient(render: ImageBuffer, target: DeviceImage, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - lam) * L1 + lam * (1 - SSIM)`` and its gradient per rendered channel.

    The L1 subgradient uses sign(0) = 0.
    """
    r = render.pixels
    t = target.data
    if r.shape != t.shape:
        raise DimensionMismatch(f"render {r.shape} vs target {t.shape}")
    diff = r - t.astype(r.dtype)
    l1 = float(np.mean(np.abs(diff, dtype=np.float64)))
    grad = (1 - lambda_dssim) * np.sign(diff) / diff.size
    loss = (1 - lambda_dssim) * l1
    if lambda_dssim:
        s, g_ssim = ssim_and_grad(r, t)
        loss += lambda_dssim * (1 - s)
        grad = grad - lambda_dssim * g_ssim
    return loss, grad.astype(r.dtype)
