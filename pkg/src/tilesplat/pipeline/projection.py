"""EWA projection of 3D Gaussians to screen-space splats, and its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteParameter
from ..scene import Camera, GaussianCloud, TileGrid, quaternion_to_matrix, sigmoid

NEAR_PLANE = 0.01
COVARIANCE_FLOOR = 0.3
RADIUS_SIGMAS = 3.0


@dataclass(frozen=True)
class ProjectedSet:
    """Per-frame screen-space splats.

    ``conics`` holds ``(a, b, c)`` of the inverse 2D covariance ``[[a, b], [b, c]]``.
    ``tile_rects`` holds the clipped tile rectangle ``(tx0, tx1, ty0, ty1)``
    (half-open) that each splat's bounding square touches.
    """

    means2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    tile_counts: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    visible: np.ndarray
    tile_rects: np.ndarray

    @property
    def count(self) -> int:
        return len(self.depths)


@dataclass
class _Geometry:
    """Intermediates shared by the forward and backward projection."""

    quats: np.ndarray      # normalized
    qnorm: np.ndarray
    rotmats: np.ndarray    # (N, 3, 3)
    scales: np.ndarray
    t: np.ndarray          # camera-space centers
    safe_z: np.ndarray
    visible: np.ndarray
    jw: np.ndarray         # (N, 2, 3) Jacobian times view rotation
    cov3d: np.ndarray
    cov2d: np.ndarray      # (N, 2, 2), floor included


def _check_finite(cloud: GaussianCloud) -> None:
    for name, arr in cloud.arrays().items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteParameter(f"non-finite values in {name}")


def _geometry(cloud: GaussianCloud, camera: Camera) -> _Geometry:
    dtype = cloud.dtype
    view_rot = camera.rotation.astype(dtype)
    qnorm = np.linalg.norm(cloud.rotations, axis=1)
    qnorm = np.where(qnorm > 0, qnorm, 1).astype(dtype)
    quats = cloud.rotations / qnorm[:, None]
    rotmats = quaternion_to_matrix(quats)
    scales = np.exp(cloud.log_scales)

    t = cloud.positions @ view_rot.T + camera.translation.astype(dtype)
    visible = t[:, 2] > NEAR_PLANE
    safe_z = np.where(visible, t[:, 2], 1).astype(dtype)

    n = cloud.count
    jac = np.zeros((n, 2, 3), dtype=dtype)
    jac[:, 0, 0] = camera.fx / safe_z
    jac[:, 0, 2] = -camera.fx * t[:, 0] / safe_z**2
    jac[:, 1, 1] = camera.fy / safe_z
    jac[:, 1, 2] = -camera.fy * t[:, 1] / safe_z**2
    jw = jac @ view_rot

    m = rotmats * scales[:, None, :]
    cov3d = m @ m.transpose(0, 2, 1)
    cov2d = jw @ cov3d @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COVARIANCE_FLOOR
    cov2d[:, 1, 1] += COVARIANCE_FLOOR
    return _Geometry(quats, qnorm, rotmats, scales, t, safe_z, visible, jw, cov3d, cov2d)


def tile_rects(means2d, radii, visible, grid: TileGrid) -> np.ndarray:
    """Clipped half-open tile rectangles of each splat's bounding square."""
    ts = grid.tile_size
    r = radii.astype(np.float64)
    mx = means2d[:, 0].astype(np.float64)
    my = means2d[:, 1].astype(np.float64)
    lo_x, hi_x = np.maximum(mx - r, 0.0), np.minimum(mx + r, grid.width)
    lo_y, hi_y = np.maximum(my - r, 0.0), np.minimum(my + r, grid.height)
    hit = visible & (hi_x > lo_x) & (hi_y > lo_y)
    with np.errstate(invalid="ignore"):
        rects = np.stack(
            [
                np.floor(lo_x / ts),
                np.minimum(np.ceil(hi_x / ts), grid.tiles_x),
                np.floor(lo_y / ts),
                np.minimum(np.ceil(hi_y / ts), grid.tiles_y),
            ],
            axis=1,
        )
    rects = np.where(hit[:, None], rects, 0).astype(np.int64)
    return rects


def project_forward(cloud: GaussianCloud, camera: Camera, grid: TileGrid) -> ProjectedSet:
    _check_finite(cloud)
    geo = _geometry(cloud, camera)
    t, z = geo.t, geo.safe_z
    means2d = np.stack([camera.fx * t[:, 0] / z + camera.cx, camera.fy * t[:, 1] / z + camera.cy], axis=1)
    means2d = means2d.astype(cloud.dtype)

    ca, cb, cc = geo.cov2d[:, 0, 0], geo.cov2d[:, 0, 1], geo.cov2d[:, 1, 1]
    det = ca * cc - cb * cb
    conics = np.stack([cc / det, -cb / det, ca / det], axis=1)

    mid = 0.5 * (ca + cc)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(RADIUS_SIGMAS * np.sqrt(lam_max)).astype(np.int64)

    visible = geo.visible
    radii = np.where(visible, radii, 0)
    conics = np.where(visible[:, None], conics, 0).astype(cloud.dtype)
    rects = tile_rects(means2d, radii, visible, grid)
    counts = (rects[:, 1] - rects[:, 0]) * (rects[:, 3] - rects[:, 2])

    return ProjectedSet(
        means2d=means2d,
        conics=conics,
        depths=t[:, 2].copy(),
        radii=radii,
        tile_counts=counts,
        colors=np.clip(cloud.colors, 0.0, 1.0),
        opacities=sigmoid(cloud.opacity_logits),
        visible=visible,
        tile_rects=rects,
    )


@dataclass(frozen=True)
class ScreenGradients:
    """Loss gradients with respect to the rasterizer's per-splat inputs."""

    means2d: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> ScreenGradients:
        return cls(
            means2d=np.zeros((n, 2), dtype),
            conics=np.zeros((n, 3), dtype),
            colors=np.zeros((n, 3), dtype),
            opacities=np.zeros(n, dtype),
        )


def _quat_matrix_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient on rotation matrices back to (unit) quaternion components."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=1)


def project_backward(
    cloud: GaussianCloud, camera: Camera, proj: ProjectedSet, grads: ScreenGradients
) -> tuple[GaussianCloud, np.ndarray]:
    """Chain screen-space gradients back to the cloud parameters.

    Returns parameter gradients laid out like the cloud, plus the per-Gaussian
    norm of the screen-space mean gradient in NDC units (used by densification).
    """
    dtype = cloud.dtype
    geo = _geometry(cloud, camera)
    vis = proj.visible
    n = cloud.count
    view_rot = camera.rotation.astype(dtype)

    # conic = inverse(cov2d); b enters the symmetric conic twice
    k = np.zeros((n, 2, 2), dtype=dtype)
    k[:, 0, 0], k[:, 0, 1], k[:, 1, 0], k[:, 1, 1] = (
        proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2],
    )
    gk = np.zeros((n, 2, 2), dtype=dtype)
    gk[:, 0, 0] = grads.conics[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * grads.conics[:, 1]
    gk[:, 1, 1] = grads.conics[:, 2]
    g_cov2d = -(k @ gk @ k)
    g_cov2d[~vis] = 0

    # cov2d = JW cov3d (JW)^T
    jw = geo.jw
    g_cov3d = jw.transpose(0, 2, 1) @ g_cov2d @ jw
    g_jw = 2 * g_cov2d @ jw @ geo.cov3d
    g_jac = g_jw @ view_rot.T

    t, z = geo.t, geo.safe_z
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((n, 3), dtype=dtype)
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx / z**2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy / z**2)
    g_t[:, 2] += (
        g_jac[:, 0, 0] * (-fx / z**2)
        + g_jac[:, 0, 2] * (2 * fx * t[:, 0] / z**3)
        + g_jac[:, 1, 1] * (-fy / z**2)
        + g_jac[:, 1, 2] * (2 * fy * t[:, 1] / z**3)
    )
    gm = np.where(vis[:, None], grads.means2d, 0)
    g_t[:, 0] += gm[:, 0] * fx / z
    g_t[:, 1] += gm[:, 1] * fy / z
    g_t[:, 2] += -gm[:, 0] * fx * t[:, 0] / z**2 - gm[:, 1] * fy * t[:, 1] / z**2
    g_positions = g_t @ view_rot

    # cov3d = M M^T with M = R diag(s)
    m = geo.rotmats * geo.scales[:, None, :]
    g_m = 2 * g_cov3d @ m
    g_rot = g_m * geo.scales[:, None, :]
    g_scales = np.einsum("nij,nij->nj", g_m, geo.rotmats)
    g_log_scales = g_scales * geo.scales

    g_qhat = _quat_matrix_vjp(geo.quats, g_rot)
    radial = np.sum(g_qhat * geo.quats, axis=1, keepdims=True)
    g_rotations = (g_qhat - geo.quats * radial) / geo.qnorm[:, None]

    op = proj.opacities
    g_logits = grads.opacities * op * (1 - op)
    inside = (cloud.colors >= 0) & (cloud.colors <= 1)
    g_colors = np.where(inside, grads.colors, 0)

    ndc = grads.means2d * np.array([0.5 * camera.width, 0.5 * camera.height], dtype=dtype)
    screen_norms = np.where(vis, np.linalg.norm(ndc, axis=1), 0)

    param_grads = GaussianCloud(
        positions=g_positions.astype(dtype),
        log_scales=g_log_scales.astype(dtype),
        rotations=g_rotations.astype(dtype),
        opacity_logits=g_logits.astype(dtype),
        colors=g_colors.astype(dtype),
    )
    return param_grads, screen_norms
