"""Dense warping between views: reprojection, resampling, occlusion masks.

Given a target view's inverse depth, every pixel backprojects to a
homogeneous 3D point, moves into a source view by a rigid transform and
projects to continuous source-pixel coordinates.  Images are then pulled
back by bilinear resampling (nearest-neighbor for triangle IDs, which must
not be interpolated).  Out-of-bounds or behind-camera pixels are masked,
never clamped: clamping would fabricate geometry.

These are the plain (non-differentiable) versions used for data
preparation; the training path reuses the same coordinate fields through
``autodiff.grid_sample``.  All arithmetic here is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, GeometryError, Se3Transform

__all__ = [
    "WarpField",
    "compute_warp",
    "sample_bilinear",
    "sample_nearest",
    "warp_image",
    "warp_inverse_depth",
    "occlusion_mask",
    "downsample_idepth",
    "downsample_mask",
]


@dataclass
class WarpField:
    """Per-pixel correspondence from a target view into a source view."""

    coords: np.ndarray  # (H, W, 2) source pixel coordinates (u, v)
    reproj_idepth: np.ndarray  # (H, W) inverse depth of the point in the source frame
    in_bounds: np.ndarray  # (H, W) bool: coords within [0, W-1] x [0, H-1]
    front_of_camera: np.ndarray  # (H, W) bool: valid geometry in front of the source
    points_xyzw: np.ndarray  # (H, W, 4) homogeneous point in the source frame

    @property
    def valid(self) -> np.ndarray:
        return self.in_bounds & self.front_of_camera


def _pixel_rays(k: CameraIntrinsics):
    v, u = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    return (u - k.cx) / k.fx, (v - k.cy) / k.fy


def compute_warp(d_t: np.ndarray, k: CameraIntrinsics, t_n_from_t: Se3Transform) -> WarpField:
    """Backproject target pixels at their inverse depth and map into a source view.

    Background pixels (d_t = 0) are marked not-front-of-camera.  For valid
    pixels the homogeneous point x_n = T_(n<-t) . (ray, 1, d) is kept so
    callers can reuse the geometry (e.g. as conditioning features); its
    inverse depth in the source frame is w / z.
    """
    d = np.asarray(d_t, dtype=np.float64)
    if d.shape != (k.height, k.width):
        raise GeometryError(f"inverse depth shape {d.shape} does not match {k.height}x{k.width}")
    if np.any(d < 0):
        raise GeometryError("inverse depth must be non-negative")
    rx, ry = _pixel_rays(k)
    rays = np.stack([rx, ry, np.ones_like(rx)], axis=-1)
    r, t = t_n_from_t.rotation, t_n_from_t.translation
    xyz = rays @ r.T + d[..., None] * t
    front = (d > 0) & (xyz[..., 2] > 0)
    z_safe = np.where(front, xyz[..., 2], 1.0)
    u_n = np.where(front, k.fx * xyz[..., 0] / z_safe + k.cx, 0.0)
    v_n = np.where(front, k.fy * xyz[..., 1] / z_safe + k.cy, 0.0)
    reproj = np.where(front, d / z_safe, 0.0)
    in_bounds = (
        front
        & (u_n >= 0.0)
        & (u_n <= k.width - 1.0)
        & (v_n >= 0.0)
        & (v_n <= k.height - 1.0)
    )
    points = np.concatenate([xyz, d[..., None]], axis=-1)
    points[~front] = 0.0
    return WarpField(
        coords=np.stack([u_n, v_n], axis=-1),
        reproj_idepth=reproj,
        in_bounds=in_bounds,
        front_of_camera=front,
        points_xyzw=points,
    )


def sample_bilinear(image: np.ndarray, coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Bilinear resampling at (u, v) coords; zero where the mask is false."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    m = np.asarray(mask, dtype=bool)
    u = np.where(m, coords[..., 0], 0.0)
    v = np.where(m, coords[..., 1], 0.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    x0 = np.clip(u0, 0, w - 1)
    x1 = np.clip(u0 + 1, 0, w - 1)
    y0 = np.clip(v0, 0, h - 1)
    y1 = np.clip(v0 + 1, 0, h - 1)
    out = (
        (1 - fu) * (1 - fv) * img[y0, x0]
        + fu * (1 - fv) * img[y0, x1]
        + (1 - fu) * fv * img[y1, x0]
        + fu * fv * img[y1, x1]
    )
    out[~m] = 0.0
    return out[:, :, 0] if squeeze else out


def sample_nearest(image: np.ndarray, coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbor lookup (round half away from zero); 0 where masked."""
    img = np.asarray(image)
    m = np.asarray(mask, dtype=bool)
    u = np.where(m, coords[..., 0], 0.0)
    v = np.where(m, coords[..., 1], 0.0)
    xi = np.trunc(u + np.copysign(0.5, u)).astype(np.int64)
    yi = np.trunc(v + np.copysign(0.5, v)).astype(np.int64)
    inside = m & (xi >= 0) & (xi < img.shape[1]) & (yi >= 0) & (yi < img.shape[0])
    xi = np.clip(xi, 0, img.shape[1] - 1)
    yi = np.clip(yi, 0, img.shape[0] - 1)
    out = img[yi, xi].copy()
    out[~inside] = 0
    return out


def warp_image(i_n: np.ndarray, d_t: np.ndarray, k: CameraIntrinsics, t_n_from_t: Se3Transform):
    """Pull source image I_n into the target view; returns (warped, mask)."""
    field = compute_warp(d_t, k, t_n_from_t)
    mask = field.valid
    return sample_bilinear(i_n, field.coords, mask), mask


def warp_inverse_depth(
    d_n: np.ndarray, d_t: np.ndarray, k: CameraIntrinsics, t_n_from_t: Se3Transform
):
    """(sampled, reprojected, mask): the two inverse depths that should agree.

    ``sampled`` resamples the source map at the warped coordinates;
    ``reprojected`` is the inverse depth the target's own geometry implies
    in the source frame.  On perfect geometry the two coincide.
    """
    field = compute_warp(d_t, k, t_n_from_t)
    mask = field.valid
    return sample_bilinear(d_n, field.coords, mask), field.reproj_idepth, mask


def occlusion_mask(
    triid_t: np.ndarray,
    triid_n: np.ndarray,
    d_t: np.ndarray,
    k: CameraIntrinsics,
    t_n_from_t: Se3Transform,
) -> np.ndarray:
    """True where both views demonstrably see the same triangle.

    The warped source triangle-ID (nearest-neighbor) must equal the
    target's ID and both must be foreground; everything else — including
    out-of-frustum pixels — is treated as occluded.
    """
    field = compute_warp(d_t, k, t_n_from_t)
    warped_ids = sample_nearest(triid_n, field.coords, field.valid)
    return (warped_ids == triid_t) & (triid_t != 0) & (warped_ids != 0) & field.valid


def downsample_idepth(d: np.ndarray, s: int) -> np.ndarray:
    """Average the valid (nonzero) inverse depths in each s x s cell.

    Inverse depth is the quantity that resamples linearly, so a plain mean
    over valid pixels is the geometrically correct pyramid; cells with no
    valid pixel stay background (0).
    """
    if s == 1:
        return np.asarray(d, dtype=np.float64).copy()
    h, w = d.shape
    if h % s or w % s:
        raise GeometryError(f"plane {h}x{w} not divisible by scale {s}")
    cells = np.asarray(d, dtype=np.float64).reshape(h // s, s, w // s, s)
    valid = cells > 0
    count = valid.sum(axis=(1, 3))
    total = np.where(valid, cells, 0.0).sum(axis=(1, 3))
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def downsample_mask(mask: np.ndarray, s: int) -> np.ndarray:
    """A coarse pixel is valid only if at least half its fine pixels are."""
    if s == 1:
        return np.asarray(mask, dtype=bool).copy()
    h, w = mask.shape
    if h % s or w % s:
        raise GeometryError(f"mask {h}x{w} not divisible by scale {s}")
    count = np.asarray(mask, dtype=bool).reshape(h // s, s, w // s, s).sum(axis=(1, 3))
    return 2 * count >= s * s
