"""Pinhole camera model and SE(3) pose algebra.

Conventions used throughout the package:

* Pixel coordinates are continuous, with ``(0, 0)`` at the *center* of the
  top-left pixel.  A map of width ``W`` covers ``u in [-0.5, W - 0.5]``.
* Camera frames are right-handed with ``x`` right, ``y`` down and ``z``
  forward (the viewing direction).  Points with ``z <= 0`` are behind the
  camera and cannot be projected.
* Poses are rigid transforms stored as a rotation matrix plus translation
  vector and are interpreted as *world-from-camera*: ``x_world = R @ x_cam
  + t``.  ``relative(a, b) = invert(a) @ b`` maps coordinates of frame ``b``
  into frame ``a``.
* Inverse depth ``d = 1 / z`` with ``d = 0`` reserved for "no geometry".
  Homogeneous points ``(x, y, z, w)`` let us backproject a pixel with
  inverse depth ``d`` without dividing by it: the pixel lifts to
  ``((u - cx)/fx, (v - cy)/fy, 1, d)``, which equals the Euclidean point
  ``(x/w, y/w, z/w)`` whenever ``w > 0`` and a direction at infinity when
  ``w = 0``.  Rigid transforms act on such points as ``(R @ p + w t, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryError",
    "BehindCameraError",
    "CameraIntrinsics",
    "Se3Transform",
    "backproject",
    "transform_point",
    "project",
    "compose",
    "invert",
    "relative",
]


class GeometryError(ValueError):
    """Invalid geometric arguments (non-finite values, bad shapes...)."""


class BehindCameraError(GeometryError):
    """Raised when projecting a point that is not in front of the camera."""


def _as_finite_array(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise GeometryError(f"intrinsics.{name} must be finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise GeometryError("image size must be at least 1x1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix ``K``."""
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera downsampled by an integer factor.

        Downsampling by ``s`` averages ``s x s`` blocks of pixels, so the
        center of coarse pixel ``(0, 0)`` sits at fine coordinate
        ``(s - 1) / 2``.  With pixel centers at integer coordinates this
        gives ``c' = (c + 0.5) / s - 0.5`` for the principal point while the
        focal lengths simply divide by ``s``.
        """
        s = int(factor)
        if s < 1:
            raise GeometryError("scale factor must be a positive integer")
        if self.width % s or self.height % s:
            raise GeometryError(
                f"image size {self.width}x{self.height} not divisible by {s}"
            )
        return CameraIntrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // s,
            height=self.height // s,
        )


@dataclass(frozen=True)
class Se3Transform:
    """Rigid transform ``x_out = R @ x_in + t``.

    The rotation must be orthonormal with determinant +1; this is validated
    at construction so that downstream code never has to re-check.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_finite_array(self.rotation, (3, 3), "rotation")
        t = _as_finite_array(self.translation, (3,), "translation")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise GeometryError("rotation has negative determinant")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls) -> "Se3Transform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Se3Transform":
        m = _as_finite_array(m, (4, 4), "matrix")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise GeometryError("last row of a rigid transform must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an array of Euclidean points with shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def backproject(k: CameraIntrinsics, pixel, idepth: float) -> np.ndarray:
    """Lift a pixel with inverse depth to a homogeneous camera-frame point.

    Returns ``(x, y, z, w) = ((u - cx)/fx, (v - cy)/fy, 1, d)``.  For
    ``d > 0`` this is the surface point at depth ``1/d`` in homogeneous
    form; for ``d = 0`` it is the ray direction at infinity.
    """
    u, v = (float(pixel[0]), float(pixel[1]))
    d = float(idepth)
    if not (np.isfinite(u) and np.isfinite(v) and np.isfinite(d)):
        raise GeometryError("backproject requires finite pixel and inverse depth")
    if d < 0:
        raise GeometryError("inverse depth must be non-negative")
    return np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0, d])


def transform_point(t: Se3Transform, point) -> np.ndarray:
    """Apply a rigid transform to a homogeneous point ``(x, y, z, w)``.

    ``(xyz, w) -> (R @ xyz + w * t, w)``: finite points (w > 0) translate,
    directions at infinity (w = 0) only rotate.
    """
    p = _as_finite_array(point, (4,), "point")
    out = np.empty(4)
    out[:3] = t.rotation @ p[:3] + p[3] * t.translation
    out[3] = p[3]
    return out


def project(k: CameraIntrinsics, point) -> np.ndarray:
    """Project a homogeneous camera-frame point to pixel coordinates.

    Only defined for points strictly in front of the camera (``z > 0``);
    anything else raises :class:`BehindCameraError`.  The homogeneous scale
    cancels, so ``w`` only has to be non-negative.
    """
    p = _as_finite_array(point, (4,), "point")
    x, y, z, w = p
    if w < 0:
        raise GeometryError("homogeneous scale must be non-negative")
    if z <= 0.0:
        raise BehindCameraError(f"point with z={z} is not in front of the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def compose(a: Se3Transform, b: Se3Transform) -> Se3Transform:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Se3Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: Se3Transform) -> Se3Transform:
    r_inv = t.rotation.T
    return Se3Transform(r_inv, -r_inv @ t.translation)


def relative(a: Se3Transform, b: Se3Transform) -> Se3Transform:
    """Transform taking coordinates of frame ``b`` into frame ``a``.

    With poses stored world-from-camera, ``relative(pose_a, pose_b)`` is the
    a-from-b camera transform ``invert(pose_a) @ pose_b``.
    """
    return compose(invert(a), b)
