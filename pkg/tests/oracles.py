"""Brute-force reference implementations the fast code is tested against.

Everything here favors obviousness over speed: per-pixel ray casting with
Moller-Trumbore against every triangle, and a scalar bilinear-sampling
loop.  These stay independent of the rasterizer/warp implementations they
check.
"""

import numpy as np

_EPS = 1e-12


def _moller_trumbore(origins, dirs, corners):
    """Ray/triangle intersection parameters for each (ray, triangle) pair.

    origins (P,3) or (3,), dirs (P,3), corners (T,3,3).  Returns the ray
    parameter t (P,T) with +inf where there is no hit.
    """
    v0 = corners[:, 0]
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])  # (P,T,3)
    det = np.einsum("tj,ptj->pt", e1, pvec)
    ok = np.abs(det) > _EPS
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("ptj,ptj->pt", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("pj,ptj->pt", dirs, qvec) * inv_det
    t = np.einsum("tj,ptj->pt", e2, qvec) * inv_det
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return np.where(hit, t, np.inf)


def raycast_idepth(mesh, k, pose, near=0.05, chunk=4096):
    """Per-pixel inverse depth by exhaustive ray casting (camera z depth)."""
    h, w = k.height, k.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs_cam = np.stack(
        [(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation.T
    corners = mesh.triangle_corners()
    out = np.zeros(h * w)
    for start in range(0, len(dirs_world), chunk):
        d = dirs_world[start : start + chunk]
        t = _moller_trumbore(pose.translation, d, corners)
        # dirs have camera-frame z = 1, so the ray parameter IS the depth
        t = np.where(t >= near, t, np.inf)
        tmin = t.min(axis=1)
        out[start : start + chunk] = np.where(np.isfinite(tmin), 1.0 / tmin, 0.0)
    return out.reshape(h, w)


def raycast_visibility(mesh, points_world, cam_center, chunk=4096, tol=1e-4):
    """True where the segment camera->point is unobstructed by the mesh.

    A point is occluded if any triangle intersects the segment strictly
    before the point (relative tolerance keeps the point's own surface from
    occluding itself).
    """
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    corners = mesh.triangle_corners()
    center = np.asarray(cam_center, dtype=np.float64)
    visible = np.ones(len(pts), dtype=bool)
    for start in range(0, len(pts), chunk):
        d = pts[start : start + chunk] - center
        t = _moller_trumbore(center, d, corners)
        blocked = (t > tol) & (t < 1.0 - tol)
        visible[start : start + chunk] = ~blocked.any(axis=1)
    return visible


def bilinear_sample_scalar(image, coords, mask):
    """Per-pixel scalar-loop bilinear sampling, zero where masked."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w, c = image.shape
    hh, ww = coords.shape[:2]
    out = np.zeros((hh, ww, c))
    for i in range(hh):
        for j in range(ww):
            if not mask[i, j]:
                continue
            u, v = coords[i, j]
            u0, v0 = int(np.floor(u)), int(np.floor(v))
            fu, fv = u - u0, v - v0
            acc = np.zeros(c)
            for dv, dy_w in ((0, 1.0 - fv), (1, fv)):
                for du, dx_w in ((0, 1.0 - fu), (1, fu)):
                    y, x = v0 + dv, u0 + du
                    wgt = dy_w * dx_w
                    if wgt == 0.0 or not (0 <= y < h and 0 <= x < w):
                        continue
                    acc += wgt * image[y, x]
            out[i, j] = acc
    return out[:, :, 0] if squeeze else out
