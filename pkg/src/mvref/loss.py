"""Training objective: berHu data term, Sobel gradient term, cross-view
geometric consistency, and L2 weight regularization.

All loss terms are means (not sums) so the weights are independent of
image size and valid-pixel count.  The geometric-consistency warp is
built from the *predicted* inverse-depth, differentiable through both
the sampling coordinates and the reprojected value; a flag flips it to
the input inverse-depth for ablation.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import relative
from .warp import sample_nearest

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_data: float = 1.0
    lambda_grad: float = 0.1
    lambda_gc: float = 0.1
    lambda_reg: float = 1e-6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise LossError(f"{name} must be non-negative, got {value}")


def _zero_like_scalar(reference: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=reference.data.dtype))


def berhu(residual: Tensor, mask) -> Tensor:
    """Reverse-Huber penalty, mean over valid pixels.

    The threshold c = 0.2 * max valid |r| adapts to the batch: linear up
    to c, quadratic (r^2 + c^2) / 2c above.  The threshold stays on the
    graph, so the loss is an ordinary piecewise-differentiable function
    of the residuals (the two branches agree in value and slope at c).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), residual.shape)
    if not mask.any():
        return _zero_like_scalar(residual)
    r_abs = ad.absolute(residual)
    c = ad.reduce_max(r_abs, mask=mask) * 0.2
    if float(c.data) == 0.0:
        return ad.reduce_mean(r_abs, mask=mask)
    small = r_abs.data <= c.data
    dtype = residual.data.dtype
    quad = (residual * residual + c * c) / (c * 2.0)
    per_pixel = r_abs * small.astype(dtype) + quad * (~small).astype(dtype)
    return ad.reduce_mean(per_pixel, mask=mask)


def _erode3(mask: np.ndarray) -> np.ndarray:
    """True where the full 3x3 neighborhood (within bounds) is true."""
    out = np.zeros_like(mask)
    if mask.shape[-1] < 3 or mask.shape[-2] < 3:
        return out
    center = np.ones_like(mask[..., 1:-1, 1:-1])
    for dv in (0, 1, 2):
        for du in (0, 1, 2):
            center = center & mask[..., dv : dv + mask.shape[-2] - 2, du : du + mask.shape[-1] - 2]
    out[..., 1:-1, 1:-1] = center
    return out


def _as_planes(x) -> np.ndarray:
    a = np.asarray(x)
    return a[None] if a.ndim == 2 else a


def grad_loss(pred: Tensor, label, mask) -> Tensor:
    """Mean of 0.5 * (|dx pred - dx label| + |dy pred - dy label|).

    Gradients come from unnormalized 3x3 Sobel responses; a pixel counts
    only if its full 3x3 support is valid.
    """
    if pred.ndim == 2:
        pred = ad.reshape(pred, (1,) + pred.shape)
    label = _as_planes(label)
    if pred.shape != label.shape:
        raise LossError(f"prediction {pred.shape} and label {label.shape} differ")
    mask = np.broadcast_to(_as_planes(np.asarray(mask, dtype=bool)), label.shape)
    eroded = _erode3(mask)
    if not eroded.any():
        return _zero_like_scalar(pred)
    dtype = pred.data.dtype
    kx = SOBEL_X.astype(dtype)[:, :, None, None]
    ky = SOBEL_Y.astype(dtype)[:, :, None, None]
    n, h, w = label.shape
    # Sobel is linear, so filtering the difference once equals the
    # difference of filtered maps (and equal inputs give exactly zero).
    diff = ad.reshape(pred - label.astype(dtype), (n, h, w, 1))
    total = (ad.absolute(ad.conv2d(diff, kx, 1)) + ad.absolute(ad.conv2d(diff, ky, 1))) * 0.5
    return ad.reduce_mean(total, mask=eroded[..., None])


def _gc_pair(driving: Tensor, neighbor_pred: Tensor, tri_t, tri_n, k, t_nt):
    """Warp terms of one ordered view pair, on-graph through ``driving``.

    Returns (|warped neighbor - reprojected| plane, unoccluded mask).
    """
    h, w = driving.shape
    dtype = driving.data.dtype
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    xbar = (uu - k.cx) / k.fx
    ybar = (vv - k.cy) / k.fy
    rot, tr = t_nt.rotation, t_nt.translation
    ax = (rot[0, 0] * xbar + rot[0, 1] * ybar + rot[0, 2]).astype(dtype)
    ay = (rot[1, 0] * xbar + rot[1, 1] * ybar + rot[1, 2]).astype(dtype)
    az = (rot[2, 0] * xbar + rot[2, 1] * ybar + rot[2, 2]).astype(dtype)
    x = driving * dtype.type(tr[0]) + ax
    y = driving * dtype.type(tr[1]) + ay
    z = driving * dtype.type(tr[2]) + az
    front = (driving.data > 0) & (z.data > 0)
    # pin the denominator to exactly 1 where the pair is invalid anyway, so
    # no infinity ever enters the graph (0 * inf would poison the backward)
    z_div = z * front.astype(dtype) + (~front).astype(dtype)
    u_n = (x / z_div) * dtype.type(k.fx) + dtype.type(k.cx)
    v_n = (y / z_div) * dtype.type(k.fy) + dtype.type(k.cy)
    valid = (
        front
        & (u_n.data >= 0.0) & (u_n.data <= w - 1.0)
        & (v_n.data >= 0.0) & (v_n.data <= h - 1.0)
    )
    coords = ad.reshape(ad.stack([u_n, v_n], axis=-1), (1, h, w, 2))
    image = ad.reshape(neighbor_pred, (1, h, w, 1))
    sampled = ad.reshape(ad.grid_sample(image, coords, valid[None]), (h, w))
    reprojected = driving / z_div
    warped_ids = sample_nearest(tri_n, np.stack([u_n.data, v_n.data], axis=-1), valid)
    unoccluded = (warped_ids == tri_t) & (warped_ids != 0) & (tri_t != 0) & valid
    return ad.absolute(sampled - reprojected), unoccluded


def _gc_terms(predictions, bundle, from_predicted):
    """Per-pair absolute-difference sums; lets callers pool globally."""
    v = len(predictions)
    total, count = None, 0
    for t in range(v):
        if from_predicted:
            driving = predictions[t]
        else:
            driving = Tensor(bundle.idepth_lq[t].astype(predictions[t].data.dtype))
        for n in range(v):
            if n == t:
                continue
            t_nt = relative(bundle.poses[n], bundle.poses[t])
            diff, unoccluded = _gc_pair(
                driving, predictions[n], bundle.tri_ids[t], bundle.tri_ids[n],
                bundle.intrinsics, t_nt,
            )
            if not unoccluded.any():
                continue
            term = ad.reduce_sum(diff, mask=unoccluded)
            total = term if total is None else total + term
            count += int(unoccluded.sum())
    return total, count


def gc_loss(predictions, bundle, from_predicted: bool = True) -> Tensor:
    """Mean cross-view inverse-depth inconsistency over unoccluded pixels.

    For every ordered pair (t, n), the target's predicted inverse-depth
    drives a warp; the bilinearly warped neighbor prediction is compared
    against the target's reprojected value.  Unoccluded pixels are those
    whose nearest-warped triangle ID matches the target's.
    """
    if len(predictions) < 2:
        return _zero_like_scalar(predictions[0]) if predictions else Tensor(np.zeros(()))
    total, count = _gc_terms(predictions, bundle, from_predicted)
    if total is None:
        return _zero_like_scalar(predictions[0])
    return total * (1.0 / count)


def reg_loss(params: dict) -> Tensor:
    """Sum of squared weights; norm affine terms and biases are exempt."""
    total = None
    for name in sorted(params):
        if not name.endswith(".w"):
            continue
        w = params[name]
        term = ad.reduce_sum(w * w)
        total = term if total is None else total + term
    if total is None:
        raise LossError("no weight parameters to regularize")
    return total


def total_loss(components: dict, weights: LossWeights) -> Tensor:
    return (
        components["data"] * weights.lambda_data
        + components["grad"] * weights.lambda_grad
        + components["gc"] * weights.lambda_gc
        + components["reg"] * weights.lambda_reg
    )


def batch_losses(outputs, bundles, labels_hq, weights: LossWeights, params: dict,
                 from_predicted: bool = True) -> dict:
    """All loss components for one training batch.

    ``outputs[i]`` are the RefinedView lists from forward_views on
    ``bundles[i]``; ``labels_hq[i]`` is the (V, H, W) high-quality
    inverse-depth.  Supervision lives in error space (g* vs. g) over the
    pixels where both renders have geometry; data and gradient terms pool
    pixels across the whole batch, geometric consistency pools pairs.
    """
    if len(outputs) != len(bundles) or len(outputs) != len(labels_hq):
        raise LossError("batch lists disagree on length")
    errors, glabels, vmasks = [], [], []
    gc_total, gc_count = None, 0
    for views, bundle, d_hq in zip(outputs, bundles, labels_hq):
        d_hq = np.asarray(d_hq)
        for t, view in enumerate(views):
            errors.append(view.error)
            valid = (d_hq[t] > 0) & (bundle.idepth_lq[t] > 0)
            glabels.append(np.where(valid, d_hq[t] - bundle.idepth_lq[t], 0.0))
            vmasks.append(valid)
        if len(views) > 1:
            total, count = _gc_terms([v.d_star for v in views], bundle, from_predicted)
            if total is not None:
                gc_total = total if gc_total is None else gc_total + total
                gc_count += count
    error_stack = ad.stack(errors, axis=0)
    glabel_stack = np.stack(glabels)
    vmask_stack = np.stack(vmasks)
    components = {
        "data": berhu(error_stack - glabel_stack.astype(error_stack.data.dtype), vmask_stack),
        "grad": grad_loss(error_stack, glabel_stack, vmask_stack),
        "gc": gc_total * (1.0 / gc_count) if gc_total is not None else _zero_like_scalar(errors[0]),
        "reg": reg_loss(params),
    }
    components["total"] = total_loss(components, weights)
    return components
