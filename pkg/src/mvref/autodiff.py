"""Minimal reverse-mode automatic differentiation over numpy arrays.

Exactly the operation set the refinement network needs, nothing more.
Feature maps are channels-last ``(N, H, W, C)``.  A :class:`Graph` records
operations in creation order (which is automatically a topological order);
:meth:`Graph.backward` walks the records once in reverse, accumulating
gradients additively across fan-out, and returns a store keyed by
parameter.  Constants (plain numpy arrays, python scalars, or tensors
without a graph) participate in the math but receive no gradient.

Training runs at 32-bit; gradient tests build 64-bit graphs where central
finite differences are trustworthy.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels


class AutodiffError(ValueError):
    """Invalid graph usage (shape mismatch, mixed graphs, non-scalar loss)."""


class Tensor:
    """N-dimensional array, optionally attached to a differentiation graph."""

    __slots__ = ("data", "graph")

    def __init__(self, data: np.ndarray, graph: "Optional[Graph]" = None):
        self.data = data
        self.graph = graph

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = "param/op" if self.graph is not None else "const"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {tag})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


class GradientStore:
    """Gradients from one backward pass, keyed by parameter tensor or name."""

    def __init__(self, named_params: dict, raw: dict):
        self._named = named_params
        self._raw = raw  # id(tensor) -> ndarray

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, str):
            key = self._named[key]
        g = self._raw.get(id(key))
        if g is None:
            return np.zeros_like(key.data)
        return g

    def named(self) -> dict:
        """name -> gradient array, zeros for parameters the loss never reached."""
        return {name: self[t] for name, t in self._named.items()}


class Graph:
    """Records operations for one forward pass; single-owner during use."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records: list = []  # (out, inputs, backward_fn)
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), self)
        self._params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(np.ascontiguousarray(value, dtype=self.dtype))

    def backward(self, loss: Tensor) -> GradientStore:
        """Reverse-mode gradients of a scalar loss w.r.t. all parameters."""
        if loss.graph is not self:
            raise AutodiffError("loss does not belong to this graph")
        if loss.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._records):
            gout = grads.pop(id(out), None)
            if gout is None:  # not reachable from the loss
                continue
            for tensor, gin in zip(inputs, backward_fn(gout)):
                if gin is None or tensor.graph is not self:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = gin if acc is None else acc + gin
        return GradientStore(self._params, grads)


def backward(loss: Tensor) -> GradientStore:
    if loss.graph is None:
        raise AutodiffError("loss is a constant; nothing to differentiate")
    return loss.graph.backward(loss)


# --- plumbing ---------------------------------------------------------------

def _graph_of(*tensors) -> Optional[Graph]:
    graph = None
    for t in tensors:
        if isinstance(t, Tensor) and t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise AutodiffError("operands belong to different graphs")
    return graph


def _wrap(x, like_dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype))


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.data.dtype
        if isinstance(x, np.ndarray):
            return x.dtype
    return np.float32


def _record(graph, data, inputs, backward_fn) -> Tensor:
    out = Tensor(data, graph)
    if graph is not None:
        graph._records.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise and broadcasting arithmetic --------------------------------

def add(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    g = _graph_of(a, b)
    data = a.data + b.data

    def bw(gout):
        return _unbroadcast(gout, a.data.shape), _unbroadcast(gout, b.data.shape)

    return _record(g, data, (a, b), bw)


def sub(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    g = _graph_of(a, b)
    data = a.data - b.data

    def bw(gout):
        return _unbroadcast(gout, a.data.shape), -_unbroadcast(gout, b.data.shape)

    return _record(g, data, (a, b), bw)


def mul(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    g = _graph_of(a, b)
    data = a.data * b.data

    def bw(gout):
        return (
            _unbroadcast(gout * b.data, a.data.shape),
            _unbroadcast(gout * a.data, b.data.shape),
        )

    return _record(g, data, (a, b), bw)


def div(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    g = _graph_of(a, b)
    data = a.data / b.data

    def bw(gout):
        return (
            _unbroadcast(gout / b.data, a.data.shape),
            _unbroadcast(-gout * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(g, data, (a, b), bw)


def absolute(x: Tensor) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    data = np.abs(x.data)

    def bw(gout):
        return (gout * np.sign(x.data),)

    return _record(_graph_of(x), data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    data = np.exp(x.data)

    def bw(gout):
        return (gout * data,)

    return _record(_graph_of(x), data, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    data = np.sqrt(x.data)

    def bw(gout):
        return (gout * (0.5 / data),)

    return _record(_graph_of(x), data, (x,), bw)


def maximum_scalar(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) with subgradient 0 on the clipped branch (ties clip)."""
    x = _wrap(x, _dtype_of(x))
    keep = x.data > floor
    data = np.where(keep, x.data, np.asarray(floor, dtype=x.data.dtype))

    def bw(gout):
        return (gout * keep,)

    return _record(_graph_of(x), data, (x,), bw)


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    x = _wrap(x, _dtype_of(x))
    pos = x.data > 0
    data = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0)))

    def bw(gout):
        # For x <= 0 the derivative exp(x) equals y + 1.
        return (np.where(pos, gout, gout * (data + 1)),)

    return _record(_graph_of(x), data, (x,), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(gout):
        dot = (gout * data).sum(axis=axis, keepdims=True)
        return (data * (gout - dot),)

    return _record(_graph_of(x), data, (x,), bw)


# --- reductions --------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False, mask=None) -> Tensor:
    """Sum of x (optionally only where a constant boolean mask is true)."""
    x = _wrap(x, _dtype_of(x))
    m = None if mask is None else np.asarray(mask)
    contrib = x.data if m is None else x.data * m
    data = np.asarray(contrib.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def bw(gout):
        if axis is None:
            g = np.broadcast_to(gout.reshape(()), x.data.shape)
        else:
            g = gout if keepdims else np.expand_dims(gout, axis)
            g = np.broadcast_to(g, x.data.shape)
        return ((g * m if m is not None else g).astype(x.data.dtype, copy=False),)

    return _record(_graph_of(x), data, (x,), bw)


def reduce_max(x: Tensor, mask=None) -> Tensor:
    """Maximum over all elements (optionally only the masked ones); scalar.

    The gradient flows to the first maximal element, matching argmax
    tie-breaking, so the op stays piecewise differentiable.
    """
    x = _wrap(x, _dtype_of(x))
    m = None if mask is None else np.asarray(mask, dtype=bool)
    if m is not None and not m.any():
        raise AutodiffError("reduce_max over an all-false mask")
    work = x.data if m is None else np.where(m, x.data, -np.inf)
    flat_idx = int(work.argmax())
    data = np.asarray(x.data.reshape(-1)[flat_idx], dtype=x.data.dtype)

    def bw(gout):
        g = np.zeros_like(x.data)
        g.reshape(-1)[flat_idx] = gout
        return (g,)

    return _record(_graph_of(x), data, (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False, mask=None) -> Tensor:
    """Mean of x; with a mask, the masked sum divided by the valid count."""
    x = _wrap(x, _dtype_of(x))
    if mask is None:
        if axis is None:
            n = x.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([x.shape[a] for a in axes]))
    else:
        n = np.asarray(mask).sum(axis=axis, keepdims=keepdims)
        n = np.maximum(n, 1)  # callers guard the all-invalid case themselves
    total = reduce_sum(x, axis=axis, keepdims=keepdims, mask=mask)
    return mul(total, np.asarray(1.0 / n, dtype=x.data.dtype))


# --- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    old = x.data.shape
    data = x.data.reshape(shape)

    def bw(gout):
        return (gout.reshape(old),)

    return _record(_graph_of(x), data, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    axes = tuple(axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def bw(gout):
        return (np.ascontiguousarray(gout.transpose(inverse)),)

    return _record(_graph_of(x), data, (x,), bw)


def slice_(x: Tensor, key) -> Tensor:
    x = _wrap(x, _dtype_of(x))
    data = np.ascontiguousarray(x.data[key])

    def bw(gout):
        gx = np.zeros_like(x.data)
        gx[key] = gout
        return (gx,)

    return _record(_graph_of(x), data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of an empty list")
    dt = _dtype_of(*tensors)
    ts = [_wrap(t, dt) for t in tensors]
    g = _graph_of(*ts)
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(gout):
        return tuple(
            np.ascontiguousarray(np.take(gout, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return _record(g, data, ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise AutodiffError("stack of an empty list")
    dt = _dtype_of(*tensors)
    ts = [_wrap(t, dt) for t in tensors]
    g = _graph_of(*ts)
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(gout):
        parts = np.moveaxis(gout, axis, 0)
        return tuple(np.ascontiguousarray(parts[i]) for i in range(len(ts)))

    return _record(g, data, ts, bw)


# --- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D @ 2D, batched 3D @ 3D, or batched 3D @ 2D."""
    dt = _dtype_of(a, b)
    a, b = _wrap(a, dt), _wrap(b, dt)
    if not (
        (a.ndim == 2 and b.ndim == 2)
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 2)
    ):
        raise AutodiffError(f"unsupported matmul shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    g = _graph_of(a, b)
    data = a.data @ b.data

    def bw(gout):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = gout @ bt
        if a.ndim == 3 and b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ gout.reshape(-1, gout.shape[-1])
        else:
            gb = at @ gout
        return ga, gb

    return _record(g, data, (a, b), bw)


def conv2d(x: Tensor, filters, stride: int = 1) -> Tensor:
    """2D cross-correlation, NHWC, zero 'same' padding, stride 1 or 2."""
    dt = _dtype_of(x, filters)
    x, w = _wrap(x, dt), _wrap(filters, dt)
    if x.ndim != 4 or w.ndim != 4:
        raise AutodiffError(f"conv2d expects 4D input/filters, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise AutodiffError(f"channel mismatch: input {x.shape} filters {w.shape}")
    if stride not in (1, 2):
        raise AutodiffError(f"stride must be 1 or 2, got {stride}")
    g = _graph_of(x, w)
    data = _kernels.conv2d_forward(x.data, w.data, stride)

    def bw(gout):
        gout = np.ascontiguousarray(gout)
        gx = _kernels.conv2d_grad_input(x.data.shape, w.data, gout, stride)
        gw = _kernels.conv2d_grad_weight(x.data, w.data.shape, gout, stride)
        return gx, gw

    return _record(g, data, (x, w), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization over H, W and the group's channels."""
    dt = _dtype_of(x, gamma)
    x, gamma, beta = _wrap(x, dt), _wrap(gamma, dt), _wrap(beta, dt)
    if x.ndim != 4:
        raise AutodiffError(f"group_norm expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if c % groups:
        raise AutodiffError(f"channels {c} not divisible by groups {groups}")
    g = _graph_of(x, gamma, beta)
    cg = c // groups
    xr = x.data.reshape(n, h, w, groups, cg)
    mean = xr.mean(axis=(1, 2, 4), keepdims=True)
    var = xr.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=dt))
    xhat = (xr - mean) * inv
    xhat_flat = xhat.reshape(n, h, w, c)
    data = xhat_flat * gamma.data + beta.data

    def bw(gout):
        gb = gout.sum(axis=(0, 1, 2))
        gg = (gout * xhat_flat).sum(axis=(0, 1, 2))
        dxhat = (gout * gamma.data).reshape(n, h, w, groups, cg)
        mean_dxhat = dxhat.mean(axis=(1, 2, 4), keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(1, 2, 4), keepdims=True)
        gx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return gx.reshape(n, h, w, c), gg, gb

    return _record(g, data, (x, gamma, beta), bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (N,H,W,C*r*r) -> (N,rH,rW,C).

    Input channel ``c*r*r + dy*r + dx`` lands at spatial offset (dy, dx) of
    output channel c — row-major within each r x r block.
    """
    x = _wrap(x, _dtype_of(x))
    if x.ndim != 4:
        raise AutodiffError(f"pixel_shuffle expects NHWC input, got {x.shape}")
    n, h, w, c_full = x.shape
    if c_full % (r * r):
        raise AutodiffError(f"channels {c_full} not divisible by r*r = {r * r}")
    c = c_full // (r * r)
    g = _graph_of(x)
    blocks = x.data.reshape(n, h, w, c, r, r)
    data = np.ascontiguousarray(
        blocks.transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, c)
    )

    def bw(gout):
        gb = gout.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(gb.reshape(n, h, w, c_full)),)

    return _record(g, data, (x,), bw)


def grid_sample(image: Tensor, coords, mask) -> Tensor:
    """Bilinear sampling of (N,H,W,C) at (N,H',W',2) per-sample pixel coords.

    Differentiable w.r.t. the image AND the coordinates.  ``mask`` is a
    constant (N,H',W') boolean plane; masked pixels produce zero values and
    propagate zero gradient.  Coordinates are (u, v) = (column, row) with
    (0,0) the center of the top-left pixel; callers mask out-of-bounds
    coordinates rather than relying on clamping.
    """
    dt = _dtype_of(image, coords)
    image, coords = _wrap(image, dt), _wrap(coords, dt)
    if image.ndim != 4 or coords.ndim != 4 or coords.shape[3] != 2:
        raise AutodiffError(f"bad grid_sample shapes {image.shape}, {coords.shape}")
    if coords.shape[0] != image.shape[0]:
        raise AutodiffError("image and coords batch sizes differ")
    n, h, w, c = image.shape
    m = np.asarray(mask, dtype=bool)
    if m.shape != coords.shape[:3]:
        raise AutodiffError(f"mask shape {m.shape} != coords grid {coords.shape[:3]}")
    g = _graph_of(image, coords)

    u = np.where(m, coords.data[..., 0], 0.0)
    v = np.where(m, coords.data[..., 1], 0.0)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0).astype(dt)
    fv = (v - v0).astype(dt)
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    # Clip corner indices for safe gathering; a corner that got clipped can
    # only be the far corner of an exactly-on-border coordinate, where its
    # bilinear weight is 0.
    x0 = np.clip(u0, 0, w - 1)
    x1 = np.clip(u0 + 1, 0, w - 1)
    y0 = np.clip(v0, 0, h - 1)
    y1 = np.clip(v0 + 1, 0, h - 1)
    batch = (np.arange(n, dtype=np.int64) * (h * w))[:, None, None]
    i00 = batch + y0 * w + x0
    i01 = batch + y0 * w + x1
    i10 = batch + y1 * w + x0
    i11 = batch + y1 * w + x1
    flat = image.data.reshape(n * h * w, c)
    v00 = flat[i00]
    v01 = flat[i01]
    v10 = flat[i10]
    v11 = flat[i11]
    one = np.asarray(1.0, dtype=dt)
    w00 = ((one - fu) * (one - fv))[..., None]
    w01 = (fu * (one - fv))[..., None]
    w10 = ((one - fu) * fv)[..., None]
    w11 = (fu * fv)[..., None]
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    data[~m] = 0.0
    # Corner values are only needed again for coordinate gradients; drop
    # them when the coordinates are constants (the common case) so the
    # closure does not pin 4 copies of the sampled map.
    corners = (v00, v01, v10, v11) if coords.graph is not None else None
    del v00, v01, v10, v11

    def bw(gout):
        gout = np.where(m[..., None], gout, 0).astype(dt, copy=False)
        gimg = None
        if image.graph is not None:
            buf = np.zeros((n * h * w, c), dtype=dt)
            for idx, wgt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                _kernels.scatter_add_rows(
                    buf, idx.ravel(), (gout * wgt).reshape(-1, c)
                )
            gimg = buf.reshape(n, h, w, c)
        gcoords = None
        if corners is not None:
            c00, c01, c10, c11 = corners
            du = (one - fv)[..., None] * (c01 - c00) + fv[..., None] * (c11 - c10)
            dv = (one - fu)[..., None] * (c10 - c00) + fu[..., None] * (c11 - c01)
            gu = (gout * du).sum(axis=-1)
            gv = (gout * dv).sum(axis=-1)
            gcoords = np.stack([gu, gv], axis=-1)
            gcoords[~m] = 0.0
        return gimg, gcoords

    return _record(g, data, (image, coords), bw)
