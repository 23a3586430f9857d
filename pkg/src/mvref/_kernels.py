"""Low-level array kernels behind the differentiable operations.

Convolutions (and the scatter-add inside bilinear-sampling backward)
dominate training time.  When torch is importable its CPU kernels are used
for exactly these inner loops; otherwise a pure-numpy im2col path takes
over.  Both paths implement the same contract — NHWC layout, zero "same"
padding, stride 1 or 2 — and the test suite cross-checks them against each
other.  Everything else in the package stays plain numpy.

Set ``MVREF_KERNELS=numpy`` (or ``torch``) to force a backend, and
``MVREF_NUM_THREADS`` to pin the intra-op thread count (reference mode uses
1 so results are reproducible across machines with different core counts).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import torch
    import torch.nn.functional as _F
except ImportError:  # pragma: no cover - environment without torch
    torch = None
    _F = None

_FORCED = os.environ.get("MVREF_KERNELS", "").strip().lower()
if _FORCED not in ("", "numpy", "torch"):
    raise ValueError(f"MVREF_KERNELS must be 'numpy' or 'torch', got {_FORCED!r}")
if _FORCED == "torch" and torch is None:
    raise ImportError("MVREF_KERNELS=torch but torch is not importable")

USE_TORCH = torch is not None and _FORCED != "numpy"

if torch is not None:
    torch.set_num_threads(max(1, int(os.environ.get("MVREF_NUM_THREADS", "1"))))


def set_backend(name: str) -> None:
    """Select the kernel backend at runtime, overriding the env default.

    The numpy path is bit-reproducible across buffer alignments and
    process restarts; torch trades that for speed on wide models.
    """
    global USE_TORCH
    if name not in ("numpy", "torch"):
        raise ValueError(f"backend must be 'numpy' or 'torch', got {name!r}")
    if name == "torch" and torch is None:
        raise ImportError("torch backend requested but torch is not importable")
    USE_TORCH = name == "torch"


def active_backend() -> str:
    return "torch" if USE_TORCH else "numpy"


def _to_nchw(x: np.ndarray) -> "torch.Tensor":
    return torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2).contiguous()


def _to_oihw(w: np.ndarray) -> "torch.Tensor":
    # kh x kw x Cin x Cout -> Cout x Cin x kh x kw
    return torch.from_numpy(np.ascontiguousarray(w)).permute(3, 2, 0, 1).contiguous()


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlation with zero 'same' padding; x NHWC, w (kh,kw,Cin,Cout)."""
    if USE_TORCH:
        kh, kw = w.shape[:2]
        with torch.no_grad():
            y = _F.conv2d(_to_nchw(x), _to_oihw(w), stride=stride, padding=(kh // 2, kw // 2))
        return y.permute(0, 2, 3, 1).contiguous().numpy()
    return _np_conv2d_forward(x, w, stride)


def conv2d_grad_input(x_shape, w: np.ndarray, gy: np.ndarray, stride: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input."""
    n, h, wd, cin = x_shape
    kh, kw = w.shape[:2]
    if USE_TORCH:
        with torch.no_grad():
            gx = torch.nn.grad.conv2d_input(
                (n, cin, h, wd), _to_oihw(w), _to_nchw(gy),
                stride=stride, padding=(kh // 2, kw // 2),
            )
        return gx.permute(0, 2, 3, 1).contiguous().numpy()
    return _np_conv2d_grad_input(x_shape, w, gy, stride)


def conv2d_grad_weight(x: np.ndarray, w_shape, gy: np.ndarray, stride: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its filters."""
    kh, kw, cin, cout = w_shape
    if USE_TORCH:
        with torch.no_grad():
            gw = torch.nn.grad.conv2d_weight(
                _to_nchw(x), (cout, cin, kh, kw), _to_nchw(gy),
                stride=stride, padding=(kh // 2, kw // 2),
            )
        return gw.permute(2, 3, 1, 0).contiguous().numpy()
    return _np_conv2d_grad_weight(x, w_shape, gy, stride)


def scatter_add_rows(buf: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """buf[idx[i], :] += src[i, :] in place (duplicate indices accumulate)."""
    if USE_TORCH:
        torch.from_numpy(buf).index_add_(
            0, torch.from_numpy(np.ascontiguousarray(idx)),
            torch.from_numpy(np.ascontiguousarray(src)),
        )
    else:
        np.add.at(buf, idx, src)


# --- pure-numpy reference path ---------------------------------------------

def _out_size(h: int, k: int, stride: int) -> int:
    return (h + 2 * (k // 2) - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Extract (N, H', W', kh, kw, C) patches of the zero-padded input."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    sn, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view


def _np_conv2d_forward(x, w, stride):
    kh, kw, cin, cout = w.shape
    patches = _im2col(x, kh, kw, stride)
    n, ho, wo = patches.shape[:3]
    flat = patches.reshape(n * ho * wo, kh * kw * cin)
    y = flat @ w.reshape(kh * kw * cin, cout)
    return y.reshape(n, ho, wo, cout)


def _np_conv2d_grad_weight(x, w_shape, gy, stride):
    kh, kw, cin, cout = w_shape
    patches = _im2col(x, kh, kw, stride)
    n, ho, wo = patches.shape[:3]
    flat = patches.reshape(n * ho * wo, kh * kw * cin)
    gw = flat.T @ gy.reshape(n * ho * wo, cout)
    return gw.reshape(kh, kw, cin, cout)


def _np_conv2d_grad_input(x_shape, w, gy, stride):
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = gy.shape[1], gy.shape[2]
    # Distribute every output gradient back onto the kh x kw patch it read.
    col = gy.reshape(n * ho * wo, cout) @ w.reshape(kh * kw * cin, cout).T
    col = col.reshape(n, ho, wo, kh, kw, cin)
    gxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += col[:, :, :, i, j, :]
    return gxp[:, ph : ph + h, pw : pw + wd, :]
