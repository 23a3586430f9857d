"""Inverse-depth error-prediction network with multi-view aggregation.

The model is an encoder-decoder over 8-channel rendered view stacks
(inverse-depth, color, normals, surface area).  It predicts a normalized
error plane g*_raw; the refined inverse-depth is d* = max(d_lq + sigma *
g*_raw, 0).  Optionally, feature maps from the other views of a bundle
are warped into the target view at the four skip connections and the
bottleneck and fused by a permutation-invariant aggregation (masked
average or attention).  A pose-conditioned per-pixel linear transform
("feature-space reprojection") can be applied to warped maps so features
from different viewpoints become comparable before fusion.

Parameters live in a flat ``{name: array}`` dict; the forward functions
take the same dict with values wrapped as graph tensors, so the one code
path serves training (parameters) and inference (constants).
"""

from dataclasses import dataclass
import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraIntrinsics, Se3Transform, relative
from .warp import compute_warp, downsample_idepth, downsample_mask, occlusion_mask

AGGREGATION_MODES = ("none", "average", "attention")

# strides at which cross-view aggregation happens: 4 skips + bottleneck
_SCALES = (1, 2, 4, 8, 16)

_CHECKPOINT_MAGIC = b"MVRF0001"


class ModelError(ValueError):
    """Configuration, shape, or serialization failure."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``base_width`` scales every layer; the published ladder uses 16.
    ``input_channels`` defaults to the 8 rendered channels (inverse-depth,
    RGB, normals, area).
    """

    input_channels: int = 8
    base_width: int = 16
    aggregation: str = "none"
    feature_transform: bool = False
    fsr_dim: int = 32

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ModelError(f"unknown aggregation mode {self.aggregation!r}")
        if self.input_channels < 1 or self.base_width < 1 or self.fsr_dim < 1:
            raise ModelError("channel counts must be positive")

    @property
    def scale_widths(self):
        """Feature width at each aggregated scale (4 skips + bottleneck)."""
        return tuple(self.base_width * m for m in (1, 2, 4, 8, 16))

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "base_width": self.base_width,
            "aggregation": self.aggregation,
            "feature_transform": self.feature_transform,
            "fsr_dim": self.fsr_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- parameter inventory --------------------------------------------------


def _block_specs(config: ModelConfig):
    """(name, shape, init kind) for every parameter, in a fixed order."""
    specs = []

    def conv(name, kh, kw, cin, cout):
        specs.append((name, (kh, kw, cin, cout), "he"))

    def norm(prefix, c):
        specs.append((f"{prefix}.g", (c,), "one"))
        specs.append((f"{prefix}.b", (c,), "zero"))

    def residual(prefix, c):
        conv(f"{prefix}.c1.w", 3, 3, c, c)
        norm(f"{prefix}.n1", c)
        conv(f"{prefix}.c2.w", 3, 3, c, c)
        norm(f"{prefix}.n2", c)

    def projection(prefix, cin, cout, k):
        conv(f"{prefix}.c1.w", k, k, cin, cout)
        norm(f"{prefix}.n1", cout)
        conv(f"{prefix}.c2.w", 3, 3, cout, cout)
        norm(f"{prefix}.n2", cout)
        conv(f"{prefix}.cs.w", 1, 1, cin, cout)
        norm(f"{prefix}.ns", cout)

    bw = config.base_width
    widths = config.scale_widths

    projection("enc.p1", config.input_channels, bw, 7)
    residual("enc.r1_1", bw)
    for stage, n_res in ((2, 2), (3, 2), (4, 2), (5, 5)):
        cin, cout = widths[stage - 2], widths[stage - 1]
        projection(f"enc.p{stage}", cin, cout, 3)
        for j in range(1, n_res + 1):
            residual(f"enc.r{stage}_{j}", cout)

    cin = widths[4]
    for level in (4, 3, 2, 1):
        w_skip = widths[level - 1]
        conv(f"dec.up{level}.c.w", 3, 3, cin, 8 * w_skip)
        norm(f"dec.up{level}.n", 2 * w_skip)
        cin = 3 * w_skip
    residual("dec.r1", 3 * bw)
    residual("dec.r2", 3 * bw)
    specs.append(("dec.out.w", (3, 3, 3 * bw, 1), "zero"))
    specs.append(("dec.out.b", (1,), "zero"))

    if config.aggregation == "attention":
        for i, c in enumerate(widths, 1):
            conv(f"agg.s{i}.c1.w", 3, 3, 2 * c, 32)
            specs.append((f"agg.s{i}.c1.b", (32,), "zero"))
            conv(f"agg.s{i}.c2.w", 3, 3, 32, 32)
            specs.append((f"agg.s{i}.c2.b", (32,), "zero"))
            # no bias on the score head: softmax over views is invariant
            # to a shared logit shift, so one would be dead weight
            conv(f"agg.s{i}.c3.w", 3, 3, 32, 1)

    if config.feature_transform:
        d = config.fsr_dim
        dims = [12, 128, 128, 128, 128, d * (d + 4)]
        for j in range(5):
            specs.append((f"fsr.mlp.l{j + 1}.w", (dims[j], dims[j + 1]), "he"))
            specs.append((f"fsr.mlp.l{j + 1}.b", (dims[j + 1],), "zero"))
        for i, c in enumerate(widths, 1):
            specs.append((f"fsr.s{i}.pin.w", (c, d), "he"))
            specs.append((f"fsr.s{i}.pin.b", (d,), "zero"))
            specs.append((f"fsr.s{i}.pout.w", (d, c), "he"))
            specs.append((f"fsr.s{i}.pout.b", (c,), "zero"))
    return specs


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Fresh float32 parameters: He fan-in for weights, zeros for the
    output convolution so refinement starts as the identity."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _block_specs(config):
        if kind == "he":
            fan_in = int(np.prod(shape[:-1]))
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "one":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(np.float32)
    return params


# --- input preparation ------------------------------------------------------


def normalize_input(d_lq: np.ndarray):
    """Zero-mean / unit-std over valid (nonzero) pixels.

    Returns (normalized, mu, sigma); sigma is floored at 1e-6 and is the
    value used later to undo the scaling on the predicted error.
    """
    d = np.asarray(d_lq, dtype=np.float64)
    if d.size == 0:
        raise ModelError("empty inverse-depth plane")
    valid = d > 0
    if valid.any():
        mu = float(d[valid].mean())
        sigma = float(d[valid].std())
    else:
        mu, sigma = 0.0, 0.0
    sigma = max(sigma, 1e-6)
    out = np.where(valid, (d - mu) / sigma, 0.0)
    return out.astype(np.float32), mu, sigma


@dataclass
class ViewBundle:
    """The views rendered around one location, prepared for the network.

    ``inputs`` stacks, per view, [normalized idepth, RGB, normals, area];
    ``idepth_lq`` keeps the raw low-quality inverse-depth that drives the
    warps and the final correction; ``means``/``stds`` are the per-view
    normalization statistics.
    """

    inputs: np.ndarray  # (V, H, W, C) float32
    idepth_lq: np.ndarray  # (V, H, W) float32
    intrinsics: CameraIntrinsics
    poses: tuple
    tri_ids: np.ndarray  # (V, H, W) uint64
    means: np.ndarray  # (V,) float64
    stds: np.ndarray  # (V,) float64

    def __post_init__(self):
        v, h, w = self.idepth_lq.shape
        if v < 1:
            raise ModelError("a bundle needs at least one view")
        if self.inputs.shape[:3] != (v, h, w) or self.tri_ids.shape != (v, h, w):
            raise ModelError("bundle planes disagree on shape")
        if len(self.poses) != v or len(self.means) != v or len(self.stds) != v:
            raise ModelError("bundle per-view fields disagree on length")

    @property
    def n_views(self) -> int:
        return self.idepth_lq.shape[0]


def make_bundle(idepth_lq, color, normals, area, tri_ids, intrinsics, poses) -> ViewBundle:
    """Assemble the 8-channel normalized input stack for a view bundle."""
    idepth_lq = np.asarray(idepth_lq, dtype=np.float32)
    v = idepth_lq.shape[0]
    norm_planes, means, stds = [], [], []
    for i in range(v):
        plane, mu, sigma = normalize_input(idepth_lq[i])
        norm_planes.append(plane)
        means.append(mu)
        stds.append(sigma)
    inputs = np.concatenate(
        [
            np.asarray(norm_planes, dtype=np.float32)[..., None],
            np.asarray(color, dtype=np.float32),
            np.asarray(normals, dtype=np.float32),
            np.asarray(area, dtype=np.float32)[..., None],
        ],
        axis=-1,
    )
    return ViewBundle(
        inputs=inputs,
        idepth_lq=idepth_lq,
        intrinsics=intrinsics,
        poses=tuple(poses),
        tri_ids=np.asarray(tri_ids),
        means=np.asarray(means),
        stds=np.asarray(stds),
    )


# --- blocks -----------------------------------------------------------------


def _gn_groups(c: int) -> int:
    g = min(8, c)
    while c % g:
        g -= 1
    return g


def _norm(p, x, prefix):
    c = x.shape[3]
    return ad.group_norm(x, _gn_groups(c), p[f"{prefix}.g"], p[f"{prefix}.b"])


def _residual_block(p, x, prefix):
    y = ad.conv2d(x, p[f"{prefix}.c1.w"], 1)
    y = ad.elu(_norm(p, y, f"{prefix}.n1"))
    y = ad.conv2d(y, p[f"{prefix}.c2.w"], 1)
    y = _norm(p, y, f"{prefix}.n2")
    return ad.elu(y + x)


def _projection_block(p, x, prefix, stride):
    y = ad.conv2d(x, p[f"{prefix}.c1.w"], stride)
    y = ad.elu(_norm(p, y, f"{prefix}.n1"))
    y = ad.conv2d(y, p[f"{prefix}.c2.w"], 1)
    y = _norm(p, y, f"{prefix}.n2")
    s = ad.conv2d(x, p[f"{prefix}.cs.w"], stride)
    s = _norm(p, s, f"{prefix}.ns")
    return ad.elu(y + s)


def _up_block(p, x, skip, prefix):
    """Double resolution with conv + pixel shuffle, then concat the skip."""
    y = ad.conv2d(x, p[f"{prefix}.c.w"], 1)
    y = ad.pixel_shuffle(y, 2)
    _, sh, sw, _ = skip.shape
    if y.shape[1] != sh or y.shape[2] != sw:
        y = ad.slice_(y, (slice(None), slice(0, sh), slice(0, sw), slice(None)))
    y = ad.elu(_norm(p, y, f"{prefix}.n"))
    return ad.concat([y, skip], axis=3)


def shape_trace(config: ModelConfig, height: int, width: int):
    """Analytic (block label, output shape) ladder for one sample."""

    def half(x):
        return (x + 1) // 2

    w1, w2, w3, w4, w5 = config.scale_widths
    h, w = height, width
    rows = [("input", (h, w, config.input_channels))]
    rows.append(("projection", (h, w, w1)))
    rows.append(("residual", (h, w, w1)))
    enc = [(h, w)]
    for width_i, n_res in ((w2, 2), (w3, 2), (w4, 2), (w5, 5)):
        h, w = half(h), half(w)
        enc.append((h, w))
        rows.append((f"projection, residual x{n_res}", (h, w, width_i)))
    for level, w_skip in ((4, w4), (3, w3), (2, w2), (1, w1)):
        hh, ww = enc[level - 1]
        rows.append(("up-projection, skip", (hh, ww, 3 * w_skip)))
    rows.append(("residual x2", (height, width, 3 * w1)))
    rows.append(("convolution", (height, width, 1)))
    return rows


def _expect_shape(t: Tensor, row, what: str):
    if t.shape[1:] != row[1]:
        raise ModelError(f"{what}: expected {row[1]}, got {t.shape[1:]}")


def encode(x: Tensor, params: dict, config: ModelConfig):
    """Run the encoder; returns (skips at strides 1/2/4/8, bottleneck)."""
    if x.ndim != 4 or x.shape[3] != config.input_channels:
        raise ModelError(f"encoder input must be (N,H,W,{config.input_channels}), got {x.shape}")
    trace = shape_trace(config, x.shape[1], x.shape[2])
    t = _projection_block(params, x, "enc.p1", 1)
    _expect_shape(t, trace[1], "encoder stem")
    t = _residual_block(params, t, "enc.r1_1")
    skips = [t]
    for row, (stage, n_res) in zip(trace[3:7], ((2, 2), (3, 2), (4, 2), (5, 5))):
        t = _projection_block(params, t, f"enc.p{stage}", 2)
        for j in range(1, n_res + 1):
            t = _residual_block(params, t, f"enc.r{stage}_{j}")
        _expect_shape(t, row, f"encoder stage {stage}")
        if stage < 5:
            skips.append(t)
    return skips, t


def decode(bottleneck: Tensor, skips, params: dict, config: ModelConfig) -> Tensor:
    """Run the decoder; returns the raw error plane g*_raw (N,H,W,1)."""
    if len(skips) != 4:
        raise ModelError(f"decoder expects 4 skips, got {len(skips)}")
    height, width = skips[0].shape[1], skips[0].shape[2]
    trace = shape_trace(config, height, width)
    t = bottleneck
    for row, level in zip(trace[7:11], (4, 3, 2, 1)):
        t = _up_block(params, t, skips[level - 1], f"dec.up{level}")
        _expect_shape(t, row, f"decoder level {level}")
    t = _residual_block(params, t, "dec.r1")
    t = _residual_block(params, t, "dec.r2")
    _expect_shape(t, trace[11], "decoder tail")
    out = ad.conv2d(t, params["dec.out.w"], 1) + params["dec.out.b"]
    _expect_shape(out, trace[12], "decoder output")
    return out


# --- feature-space reprojection ----------------------------------------------


def _flat_transform(t: Se3Transform) -> np.ndarray:
    """12-value MLP conditioning vector: row-major rotation | translation."""
    return np.concatenate([t.rotation.reshape(9), t.translation]).astype(np.float64)


def _fsr_mlp(params: dict, x: Tensor) -> Tensor:
    for j in range(1, 5):
        x = ad.elu(ad.matmul(x, params[f"fsr.mlp.l{j}.w"]) + params[f"fsr.mlp.l{j}.b"])
    return ad.matmul(x, params["fsr.mlp.l5.w"]) + params["fsr.mlp.l5.b"]


def fsr_generate(transform: Se3Transform, params: dict, fsr_dim: int = 32) -> Tensor:
    """Pose-conditioned feature transform W (fsr_dim x fsr_dim+4).

    ``transform`` maps source-view points into the target frame; the MLP
    sees its flattened (rotation | translation) values.
    """
    feat = _flat_transform(transform)[None, :]
    out = _fsr_mlp(params, _as_constant_row(params, feat))
    return ad.reshape(out, (fsr_dim, fsr_dim + 4))


def _as_constant_row(params: dict, feat: np.ndarray) -> Tensor:
    some = next(iter(params.values()))
    dtype = some.data.dtype if isinstance(some, Tensor) else np.float32
    return Tensor(np.ascontiguousarray(feat, dtype=dtype))


def fsr_apply(features: Tensor, points_xyzw: np.ndarray, w_matrix: Tensor,
              proj_in, proj_out, mask: np.ndarray) -> Tensor:
    """Per-pixel linear transform W @ [proj_in(f); x, y, z, w].

    ``points_xyzw`` holds the homogeneous source-frame point per target
    pixel; masked pixels come out exactly zero.
    """
    h, w, c = features.shape
    d = proj_in[0].shape[1]
    if w_matrix.shape != (d, d + 4):
        raise ModelError(f"transform must be ({d},{d + 4}), got {w_matrix.shape}")
    if points_xyzw.shape != (h, w, 4):
        raise ModelError(f"points must be ({h},{w},4), got {points_xyzw.shape}")
    flat = ad.reshape(features, (h * w, c))
    f = ad.matmul(flat, proj_in[0]) + proj_in[1]
    z = ad.concat([f, Tensor(points_xyzw.reshape(h * w, 4).astype(f.data.dtype))], axis=1)
    y = ad.matmul(z, ad.transpose(w_matrix, (1, 0)))
    o = ad.matmul(y, proj_out[0]) + proj_out[1]
    out = ad.reshape(o, (h, w, c))
    return out * np.asarray(mask, dtype=out.data.dtype)[..., None]


# --- aggregation --------------------------------------------------------------


def aggregate(maps, mode: str, params: dict = None, scale: int = None) -> Tensor:
    """Fuse per-view feature maps warped into one target view.

    ``maps`` is a list of (features (H,W,C), valid mask (H,W)) with the
    target's own map first (its mask should be all-true).  ``average``
    takes the per-pixel mean over valid views; pixels with no valid view
    keep the first map's features.  ``attention`` scores each map against
    the first with a small conv net and softmax-weights valid views only
    (``params``/``scale`` select the per-scale score net).
    """
    if mode not in ("average", "attention"):
        raise ModelError(f"unknown aggregation mode {mode!r}")
    if not maps:
        raise ModelError("aggregate of an empty map list")
    if len(maps) == 1:
        return maps[0][0]
    feats = [m[0] for m in maps]
    masks = np.stack([np.asarray(m[1], dtype=bool) for m in maps])
    stacked = ad.stack(feats, axis=0)  # (P, H, W, C)
    dtype = stacked.data.dtype

    if mode == "average":
        weights = masks.astype(dtype)[..., None]
        total = ad.reduce_sum(stacked * weights, axis=0)
        counts = weights.sum(axis=0)
        out = total * (1.0 / np.maximum(counts, 1.0)).astype(dtype)
        orphan = counts == 0
        if orphan.any():
            out = out + feats[0] * orphan.astype(dtype)
        return out

    if params is None or scale is None:
        raise ModelError("attention aggregation needs params and a scale index")
    own = feats[0]
    score_in = ad.stack([ad.concat([own, f], axis=2) for f in feats], axis=0)
    s = ad.elu(ad.conv2d(score_in, params[f"agg.s{scale}.c1.w"], 1) + params[f"agg.s{scale}.c1.b"])
    s = ad.elu(ad.conv2d(s, params[f"agg.s{scale}.c2.w"], 1) + params[f"agg.s{scale}.c2.b"])
    s = ad.conv2d(s, params[f"agg.s{scale}.c3.w"], 1)
    bias = np.where(masks, 0.0, -1e30).astype(dtype)[..., None]
    weights = ad.softmax(s + bias, axis=0)
    return ad.reduce_sum(stacked * weights, axis=0)


# --- multi-view forward --------------------------------------------------------


class _PairGeometry:
    """Per-scale warp products for one (target, neighbor) view pair."""

    __slots__ = ("coords", "points", "masks")

    def __init__(self, bundle: ViewBundle, t: int, n: int):
        k = bundle.intrinsics
        d_t = np.asarray(bundle.idepth_lq[t], dtype=np.float64)
        t_nt = relative(bundle.poses[n], bundle.poses[t])
        occluded_free = occlusion_mask(bundle.tri_ids[t], bundle.tri_ids[n], d_t, k, t_nt)
        self.coords, self.points, self.masks = {}, {}, {}
        for s in _SCALES:
            d_s = downsample_idepth(d_t, s)
            field = compute_warp(d_s, k.scaled(s), t_nt)
            self.coords[s] = field.coords
            self.points[s] = field.points_xyzw
            self.masks[s] = field.valid & downsample_mask(occluded_free, s)


def _warp_neighbors(feats: Tensor, neighbors, geoms, scale: int) -> Tensor:
    """Sample neighbor feature maps at one scale; returns (P, h, w, C)."""
    images = ad.stack([ad.slice_(feats, n) for n in neighbors], axis=0)
    coords = np.stack([geoms[n].coords[scale] for n in neighbors])
    masks = np.stack([geoms[n].masks[scale] for n in neighbors])
    return ad.grid_sample(images, coords.astype(feats.data.dtype), masks)


def _fsr_pair_weights(bundle: ViewBundle, params: dict, pairs, fsr_dim: int) -> dict:
    """One shared W per (target, neighbor) pair, reused across scales."""
    feats = np.stack(
        [_flat_transform(relative(bundle.poses[t], bundle.poses[n])) for t, n in pairs]
    )
    flat = _fsr_mlp(params, _as_constant_row(params, feats))
    return {
        pair: ad.reshape(ad.slice_(flat, i), (fsr_dim, fsr_dim + 4))
        for i, pair in enumerate(pairs)
    }


@dataclass
class RefinedView:
    """Per-view forward products: the denormalized error g* (pre-clipping,
    so supervision keeps a gradient where d* clips to 0) and d* itself."""

    d_star: Tensor  # (H, W), >= 0
    error: Tensor  # (H, W), sigma * g*_raw


def forward_views(bundle: ViewBundle, params: dict, config: ModelConfig):
    """Full forward pass for one bundle; returns a RefinedView per view.

    ``params`` maps names to graph tensors (parameters for training,
    constants for inference).
    """
    v, height, width = bundle.idepth_lq.shape
    dtype = next(iter(params.values())).data.dtype if params else np.float32
    x = Tensor(np.ascontiguousarray(bundle.inputs, dtype=dtype))
    skips, bottleneck = encode(x, params, config)
    feats = skips + [bottleneck]

    if config.aggregation != "none" and v > 1:
        if height % 16 or width % 16:
            raise ModelError("aggregation requires image dims divisible by 16")
        geom = {(t, n): _PairGeometry(bundle, t, n) for t in range(v) for n in range(v) if n != t}
        pairs = sorted(geom)
        w_pair = None
        if config.feature_transform:
            w_pair = _fsr_pair_weights(bundle, params, pairs, config.fsr_dim)

        aggregated = []
        for si, f in enumerate(feats):
            scale = _SCALES[si]
            per_target = []
            for t in range(v):
                own = ad.slice_(f, t)
                neighbors = [n for n in range(v) if n != t and geom[(t, n)].masks[scale].any()]
                maps = [(own, np.ones((f.shape[1], f.shape[2]), dtype=bool))]
                if neighbors:
                    geoms = {n: geom[(t, n)] for n in neighbors}
                    warped = _warp_neighbors(f, neighbors, geoms, scale)
                    for i, n in enumerate(neighbors):
                        fmap = ad.slice_(warped, i)
                        if config.feature_transform:
                            fmap = fsr_apply(
                                fmap,
                                geoms[n].points[scale],
                                w_pair[(t, n)],
                                (params[f"fsr.s{si + 1}.pin.w"], params[f"fsr.s{si + 1}.pin.b"]),
                                (params[f"fsr.s{si + 1}.pout.w"], params[f"fsr.s{si + 1}.pout.b"]),
                                geoms[n].masks[scale],
                            )
                        maps.append((fmap, geoms[n].masks[scale]))
                per_target.append(aggregate(maps, config.aggregation, params, si + 1))
            aggregated.append(ad.stack(per_target, axis=0))
        feats = aggregated

    g_raw = decode(feats[4], feats[:4], params, config)
    outputs = []
    for t in range(v):
        error = ad.reshape(ad.slice_(g_raw, t), (height, width)) * float(bundle.stds[t])
        d_star = ad.maximum_scalar(
            error + bundle.idepth_lq[t].astype(error.data.dtype), 0.0
        )
        outputs.append(RefinedView(d_star=d_star, error=error))
    return outputs


def refine(bundle: ViewBundle, params: dict, config: ModelConfig) -> np.ndarray:
    """Inference: refined inverse-depth for every view, (V, H, W) float32."""
    consts = {k: Tensor(np.ascontiguousarray(v, dtype=np.float32)) for k, v in params.items()}
    outputs = forward_views(bundle, consts, config)
    return np.stack([o.d_star.data for o in outputs])


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: dict, opt_state: dict = None, meta: dict = None) -> None:
    """Write parameters (and optionally optimizer state) to one file.

    Layout: magic, little-endian u64 manifest length, JSON manifest with
    sorted (name, shape, byte offset) entries plus ``meta``, then the raw
    little-endian float32 data in entry order.
    """
    entries = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    for k, v in (opt_state or {}).items():
        entries[f"opt/{k}"] = np.asarray(v)
    manifest_entries = []
    blobs = []
    offset = 0
    for name in sorted(entries):
        raw = np.ascontiguousarray(entries[name], dtype="<f4")
        manifest_entries.append(
            {"name": name, "shape": list(raw.shape), "offset": offset}
        )
        blobs.append(raw.tobytes())
        offset += len(blobs[-1])
    manifest = json.dumps(
        {"entries": manifest_entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, opt_state, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ModelError(f"not a checkpoint file: bad magic {magic!r}")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        data = fh.read()
    params, opt_state = {}, {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        value = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        name = entry["name"]
        if name.startswith("param/"):
            params[name[len("param/"):]] = value
        elif name.startswith("opt/"):
            opt_state[name[len("opt/"):]] = value
        else:
            raise ModelError(f"unknown checkpoint entry {name!r}")
    return params, opt_state, manifest.get("meta", {})
