"""Tests for the training objective: berHu data term, gradient matching,
cross-view geometric consistency, and weight regularization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients
from mvref import autodiff as ad
from mvref.autodiff import Graph, Tensor
from mvref.geometry import CameraIntrinsics, Se3Transform
from mvref.loss import (
    LossError,
    LossWeights,
    batch_losses,
    berhu,
    gc_loss,
    grad_loss,
    reg_loss,
    total_loss,
)
from mvref.net import ModelConfig, RefinedView, forward_views, init_params, make_bundle


def _plane_bundle(z0=2.0, shifts=((0.0, 0.0, 0.0), (0.0, 0.0, -0.2)), h=12, w=20, fx=25.0):
    """Renders of an infinite fronto-parallel plane at world z = z0.

    Cameras look down +z from world positions ``shifts``; the plane is
    perpendicular to the axis, so every inverse-depth map is constant."""
    k = CameraIntrinsics(fx, fx, (w - 1) / 2, (h - 1) / 2, w, h)
    poses, planes = [], []
    for s in shifts:
        poses.append(Se3Transform(np.eye(3), np.asarray(s, dtype=np.float64)))
        planes.append(np.full((h, w), 1.0 / (z0 - s[2]), dtype=np.float32))
    d = np.stack(planes)
    v = len(shifts)
    color = np.full((v, h, w, 3), 0.5, dtype=np.float32)
    normals = np.zeros((v, h, w, 3), dtype=np.float32)
    normals[..., 2] = -1.0
    area = np.full((v, h, w), 0.02, dtype=np.float32)
    ids = np.ones((v, h, w), dtype=np.uint64)
    return make_bundle(d, color, normals, area, ids, k, poses)


def _noisy_bundle(seed, v=2, h=12, w=36, hole_frac=0.08):
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(14.0, 14.0, (w - 1) / 2, (h - 1) / 2, w, h)
    d = rng.uniform(0.25, 0.75, size=(v, h, w))
    d[rng.random((v, h, w)) < hole_frac] = 0.0
    color = rng.uniform(0, 1, size=(v, h, w, 3))
    normals = np.zeros((v, h, w, 3))
    normals[..., 2] = -1.0
    area = rng.uniform(0.01, 0.1, size=(v, h, w))
    ids = np.where(d > 0, np.uint64(7), np.uint64(0))
    poses = [
        Se3Transform(np.eye(3), [0.021 * i, -0.013 * i, 0.017 * i]) for i in range(v)
    ]
    return make_bundle(d, color, normals, area, ids, k, poses)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_data, w.lambda_grad, w.lambda_gc, w.lambda_reg) == (1.0, 0.1, 0.1, 1e-6)

    @pytest.mark.parametrize("field", ["lambda_data", "lambda_grad", "lambda_gc", "lambda_reg"])
    def test_negative_rejected(self, field):
        with pytest.raises(LossError):
            LossWeights(**{field: -0.01})


class TestBerhu:
    def test_hand_computed_value_and_gradient(self):
        # max |r| = 5 -> c = 1; per pixel: 1 (linear), (4+1)/2, (25+1)/2,
        # (9+1)/2 -> mean (1 + 2.5 + 13 + 5)/4
        g = Graph(np.float64)
        r = g.parameter("r", np.array([1.0, 2.0, 5.0, -3.0]))
        out = berhu(r, np.ones(4, dtype=bool))
        np.testing.assert_allclose(out.data, 5.375, rtol=1e-12)
        # Non-max pixels: sign(r)/4 on the linear branch, r/c/4 on the
        # quadratic one.  The max pixel gets r/c/4 plus the threshold chain
        # 0.2 * sum((1/2 - r^2/(2 c^2))/4) = -0.875.
        store = g.backward(out)
        np.testing.assert_allclose(store["r"], [0.25, 0.5, 0.375, -0.75], rtol=1e-12)

    def test_threshold_ignores_masked_pixels(self):
        # the masked 10 must not set c; c = 0.2 * 2, both pixels quadratic
        r = Tensor(np.array([10.0, 1.0, 2.0]))
        out = berhu(r, np.array([False, True, True]))
        expected = ((1 + 0.4**2) / 0.8 + (4 + 0.4**2) / 0.8) / 2
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_zero_residuals(self):
        out = berhu(Tensor(np.zeros((3, 3))), np.ones((3, 3), dtype=bool))
        assert out.data == 0.0

    def test_empty_mask(self):
        out = berhu(Tensor(np.ones(5)), np.zeros(5, dtype=bool))
        assert out.data == 0.0

    def test_branches_agree_at_threshold(self):
        # both berHu branches equal c at |r| = c, so the loss is continuous
        base = np.array([5.0, 1.0])  # c = 1, second pixel sits at the seam
        lo = berhu(Tensor(np.array([5.0, 1.0 - 1e-7])), np.ones(2, bool)).data
        hi = berhu(Tensor(np.array([5.0, 1.0 + 1e-7])), np.ones(2, bool)).data
        at = berhu(Tensor(base), np.ones(2, bool)).data
        assert abs(hi - at) < 1e-6 and abs(at - lo) < 1e-6

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        r = rng.uniform(0.2, 1.0, size=(3, 4)) * np.sign(rng.normal(size=(3, 4)))
        r[1, 2] = 3.0  # unique, well-separated maximum
        mask = rng.random((3, 4)) > 0.25
        mask[1, 2] = True
        check_gradients(lambda g, r: berhu(r, mask), [r])

    @given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative_and_symmetric(self, scale, seed):
        r = np.random.default_rng(seed).normal(0, scale, size=(4, 5))
        mask = np.random.default_rng(seed + 1).random((4, 5)) > 0.3
        a = berhu(Tensor(r), mask).data
        b = berhu(Tensor(-r), mask).data
        assert a >= 0.0
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestGradLoss:
    def test_equal_inputs(self):
        rng = np.random.default_rng(0)
        plane = rng.uniform(0, 1, size=(6, 8))
        out = grad_loss(Tensor(plane), plane, np.ones((6, 8), dtype=bool))
        assert out.data == 0.0

    def test_constant_offset_ignored(self):
        rng = np.random.default_rng(1)
        label = rng.uniform(0, 1, size=(6, 8))
        out = grad_loss(Tensor(label + 3.7), label, np.ones((6, 8), dtype=bool))
        assert abs(float(out.data)) < 1e-5

    def test_horizontal_ramp_value(self):
        # Sobel x response to the ramp s*u is 8s at every interior pixel and
        # the y response is 0, so the loss is 0.5 * 8 * |s|.
        s = 0.25
        u = np.arange(10, dtype=np.float64)
        pred = np.broadcast_to(s * u, (6, 10)).copy()
        out = grad_loss(Tensor(pred), np.zeros((6, 10)), np.ones((6, 10), dtype=bool))
        np.testing.assert_allclose(out.data, 4 * s, rtol=1e-9)

    def test_vertical_ramp_value(self):
        s = -0.4
        v = np.arange(7, dtype=np.float64)[:, None]
        pred = np.broadcast_to(s * v, (7, 9)).copy()
        out = grad_loss(Tensor(pred), np.zeros((7, 9)), np.ones((7, 9), dtype=bool))
        np.testing.assert_allclose(out.data, 4 * abs(s), rtol=1e-9)

    def test_spike_under_invalid_pixel_ignored(self):
        # every Sobel response whose 3x3 support touches the invalid spike
        # is excluded, so the mismatch is invisible
        pred = np.zeros((7, 9))
        pred[3, 4] = 100.0
        mask = np.ones((7, 9), dtype=bool)
        mask[3, 4] = False
        out = grad_loss(Tensor(pred), np.zeros((7, 9)), mask)
        assert out.data == 0.0

    def test_stacked_views_match_single(self):
        rng = np.random.default_rng(2)
        pred = rng.uniform(0, 1, size=(5, 8))
        label = rng.uniform(0, 1, size=(5, 8))
        mask = np.ones((5, 8), dtype=bool)
        single = grad_loss(Tensor(pred), label, mask).data
        stacked = grad_loss(
            Tensor(np.stack([pred, pred])), np.stack([label, label]), np.stack([mask, mask])
        ).data
        np.testing.assert_allclose(stacked, single, rtol=1e-12)

    def test_image_too_small_for_support(self):
        out = grad_loss(Tensor(np.ones((2, 2))), np.zeros((2, 2)), np.ones((2, 2), dtype=bool))
        assert out.data == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(LossError):
            grad_loss(Tensor(np.ones((4, 4))), np.ones((4, 5)), np.ones((4, 5), dtype=bool))

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0, 1, size=(1, 5, 7))
        label = rng.uniform(0, 1, size=(1, 5, 7))
        mask = np.ones((1, 5, 7), dtype=bool)
        mask[0, 1, 2] = mask[0, 3, 5] = False  # punch holes, keep erosion alive
        check_gradients(lambda g, p: grad_loss(p, label, mask), [pred])


class TestGcLoss:
    def test_clean_plane_consistent(self):
        bundle = _plane_bundle()
        preds = [Tensor(p.astype(np.float64)) for p in bundle.idepth_lq]
        out = gc_loss(preds, bundle)
        # leftover is pure float32 render rounding, orders below the signal
        assert 0.0 <= float(out.data) < 1e-7

    def test_lateral_shift_consistent(self):
        bundle = _plane_bundle(shifts=((0.0, 0.0, 0.0), (0.1, 0.0, 0.0)))
        preds = [Tensor(p.astype(np.float64)) for p in bundle.idepth_lq]
        assert float(gc_loss(preds, bundle).data) < 1e-7

    def test_scaled_view_flagged(self):
        bundle = _plane_bundle()
        preds = [
            Tensor(bundle.idepth_lq[0].astype(np.float64)),
            Tensor(2.0 * bundle.idepth_lq[1].astype(np.float64)),
        ]
        assert float(gc_loss(preds, bundle).data) > 1e-2

    def test_single_view(self):
        bundle = _plane_bundle(shifts=((0.0, 0.0, 0.0),))
        out = gc_loss([Tensor(bundle.idepth_lq[0].astype(np.float64))], bundle)
        assert out.data == 0.0

    def test_input_driven_matches_predicted_at_input(self):
        bundle = _noisy_bundle(5)
        preds = [Tensor(p.astype(np.float64)) for p in bundle.idepth_lq]
        a = gc_loss(preds, bundle, from_predicted=True).data
        b = gc_loss(preds, bundle, from_predicted=False).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("from_predicted", [True, False])
    def test_finite_differences(self, from_predicted):
        bundle = _noisy_bundle(6, h=8, w=12, hole_frac=0.0)
        rng = np.random.default_rng(7)
        preds = [
            bundle.idepth_lq[i].astype(np.float64) + rng.normal(0, 0.02, (8, 12))
            for i in range(2)
        ]
        check_gradients(
            lambda g, a, b: gc_loss([a, b], bundle, from_predicted=from_predicted),
            preds,
            atol=1e-7,
        )

    def test_behind_camera_predictions_stay_finite(self):
        # camera 1 sits past the plane, so warps cross z = 0; the masked
        # denominator guard must keep both passes free of NaN/inf
        bundle = _plane_bundle(shifts=((0.0, 0.0, 0.0), (0.0, 0.0, 3.0)))
        g = Graph(np.float64)
        p0 = g.parameter("p0", bundle.idepth_lq[0].astype(np.float64))
        p1 = g.parameter("p1", np.full_like(bundle.idepth_lq[1], 0.3, dtype=np.float64))
        out = gc_loss([p0, p1], bundle)
        assert np.isfinite(out.data)
        store = g.backward(out)
        assert np.isfinite(store["p0"]).all() and np.isfinite(store["p1"]).all()


class TestRegLoss:
    def test_sums_squared_weights_only(self):
        params = {
            "a.w": Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
            "a.b": Tensor(np.array([100.0])),
            "a.n.g": Tensor(np.array([5.0])),
        }
        np.testing.assert_allclose(reg_loss(params).data, 30.0, rtol=1e-12)

    def test_gradient_is_twice_weight(self):
        g = Graph(np.float64)
        params = {
            "a.w": g.parameter("a.w", np.array([1.5, -2.0])),
            "a.b": g.parameter("a.b", np.array([3.0])),
        }
        store = g.backward(reg_loss(params))
        np.testing.assert_allclose(store["a.w"], [3.0, -4.0], rtol=1e-12)
        np.testing.assert_array_equal(store["a.b"], [0.0])

    def test_no_weights_rejected(self):
        with pytest.raises(LossError):
            reg_loss({"a.b": Tensor(np.ones(2))})


class TestTotalLoss:
    def test_weighted_sum(self):
        components = {
            "data": Tensor(np.asarray(2.0)),
            "grad": Tensor(np.asarray(3.0)),
            "gc": Tensor(np.asarray(5.0)),
            "reg": Tensor(np.asarray(7.0)),
        }
        out = total_loss(components, LossWeights())
        np.testing.assert_allclose(out.data, 2.0 + 0.3 + 0.5 + 7e-6, rtol=1e-12)


def _fake_single_view(error_plane, d_lq, intrinsics):
    """One-view bundle plus a RefinedView holding a crafted error map."""
    h, w = error_plane.shape
    color = np.zeros((1, h, w, 3), np.float32)
    normals = np.zeros((1, h, w, 3), np.float32)
    normals[..., 2] = -1.0
    area = np.full((1, h, w), 0.02, np.float32)
    ids = np.where(d_lq[None] > 0, np.uint64(1), np.uint64(0))
    bundle = make_bundle(d_lq[None], color, normals, area, ids,
                         intrinsics, [Se3Transform(np.eye(3), np.zeros(3))])
    err = Tensor(error_plane.astype(np.float64))
    d_star = Tensor(np.maximum(error_plane + d_lq, 0.0).astype(np.float64))
    return bundle, [RefinedView(d_star=d_star, error=err)]


class TestBatchLosses:
    def test_threshold_pools_across_bundles(self):
        # bundle A is all 0.1-residuals; bundle B adds a single 10.  Pooled
        # c = 2 keeps every 0.1 on the linear branch: mean = (12*0.1 +
        # 11*0.1 + (100+4)/4) / 24.  A per-bundle threshold would square
        # the 0.1s in bundle A.
        k = CameraIntrinsics(10.0, 10.0, 1.5, 1.0, 4, 3)
        d_lq = np.full((3, 4), 0.5, np.float32)
        err_a = np.full((3, 4), 0.1)
        err_b = np.full((3, 4), 0.1)
        err_b[1, 2] = 10.0
        bundle_a, views_a = _fake_single_view(err_a, d_lq, k)
        bundle_b, views_b = _fake_single_view(err_b, d_lq, k)
        labels = [d_lq.copy()[None], d_lq.copy()[None]]  # g = 0 everywhere
        params = {"x.w": Tensor(np.zeros(2))}
        out = batch_losses([views_a, views_b], [bundle_a, bundle_b], labels,
                           LossWeights(), params)
        np.testing.assert_allclose(out["data"].data, 28.3 / 24, rtol=1e-12)

    def test_labels_masked_to_shared_support(self):
        # supervision exists only where both renders have geometry; two
        # valid pixels with g = 1 and zero prediction give the quadratic
        # berHu value (1 + 0.2^2) / 0.4
        k = CameraIntrinsics(10.0, 10.0, 1.5, 1.0, 4, 3)
        d_lq = np.full((3, 4), 0.5, np.float32)
        d_hq = np.zeros((3, 4), np.float32)
        d_hq[0, 0] = d_hq[2, 3] = 1.5
        bundle, views = _fake_single_view(np.zeros((3, 4)), d_lq, k)
        out = batch_losses([views], [bundle], [d_hq[None]], LossWeights(),
                           {"x.w": Tensor(np.zeros(2))})
        np.testing.assert_allclose(out["data"].data, 2.6, rtol=1e-12)
        assert out["grad"].data == 0.0  # isolated pixels never survive erosion

    def test_matches_direct_composition(self):
        # wiring check: components equal the directly composed calls on the
        # same forward outputs
        cfg = ModelConfig(base_width=2)
        params = init_params(cfg, seed=1)
        rng = np.random.default_rng(8)
        params["dec.out.w"] = rng.normal(0, 0.05, params["dec.out.w"].shape).astype(np.float32)
        consts = {n: Tensor(v.astype(np.float64)) for n, v in params.items()}
        bundles = [_noisy_bundle(9, h=12, w=16), _noisy_bundle(10, h=12, w=16)]
        outputs = [forward_views(b, consts, cfg) for b in bundles]
        labels = [np.where(b.idepth_lq > 0, b.idepth_lq * 1.2, 0.0) for b in bundles]
        got = batch_losses(outputs, bundles, labels, LossWeights(), consts)

        errors, glabels, vmasks = [], [], []
        for views, b, hq in zip(outputs, bundles, labels):
            for t, view in enumerate(views):
                errors.append(view.error)
                valid = (hq[t] > 0) & (b.idepth_lq[t] > 0)
                glabels.append(np.where(valid, hq[t] - b.idepth_lq[t], 0.0))
                vmasks.append(valid)
        residual = ad.stack(errors, axis=0) - np.stack(glabels)
        np.testing.assert_array_equal(
            got["data"].data, berhu(residual, np.stack(vmasks)).data
        )
        np.testing.assert_array_equal(
            got["grad"].data,
            grad_loss(ad.stack(errors, axis=0), np.stack(glabels), np.stack(vmasks)).data,
        )
        np.testing.assert_array_equal(got["reg"].data, reg_loss(consts).data)
        np.testing.assert_array_equal(
            got["total"].data, total_loss(got, LossWeights()).data
        )

    def test_gc_pools_identical_bundles(self):
        bundle = _plane_bundle()
        preds = [
            Tensor(bundle.idepth_lq[0].astype(np.float64)),
            Tensor(1.5 * bundle.idepth_lq[1].astype(np.float64)),
        ]
        views = [RefinedView(d_star=p, error=p) for p in preds]
        labels = np.where(bundle.idepth_lq > 0, bundle.idepth_lq, 0.0)
        out = batch_losses([views, views], [bundle, bundle], [labels, labels],
                           LossWeights(), {"x.w": Tensor(np.zeros(2))})
        single = gc_loss(preds, bundle).data
        np.testing.assert_array_equal(out["gc"].data, single)

    def test_length_mismatch_rejected(self):
        bundle = _plane_bundle()
        with pytest.raises(LossError):
            batch_losses([], [bundle], [], LossWeights(), {})

    def test_end_to_end_objective_finite_differences(self):
        # the full training objective on a tiny model stays consistent with
        # central differences at 64-bit
        bundle = _noisy_bundle(11, v=2, h=12, w=36)
        labels = [np.where(bundle.idepth_lq > 0, bundle.idepth_lq * 1.15 + 0.01, 0.0)]
        cfg = ModelConfig(base_width=4)
        rng = np.random.default_rng(12)
        params = {
            k: v.astype(np.float64) for k, v in init_params(cfg, seed=13).items()
        }
        params["dec.out.w"] = rng.normal(0, 0.05, params["dec.out.w"].shape)
        params["dec.out.b"] = rng.normal(0, 0.05, params["dec.out.b"].shape)
        names = sorted(params)
        weights = LossWeights()

        def objective(vals):
            consts = {k: Tensor(np.asarray(vals[k], np.float64)) for k in names}
            outs = forward_views(bundle, consts, cfg)
            return float(batch_losses([outs], [bundle], labels, weights, consts)["total"].data)

        g = Graph(np.float64)
        handles = {k: g.parameter(k, params[k]) for k in names}
        outs = forward_views(bundle, handles, cfg)
        store = g.backward(batch_losses([outs], [bundle], labels, weights, handles)["total"])

        step = 1e-5
        for name in rng.choice(names, size=10, replace=False):
            flat_idx = int(rng.integers(params[name].size))
            work = {k: v.copy() for k, v in params.items()}
            work[name].reshape(-1)[flat_idx] += step
            up = objective(work)
            work[name].reshape(-1)[flat_idx] -= 2 * step
            down = objective(work)
            numeric = (up - down) / (2 * step)
            analytic = store[name].reshape(-1)[flat_idx]
            np.testing.assert_allclose(
                analytic, numeric, rtol=5e-3, atol=1e-7,
                err_msg=f"{name}[{flat_idx}]",
            )
