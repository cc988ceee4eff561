import numpy as np
import pytest

from swindepth.config import RunConfig
from swindepth.decoder import DepthPyramid
from swindepth.loss import (
    Intrinsics,
    LossConfig,
    NumericError,
    TrainBatch,
    disp_to_depth,
    intrinsics_matrices,
    min_reproj_automask,
    photometric_error,
    smoothness,
    ssim,
    synthesize_view,
    total_loss,
)
from swindepth.numerics import Tensor, backward, default_dtype, finite_diff_check, ops
from swindepth.posenet import se3
from swindepth.synthdata import corridor_scene, render_sequence
from swindepth.trainer import OptimState, adam_step, build_models, step_loss


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def translation(tx, ty=0.0, tz=0.0, B=1):
    T = np.tile(np.eye(4), (B, 1, 1))
    T[:, :3, 3] = (tx, ty, tz)
    return T


class TestDispToDepth:
    def test_limits(self):
        assert disp_to_depth(0.0) == pytest.approx(100.0, rel=1e-12)
        assert disp_to_depth(1.0) == pytest.approx(1 / (0.01 + 9.99), rel=1e-12)

    def test_strictly_decreasing(self):
        d = np.linspace(1e-4, 1 - 1e-4, 500)
        assert np.all(np.diff(disp_to_depth(d)) < 0)


class TestIntrinsics:
    def test_scaled_consistent_with_half_pixel_resize(self):
        K0 = Intrinsics(50.0, 40.0, 15.5, 7.5)
        point = np.array([0.3, -0.2, 4.0])
        for level in range(4):
            f = 2.0 ** level
            u0, v0, w0 = K0.matrix() @ point
            u, v, w = K0.scaled(level).matrix() @ point
            # pixel center x at full res sits at (x + 0.5) / f - 0.5 after downsampling by f
            assert u / w == pytest.approx((u0 / w0 + 0.5) / f - 0.5, abs=1e-12)
            assert v / w == pytest.approx((v0 / w0 + 0.5) / f - 0.5, abs=1e-12)

    def test_positive_focal(self):
        with pytest.raises(Exception):
            Intrinsics(0.0, 1.0, 0, 0)

    def test_batched_matrices(self):
        rows = np.array([[10.0, 20.0, 3.5, 1.5], [8.0, 8.0, 0.5, 0.5]])
        K = intrinsics_matrices(rows, 1)
        assert K.shape == (2, 3, 3)
        np.testing.assert_allclose(K[0], Intrinsics(*rows[0]).scaled(1).matrix())


class TestSynthesizeView:
    def test_identity_transform_returns_source(self):
        rng = np.random.default_rng(0)
        src = Tensor(rng.random((2, 3, 6, 9)))
        depth = Tensor(rng.uniform(1, 10, (2, 1, 6, 9)))
        out = synthesize_view(src, depth, Tensor(translation(0, B=2)), Intrinsics(5, 5, 4, 2.5).matrix())
        np.testing.assert_allclose(out.data, src.data, atol=1e-12)

    def test_plane_translation_shift(self):
        h, w, fx, z0, tx = 8, 40, 20.0, 5.0, 0.5
        ramp = np.broadcast_to(np.arange(w, dtype=np.float64) / w, (1, 3, h, w)).copy()
        depth = Tensor(np.full((1, 1, h, w), z0))
        out = synthesize_view(Tensor(ramp), depth, Tensor(translation(tx)), Intrinsics(fx, fx, w / 2, h / 2).matrix())
        shift = fx * tx / z0
        inner = slice(0, w - int(np.ceil(shift)) - 1)
        np.testing.assert_allclose(out.data[..., inner], ramp[..., inner] + shift / w, atol=1e-12)

    def test_points_behind_camera_stay_finite(self):
        src = Tensor(np.random.default_rng(1).random((1, 3, 4, 4)))
        out = synthesize_view(src, Tensor(np.ones((1, 1, 4, 4))), Tensor(translation(0, 0, -5.0)),
                              Intrinsics(2, 2, 1.5, 1.5).matrix())
        assert np.all(np.isfinite(out.data))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        src = param(rng.random((1, 2, 5, 6)))
        depth = param(rng.uniform(3, 6, (1, 1, 5, 6)))
        pose = param([[0.013, -0.021, 0.017, 0.11, -0.07, 0.05]])
        K = Intrinsics(4.1, 3.9, 2.4, 1.9).matrix()
        proj = rng.normal(size=(1, 2, 5, 6))
        f = lambda: (synthesize_view(src, depth, se3(pose), K) * proj).sum()
        assert finite_diff_check(f, [src, depth, pose], eps=1e-6) < 1e-5


class TestSSIM:
    def test_self_similarity(self):
        x = Tensor(np.random.default_rng(3).random((1, 3, 7, 8)))
        np.testing.assert_allclose(ssim(x, x).data, 1.0, atol=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = Tensor(rng.random((1, 3, 5, 5))), Tensor(rng.random((1, 3, 5, 5)))
        np.testing.assert_allclose(ssim(a, b).data, ssim(b, a).data, atol=1e-15)

    def test_constant_images_golden(self):
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        golden = (2 * 0 * 1 + c1) * (2 * 0 + c2) / ((0 + 1 + c1) * (0 + 0 + c2))
        out = ssim(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.ones((1, 3, 4, 4)))).data
        np.testing.assert_allclose(out, golden, rtol=1e-12)
        assert golden == pytest.approx(9.999000099990002e-05, rel=1e-12)

    def test_range(self):
        rng = np.random.default_rng(5)
        out = ssim(Tensor(rng.random((2, 3, 6, 6))), Tensor(rng.random((2, 3, 6, 6)))).data
        assert out.min() >= -1 and out.max() <= 1


class TestPhotometric:
    def test_identical_zero(self):
        x = Tensor(np.random.default_rng(6).random((1, 3, 5, 5)))
        np.testing.assert_array_equal(photometric_error(x, x).data, 0.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        pe = photometric_error(Tensor(rng.random((2, 3, 6, 7))), Tensor(rng.random((2, 3, 6, 7)))).data
        assert pe.shape == (2, 1, 6, 7) and pe.min() >= 0

    def test_l1_only(self):
        pe = photometric_error(Tensor(np.full((1, 3, 1, 1), 0.3)), Tensor(np.full((1, 3, 1, 1), 0.7)), alpha=0.0)
        assert pe.data.item() == pytest.approx(0.4, abs=1e-15)


class TestAutomask:
    def test_perfect_warp(self):
        zero = Tensor(np.zeros((1, 1, 2, 3)))
        ident = Tensor(np.full((1, 1, 2, 3), 0.1))
        loss, mask = min_reproj_automask([zero, zero], [ident, ident])
        assert mask.all() and np.all(loss.data == 0)

    def test_static_scene_tie_is_masked(self):
        # static scene and camera: every error is zero, strict < masks everything out
        pe = Tensor(np.zeros((1, 1, 3, 3)))
        loss, mask = min_reproj_automask([pe, pe], [pe, pe])
        assert not mask.any() and np.all(loss.data == 0)

    def test_masked_pixels_hold_identity_error(self):
        rng = np.random.default_rng(8)
        warped = [param(rng.random((1, 1, 4, 4))) for _ in range(2)]
        ident = [Tensor(rng.random((1, 1, 4, 4))) for _ in range(2)]
        loss, mask = min_reproj_automask(warped, ident)
        expected = np.minimum(np.minimum(*[w.data for w in warped]), np.minimum(*[i.data for i in ident]))
        np.testing.assert_array_equal(loss.data, expected)
        backward(loss.sum())
        best = np.minimum(warped[0].data, warped[1].data)
        np.testing.assert_array_equal(warped[0].grad + warped[1].grad, mask.astype(float))
        assert np.array_equal(mask, best < np.minimum(ident[0].data, ident[1].data))

    def test_tie_noise_only_moves_the_decision(self):
        pe = Tensor(np.full((1, 1, 1, 2), 0.3))
        loss, mask = min_reproj_automask([pe], [pe], tie_noise=np.array([[[[1e-5, -1e-5]]]]))
        assert mask.tolist() == [[[[True, False]]]]
        np.testing.assert_array_equal(loss.data, 0.3)

    def test_enumerated_case(self):
        loss, mask = min_reproj_automask([Tensor(np.full((1, 1, 1, 1), 0.2)), Tensor(np.full((1, 1, 1, 1), 0.5))],
                                         [Tensor(np.full((1, 1, 1, 1), 0.3)), Tensor(np.full((1, 1, 1, 1), 0.4))])
        assert mask.item() and loss.data.item() == 0.2

    def test_mask_is_constant_in_backward(self):
        a = param([[[[0.2, 0.6]]]])
        loss, mask = min_reproj_automask([a], [Tensor(np.full((1, 1, 1, 2), 0.4))])
        backward(loss.sum())
        np.testing.assert_array_equal(a.grad, [[[[1.0, 0.0]]]])

    def test_object_moving_with_camera(self):
        # a patch that is identical in source and target (moves with the camera) gets mask 0
        rng = np.random.default_rng(9)
        h, w = 12, 16
        tgt = rng.random((1, 3, h, w))
        src = np.roll(tgt, 1, axis=3)
        src[..., 4:8, 6:10] = tgt[..., 4:8, 6:10]
        # warp that undoes the background roll: shift by one pixel
        K = Intrinsics(10.0, 10.0, 7.5, 5.5).matrix()
        warped = synthesize_view(Tensor(src), Tensor(np.full((1, 1, h, w), 5.0)), Tensor(translation(0.5)), K)
        pe_w = photometric_error(warped, Tensor(tgt))
        pe_id = photometric_error(Tensor(src), Tensor(tgt))
        _, mask = min_reproj_automask([pe_w], [pe_id])
        assert not mask[0, 0, 5:7, 7:9].any()
        assert mask[0, 0, :, 11:14].mean() > 0.9


class TestSmoothness:
    def test_constant_disparity(self):
        d = Tensor(np.full((1, 1, 5, 6), 0.3))
        assert smoothness(d, Tensor(np.random.default_rng(10).random((1, 3, 5, 6)))).item() == 0.0

    def test_edge_aware(self):
        d = np.full((1, 1, 4, 6), 0.2)
        d[..., 3:] = 0.6
        flat = np.zeros((1, 3, 4, 6))
        edge = flat.copy()
        edge[..., 3:] = 1.0
        assert smoothness(Tensor(d), Tensor(edge)).item() < smoothness(Tensor(d), Tensor(flat)).item()

    def test_one_by_two_golden(self):
        out = smoothness(Tensor(np.array([[[[0.2, 0.4]]]])), Tensor(np.zeros((1, 3, 1, 2)))).item()
        assert out == pytest.approx(0.2 / (0.3 + 1e-7), rel=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        d = param(rng.uniform(0.1, 0.9, (2, 1, 4, 5)))
        img = Tensor(rng.random((2, 3, 4, 5)))
        assert finite_diff_check(lambda: smoothness(d, img), d, eps=1e-6) < 1e-6


def tiny_inputs(rng, B=1, h=16, w=16):
    target = rng.random((B, 3, h, w))
    sources = {k: np.clip(np.roll(target, k, axis=3) + 0.05 * rng.random((B, 3, h, w)), 0, 1) for k in (-1, 1)}
    batch = TrainBatch(Tensor(target), {k: Tensor(v) for k, v in sources.items()},
                       np.tile([[0.58 * w, 1.92 * h, w / 2 - 0.5, h / 2 - 0.5]], (B, 1)))
    disps = [param(rng.uniform(0.05, 0.6, (B, 1, h // 2 ** l, w // 2 ** l))) for l in (3, 2, 1, 0)]
    poses = {k: param(rng.normal(0, 0.02, (B, 6)) + np.array([0, 0, 0, 0.13 * k, 0.01, 0.02])) for k in (-1, 1)}
    return batch, disps, poses


def loss_of(batch, disps, poses, config=LossConfig(automask_noise=0.0), rng=None, terms=False):
    transforms = {k: se3(p) for k, p in poses.items()}
    return total_loss(batch, DepthPyramid(*disps), transforms, config, rng, return_terms=terms)


class TestTotalLoss:
    def test_composite_gradients(self):
        rng = np.random.default_rng(12)
        batch, disps, poses = tiny_inputs(rng)
        f = lambda: loss_of(batch, disps, poses)
        assert finite_diff_check(f, disps + list(poses.values()), eps=1e-6, floor_frac=1e-3, max_entries=24) < 1e-5

    def test_full_res_variant_gradients(self):
        rng = np.random.default_rng(13)
        batch, disps, poses = tiny_inputs(rng)
        cfg = LossConfig(automask_noise=0.0, full_res=True)
        f = lambda: loss_of(batch, disps, poses, cfg)
        assert finite_diff_check(f, disps + list(poses.values()), eps=1e-6, floor_frac=1e-3, max_entries=24) < 1e-5

    def test_random_inputs_finite_positive(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            batch, disps, poses = tiny_inputs(rng)
            value = loss_of(batch, disps, poses, LossConfig(), rng).item()
            assert np.isfinite(value) and value > 0

    def test_terms_reported(self):
        batch, disps, poses = tiny_inputs(np.random.default_rng(15))
        _, terms = loss_of(batch, disps, poses, terms=True)
        assert {"reproj/0", "smooth/3", "mask/2", "total"} <= set(terms)
        assert 0 <= terms["mask/0"] <= 1

    def test_zero_smooth_weight_removes_smoothness_path(self):
        rng = np.random.default_rng(16)
        batch, disps, poses = tiny_inputs(rng)

        def disp_grads(weight):
            for d in disps:
                d.zero_grad()
            backward(loss_of(batch, disps, poses, LossConfig(automask_noise=0.0, smooth_weight=weight)))
            return [d.grad.copy() for d in disps]

        with_smooth, without = disp_grads(1e-3), disp_grads(0.0)
        for level, (a, b) in enumerate(zip(reversed(with_smooth), reversed(without))):
            d = disps[3 - level]
            d.zero_grad()
            img = ops.bilinear_resize(batch.target, *d.shape[-2:])
            backward(smoothness(d, img) * (1e-3 / 2 ** level / 4))
            np.testing.assert_allclose(a - b, d.grad, atol=1e-15)

    def test_gt_depth_and_pose_near_noise_floor(self):
        seq = render_sequence(corridor_scene(seed=2, frames=8))
        t = 4
        cfg = LossConfig(automask=False)
        lo, hi = 1 / cfg.max_depth, 1 / cfg.min_depth
        disp_full = (1.0 / seq.depth[t] - lo) / (hi - lo)
        disps = []
        for level in (3, 2, 1, 0):
            d = ops.bilinear_resize(Tensor(disp_full[None, None].astype(np.float64)), 64 >> level, 192 >> level)
            disps.append(d)
        batch = TrainBatch(Tensor(seq.frames[t:t + 1].astype(np.float64)),
                           {k: Tensor(seq.frames[t + k:t + k + 1].astype(np.float64)) for k in (-1, 1)},
                           seq.intrinsics[None])
        transforms = {k: Tensor(seq.relative_pose(t, t + k)[None]) for k in (-1, 1)}
        _, terms = total_loss(batch, DepthPyramid(*disps), transforms, cfg, return_terms=True)
        assert terms["reproj/0"] < 0.01

    def test_nan_raises_with_payload(self):
        batch, disps, poses = tiny_inputs(np.random.default_rng(17))
        disps[3] = Tensor(np.full(disps[3].shape, np.nan))
        with pytest.raises(NumericError) as info:
            loss_of(batch, disps, poses)
        assert "disp/0" in info.value.payload


def adam_on_one_batch(automask, lr=1e-3, steps=50, seed=0):
    cfg = RunConfig(height=32, width=64, embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 1, 2, 2), proj_dim=8,
                    pose_widths=(8, 8, 16, 16, 16), precision="float64", lr=lr, automask=automask)
    models = build_models(cfg, np.random.default_rng(seed))
    params = models.named_parameters()
    state = OptimState.zeros(params)
    seq = render_sequence(corridor_scene(seed=1, height=32, width=64, frames=4))
    batch = TrainBatch(Tensor(seq.frames[1:2].astype(np.float64)),
                       {k: Tensor(seq.frames[1 + k:2 + k].astype(np.float64)) for k in (-1, 1)},
                       seq.intrinsics[None])
    values = []
    for _ in range(steps):
        for p in params.values():
            p.zero_grad()
        loss, _ = step_loss(models, batch, cfg, np.random.default_rng(1))
        backward(loss)
        values.append(loss.item())
        adam_step(params, {n: p.grad for n, p in params.items()}, state, cfg.lr)
    return values


@pytest.mark.parametrize("seed", [0, 1])
def test_fifty_adam_steps_reduce_loss(seed):
    values = adam_on_one_batch(automask=False, seed=seed)
    assert values[-1] <= 0.7 * values[0]


def test_fifty_adam_steps_with_automask_decrease():
    values = adam_on_one_batch(automask=True, lr=2e-3)
    assert values[-1] < values[0]
