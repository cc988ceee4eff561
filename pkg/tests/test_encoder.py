import numpy as np
import pytest

from swindepth.encoder import (
    EncoderConfig,
    PatchEmbed,
    PatchMerging,
    SwinEncoder,
    TransformerBlock,
    WindowAttention,
    block_pair,
    depth_to_space,
    nchw_to_tokens,
    parameter_breakdown,
    space_to_depth,
)
from swindepth.numerics import ContractError, Tensor, backward, default_dtype, finite_diff_check, ops


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1)


def tiny_config(**kw):
    base = dict(embed_dim=8, window=4, depths=(2, 2, 2, 2), heads=(1, 2, 2, 4))
    base.update(kw)
    return EncoderConfig(**base)


def sharpen(m, rng, std=0.3):
    """Larger weights so attention is far from uniform and gradients are well conditioned."""
    for name, p in m.named_parameters():
        if p.data.ndim == 2 or name.endswith("bias"):
            p.data[...] = rng.normal(size=p.shape) * std


def checkable(named):
    # key biases shift every score in a row equally, so softmax makes their gradient exactly zero
    return [p for n, p in named if not n.endswith("k.bias")]


def zero_module(m):
    for p in m.parameters():
        p.data[...] = 0.0


class TestConfig:
    def test_odd_depth_rejected_with_shift(self):
        with pytest.raises(ContractError):
            EncoderConfig(depths=(2, 3, 2, 2))

    def test_odd_depth_allowed_without_shift(self):
        EncoderConfig(depths=(1, 1, 1, 1), shifted=False)

    def test_heads_must_divide(self):
        with pytest.raises(ContractError):
            EncoderConfig(embed_dim=64, heads=(3, 4, 8, 16))


class TestPatchEmbed:
    def test_shape(self, rng):
        out = PatchEmbed(rng, 3, 64)(Tensor(rng.uniform(size=(1, 3, 64, 64))))
        assert out.shape == (1, 64, 32, 32)

    def test_constant_image(self, rng):
        out = PatchEmbed(rng, 3, 16)(Tensor(np.full((1, 3, 8, 12), 0.3)))
        assert np.all(out.data == out.data[:, :, :1, :1])

    def test_linear_without_bias(self, rng):
        pe = PatchEmbed(rng, 3, 16)
        pe.proj.bias.data[...] = 0.0
        x = rng.uniform(size=(1, 3, 8, 8))
        np.testing.assert_allclose(pe(Tensor(2 * x)).data, 2 * pe(Tensor(x)).data, rtol=1e-13)

    def test_patch_locality(self, rng):
        pe = PatchEmbed(rng, 3, 4)
        x = Tensor(rng.uniform(size=(1, 3, 8, 8)), requires_grad=True)
        backward(pe(x)[:, :, 1, 2].sum())
        nz = np.argwhere(np.abs(x.grad).sum(axis=1)[0] > 0)
        assert {tuple(p) for p in nz} == {(2, 4), (2, 5), (3, 4), (3, 5)}

    def test_odd_size_rejected(self, rng):
        with pytest.raises(ContractError):
            PatchEmbed(rng, 3, 4)(Tensor(np.zeros((1, 3, 7, 8))))


def jacobian_footprint(fn, h, w, dim, rng):
    """Boolean (h*w, h*w) matrix: output token p depends on input token q."""
    x = Tensor(rng.normal(size=(1, h * w, dim)), requires_grad=True)
    out = fn(x)
    probe = rng.normal(size=(dim,))
    foot = np.zeros((h * w, h * w), dtype=bool)
    for p in range(h * w):
        x.zero_grad()
        backward((out[:, p] * probe).sum())
        foot[p] = np.abs(x.grad[0]).sum(axis=-1) != 0
    return foot


def window_ids(h, w, window, shift):
    """Window index of every token; shifted windows are offset tiles, clipped at the image edge."""
    r, c = np.divmod(np.arange(h * w), w)
    n_cols = (w + shift + window - 1) // window
    return ((r + shift) // window) * n_cols + (c + shift) // window


class TestWindowAttention:
    def test_softmax_rows_sum_to_one(self, rng):
        attn = WindowAttention(rng, 8, 2, 4)
        for shift in (0, 2):
            _, weights = attn(Tensor(rng.normal(size=(2, 64, 8))), 8, 8, shift, return_attention=True)
            np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-12)

    def test_shift0_locality_exact_zero(self, rng):
        attn = WindowAttention(rng, 8, 2, 4)
        foot = jacobian_footprint(lambda x: attn(x, 8, 8, 0), 8, 8, 8, rng)
        ids = window_ids(8, 8, 4, 0)
        np.testing.assert_array_equal(foot, ids[:, None] == ids[None, :])

    def test_shifted_mask_never_wraps(self, rng):
        attn = WindowAttention(rng, 8, 2, 4)
        foot = jacobian_footprint(lambda x: attn(x, 8, 8, 2), 8, 8, 8, rng)
        ids = window_ids(8, 8, 4, 2)
        np.testing.assert_array_equal(foot, ids[:, None] == ids[None, :])

    def test_pair_footprint_matches_brute_force(self, rng):
        blocks = block_pair(rng, 8, 2, 4)

        def pair(x):
            for b in blocks:
                x = b(x, 8, 8)
            return x

        foot = jacobian_footprint(pair, 8, 8, 8, rng)
        w_same = (lambda i: i[:, None] == i[None, :])(window_ids(8, 8, 4, 0))
        sw_same = (lambda i: i[:, None] == i[None, :])(window_ids(8, 8, 4, 2))
        oracle = (sw_same.astype(int) @ w_same.astype(int)) > 0
        np.testing.assert_array_equal(foot, oracle)
        # a perturbation at the origin reaches 1.5 windows along each axis
        reach = np.argwhere(foot[:, 0].reshape(8, 8))
        assert reach.max(axis=0).tolist() == [5, 5]
        # cross-window mixing actually happens
        assert (foot & ~w_same).any()

    def test_bad_resolution(self, rng):
        attn = WindowAttention(rng, 8, 2, 4)
        with pytest.raises(ContractError):
            attn(Tensor(np.zeros((1, 36, 8))), 6, 6)


class TestTransformerBlock:
    def test_zero_weights_identity(self, rng):
        blocks = block_pair(rng, 8, 2, 4)
        for b in blocks:
            zero_module(b.attn)
            zero_module(b.mlp)
        x = rng.normal(size=(2, 64, 8))
        z = Tensor(x)
        for b in blocks:
            z = b(z, 8, 8)
        np.testing.assert_array_equal(z.data, x)

    def test_pair_gradient(self, rng):
        blocks = block_pair(rng, 8, 2, 4)
        for b in blocks:
            sharpen(b, rng)
        x = Tensor(rng.normal(size=(1, 64, 8)), requires_grad=True)
        probe = rng.normal(size=(1, 64, 8))

        def f():
            z = x
            for b in blocks:
                z = b(z, 8, 8)
            return (z * probe).sum()

        params = [x] + [p for i, b in enumerate(blocks) for p in checkable(b.named_parameters(str(i)))]
        assert finite_diff_check(f, params) < 1e-5
        for b in blocks:
            assert np.abs(b.attn.k.bias.grad).max() < 1e-12

    def test_shape_preserved(self, rng):
        b = TransformerBlock(rng, 8, 2, 4, 2)
        assert b(Tensor(rng.normal(size=(3, 32, 8))), 4, 8).shape == (3, 32, 8)


class TestPatchMerging:
    def test_shape(self, rng):
        assert PatchMerging(rng, 64)(Tensor(rng.normal(size=(1, 64, 16, 16)))).shape == (1, 128, 8, 8)

    def test_rearrangement_is_permutation(self, rng):
        x = np.arange(2 * 6 * 4 * 3, dtype=np.float64).reshape(2, 6, 4, 3)
        y = space_to_depth(Tensor(x)).data
        assert y.shape == (2, 3, 2, 12)
        assert np.array_equal(np.sort(y.ravel()), x.ravel())
        np.testing.assert_array_equal(depth_to_space(Tensor(y)).data, x)

    def test_constant_input(self, rng):
        out = PatchMerging(rng, 8)(Tensor(np.full((1, 8, 4, 6), 1.7)))
        assert np.all(out.data == out.data[:, :, :1, :1])

    def test_odd_rejected(self, rng):
        with pytest.raises(ContractError):
            PatchMerging(rng, 8)(Tensor(np.zeros((1, 8, 5, 4))))


class TestEncoder:
    def test_pyramid_shapes_64x192(self, rng):
        enc = SwinEncoder(rng, EncoderConfig(depths=(2, 2, 2, 2)))
        with default_dtype(np.float32):
            pyr = enc(Tensor(rng.uniform(size=(1, 3, 64, 192)).astype(np.float32)))
        assert [p.shape for p in pyr] == [
            (1, 64, 32, 96), (1, 128, 16, 48), (1, 256, 8, 24), (1, 512, 4, 12)]

    @pytest.mark.parametrize("size", [(32, 32), (64, 128), (32, 192)])
    def test_halving_law(self, rng, size):
        enc = SwinEncoder(rng, tiny_config())
        pyr = enc(Tensor(rng.uniform(size=(1, 3) + size)))
        for i, f in enumerate(pyr):
            assert f.shape == (1, 8 * 2 ** i, size[0] >> (i + 1), size[1] >> (i + 1))

    @pytest.mark.parametrize("size", [(48, 64), (64, 96)])
    def test_indivisible_input_rejected(self, rng, size):
        with pytest.raises(ContractError):
            SwinEncoder(rng, tiny_config())(Tensor(np.zeros((1, 3) + size)))

    def test_batch_independence_bitwise(self, rng):
        enc = SwinEncoder(rng, tiny_config())
        x = rng.uniform(size=(2, 3, 32, 64))
        both = enc(Tensor(x))
        for i in range(2):
            single = enc(Tensor(x[i:i + 1]))
            for a, b in zip(both, single):
                assert np.array_equal(a.data[i:i + 1], b.data)

    def test_full_encoder_gradient(self, rng):
        enc = SwinEncoder(rng, EncoderConfig(embed_dim=8, depths=(1, 1, 1, 1), heads=(1, 1, 2, 2), shifted=False))
        sharpen(enc, rng)
        x = Tensor(rng.uniform(size=(1, 3, 32, 32)), requires_grad=True)
        probes = [rng.normal(size=(1, 8 * 2 ** i, 16 >> i, 16 >> i)) for i in range(4)]

        def f():
            return sum((p * q).sum() for p, q in zip(enc(x), probes))

        params = [x] + checkable(enc.named_parameters())
        assert finite_diff_check(f, params, eps=1e-4, floor_frac=1e-3, max_entries=40) < 1e-4

    def test_parameter_count_golden(self, rng):
        enc = SwinEncoder(rng, EncoderConfig())
        assert enc.num_parameters() == 12_238_812
        assert sum(parameter_breakdown(enc).values()) == 12_238_812

    def test_every_parameter_gets_gradient(self, rng):
        enc = SwinEncoder(rng, tiny_config())
        pyr = enc(Tensor(rng.uniform(size=(1, 3, 32, 32))))
        backward(sum((p * rng.normal(size=p.shape)).sum() for p in pyr))
        dead = [n for n, p in enc.named_parameters() if not np.any(p.grad)]
        assert dead == []


def test_tokens_roundtrip(rng):
    x = rng.normal(size=(2, 5, 4, 6))
    from swindepth.encoder import tokens_to_nchw
    np.testing.assert_array_equal(tokens_to_nchw(nchw_to_tokens(Tensor(x)), 4, 6).data, x)
