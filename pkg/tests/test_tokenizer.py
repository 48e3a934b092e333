import numpy as np
import pytest

from varmae.errors import DimensionError
from varmae.tensor import Tensor
from varmae.tokenizer import (DynamicConvTokenizer, dynamic_params,
                              make_catalog, modulate, patchify, unpatchify)


@pytest.fixture
def tokenizer(rng):
    return DynamicConvTokenizer(embed_dim=8, patch_size=2, vector_len=4, rng=rng)


@pytest.fixture
def catalog(rng):
    return make_catalog(("adc", "trace", "t2"), vector_len=4, embed_dim=8, rng=rng)


class TestDynamicParams:
    def test_split_semantics(self, rng):
        # projector that stacks two copies of the (padded) vector
        e = 4
        proj_w = np.zeros((2 * e, e))
        proj_w[:e] = np.eye(e)
        proj_w[e:] = np.eye(e)
        m = rng.normal(size=e)
        w_scale, b_scale = dynamic_params(Tensor(m), Tensor(proj_w), Tensor(np.zeros(2 * e)))
        np.testing.assert_allclose(w_scale.data, m, atol=1e-12)
        np.testing.assert_allclose(b_scale.data, m, atol=1e-12)

    def test_zero_vector_with_unit_bias(self):
        e = 3
        w_scale, b_scale = dynamic_params(Tensor(np.zeros(5)), Tensor(np.zeros((2 * e, 5))),
                                          Tensor(np.ones(2 * e)))
        np.testing.assert_array_equal(w_scale.data, np.ones(e))
        np.testing.assert_array_equal(b_scale.data, np.ones(e))

    def test_matches_matvec_oracle(self, rng):
        m = rng.normal(size=6)
        pw = rng.normal(size=(10, 6))
        pb = rng.normal(size=10)
        w_scale, b_scale = dynamic_params(Tensor(m), Tensor(pw), Tensor(pb))
        full = pw @ m + pb
        np.testing.assert_allclose(w_scale.data, full[:5], atol=1e-12)
        np.testing.assert_allclose(b_scale.data, full[5:], atol=1e-12)

    def test_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            dynamic_params(Tensor(np.zeros(3)), Tensor(rng.normal(size=(8, 5))),
                           Tensor(np.zeros(8)))


class TestModulate:
    def test_all_ones_is_identity(self, rng):
        w = Tensor(rng.normal(size=(4, 1, 2, 2, 2)))
        b = Tensor(rng.normal(size=4))
        ones = Tensor(np.ones(4))
        sw, sb = modulate(w, b, ones, ones)
        np.testing.assert_array_equal(sw.data, w.data)
        np.testing.assert_array_equal(sb.data, b.data)

    def test_zero_scale_zeroes_weights(self, rng):
        w = Tensor(rng.normal(size=(4, 1, 2, 2, 2)))
        sw, _ = modulate(w, Tensor(np.zeros(4)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(sw.data, np.zeros_like(w.data))

    def test_per_channel_homogeneity(self, rng):
        w = Tensor(rng.normal(size=(2, 1, 2, 2, 2)))
        b = Tensor(rng.normal(size=2))
        sw, _ = modulate(w, b, Tensor(np.array([2.0, 3.0])), Tensor(np.ones(2)))
        norms = np.linalg.norm(w.data.reshape(2, -1), axis=1)
        scaled = np.linalg.norm(sw.data.reshape(2, -1), axis=1)
        np.testing.assert_allclose(scaled, [2 * norms[0], 3 * norms[1]], rtol=1e-12)


class TestTokenize:
    def test_token_count_formula(self, rng):
        tok = DynamicConvTokenizer(embed_dim=32, patch_size=4, vector_len=4, rng=rng)
        cat = make_catalog(("a",), 4, 32, rng)
        out = tok.tokenize(rng.random((16, 16, 16)), cat[0])
        assert out.shape == (64, 32)  # 16^3 / 4^3

    def test_initial_projector_is_degenerate(self, tokenizer, catalog, rng):
        # all-ones modulation at init: any two modalities tokenize identically
        vol = rng.random((4, 4, 4))
        a = tokenizer.tokenize(vol, catalog[0])
        b = tokenizer.tokenize(vol, catalog[1])
        np.testing.assert_array_equal(a.data, b.data)

    def test_generic_projector_separates_modalities(self, tokenizer, catalog, rng):
        tokenizer.proj_w.data[...] = rng.normal(size=tokenizer.proj_w.shape)
        vol = rng.random((4, 4, 4))
        a = tokenizer.tokenize(vol, catalog[0])
        b = tokenizer.tokenize(vol, catalog[1])
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_zero_volume_gives_bias_tokens(self, tokenizer, catalog):
        tokenizer.bias.data[...] = np.arange(8.0)
        out = tokenizer.tokenize(np.zeros((4, 4, 4)), catalog[0])
        for row in out.data:
            np.testing.assert_allclose(row, np.arange(8.0), atol=1e-12)

    def test_indivisible_volume_rejected(self, tokenizer, catalog):
        with pytest.raises(DimensionError, match="width"):
            tokenizer.tokenize(np.zeros((4, 5, 4)), catalog[0])

    def test_gradients_reach_modality_vector(self, tokenizer, catalog, rng):
        # generic projector; loss touches modality 0 only
        tokenizer.proj_w.data[...] = rng.normal(size=tokenizer.proj_w.shape) * 0.1
        vol = rng.random((4, 4, 4))
        out = tokenizer.tokenize(vol, catalog[0])
        (out * out).sum().backward()
        assert catalog[0].vector.grad is not None
        assert np.abs(catalog[0].vector.grad).max() > 0
        assert catalog[1].vector.grad is None  # absent modality untouched


class TestPatchify:
    def test_roundtrip(self, rng):
        vol = rng.random((8, 8, 8))
        patches = patchify(vol, 4)
        assert patches.shape == (8, 64)
        np.testing.assert_array_equal(unpatchify(patches, (2, 2, 2), 4), vol)

    def test_order_matches_tokenizer(self, rng):
        # a conv kernel that picks voxel (0,0,0) of each patch reproduces
        # patchify's first column, in the same patch order
        tok = DynamicConvTokenizer(embed_dim=1, patch_size=2, vector_len=2, rng=rng)
        tok.weight.data[...] = 0
        tok.weight.data[0, 0, 0, 0, 0] = 1.0
        tok.bias.data[...] = 0
        cat = make_catalog(("a",), 2, 1, rng)
        vol = rng.random((4, 4, 4))
        tokens = tok.tokenize(vol, cat[0])
        np.testing.assert_allclose(tokens.data[:, 0], patchify(vol, 2)[:, 0], atol=1e-12)

    def test_indivisible_rejected(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((4, 6, 4)), 4)
