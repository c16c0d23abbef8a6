"""Local windows, Gaussian prior, sparse series association, full layer."""

import numpy as np
import pytest

from tsad import attention as attn
from tsad import autodiff as ad
from tsad.errors import ParameterError, ShapeError


def dense_softmax(scores):
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestLocalWindow:
    def test_interior(self):
        assert attn.local_window(5, 100, 4) == [3, 4, 5, 6, 7]

    def test_boundary_clamp(self):
        assert attn.local_window(0, 100, 4) == [0, 1, 2]

    def test_covers_sequence_when_block_large(self):
        n = 9
        for i in range(n):
            assert attn.local_window(i, n, 2 * (n - 1)) == list(range(n))

    def test_odd_block_size_uses_real_half(self):
        # block 5 -> half width 2.5 -> 2 neighbours each side
        assert attn.local_window(10, 50, 5) == [8, 9, 10, 11, 12]

    def test_mask_agrees_with_index_sets(self):
        n, bs = 13, 4
        mask = attn.local_window_mask(n, bs)
        for i in range(n):
            np.testing.assert_array_equal(
                np.nonzero(mask[i])[0], attn.local_window(i, n, bs)
            )

    def test_out_of_range_position(self):
        with pytest.raises(ShapeError):
            attn.local_window(7, 7, 2)


class TestPriorAssociation:
    def test_single_position(self):
        p = attn.prior_association(ad.Tensor([[1.0]]), 1)
        np.testing.assert_array_equal(p.data, [[[1.0]]])

    def test_large_sigma_approaches_uniform(self):
        n = 8
        p = attn.prior_association(ad.Tensor(np.full((1, n), 1e6)), n)
        np.testing.assert_allclose(p.data[0], 1.0 / n, atol=1e-9)

    def test_matches_kernel_formula(self):
        n, sig = 4, 0.5
        p = attn.prior_association(ad.Tensor(np.full((1, n), sig)), n).data[0]
        row = np.exp(-np.arange(n) ** 2 / (2 * sig**2))
        row = row / row.sum()
        assert np.max(np.abs(p[0] - row)) < 1e-12

    def test_rows_stochastic(self):
        rng = np.random.default_rng(0)
        sigma = rng.uniform(0.2, 5.0, size=(2, 3, 10))
        p = attn.prior_association(ad.Tensor(sigma), 10).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert (p >= 0).all()

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ParameterError):
            attn.prior_association(ad.Tensor([[0.0, 1.0]]), 2)


class TestSparseSeriesAssociation:
    def test_identical_keys_give_uniform_window(self):
        n, bs = 6, 2
        q = ad.Tensor(np.ones((1, n, 4)))
        k = ad.Tensor(np.ones((1, n, 4)))
        s = attn.sparse_series_association(q, k, bs, 4).data[0]
        for i in range(n):
            omega = attn.local_window(i, n, bs)
            np.testing.assert_allclose(s[i, omega], 1.0 / len(omega), atol=1e-12)

    def test_dense_limit_matches_full_softmax(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            n = int(rng.integers(2, 12))
            q = rng.standard_normal((1, 2, n, 3))
            k = rng.standard_normal((1, 2, n, 3))
            s = attn.sparse_series_association(
                ad.Tensor(q), ad.Tensor(k), 2 * (n - 1), 6
            ).data
            ref = dense_softmax(q @ k.swapaxes(-1, -2) / np.sqrt(6))
            assert np.max(np.abs(s - ref)) < 1e-12

    def test_hand_computed_three_positions(self):
        q = np.array([[[1.0], [0.5], [-1.0]]])
        k = np.array([[[2.0], [1.0], [0.0]]])
        s = attn.sparse_series_association(ad.Tensor(q), ad.Tensor(k), 2, 1).data[0]
        # windows: {0,1}, {0,1,2}, {1,2}; scores q_i * k_j
        def softmax(v):
            e = np.exp(v - np.max(v))
            return e / e.sum()

        np.testing.assert_allclose(s[0, :2], softmax([2.0, 1.0]), atol=1e-12)
        assert s[0, 2] == 0.0
        np.testing.assert_allclose(s[1], softmax([1.0, 0.5, 0.0]), atol=1e-12)
        np.testing.assert_allclose(s[2, 1:], softmax([-1.0, 0.0]), atol=1e-12)
        assert s[2, 0] == 0.0

    def test_support_is_exactly_the_window(self):
        rng = np.random.default_rng(2)
        n, bs = 11, 4
        q = ad.Tensor(rng.standard_normal((1, 2, n, 3)))
        k = ad.Tensor(rng.standard_normal((1, 2, n, 3)))
        s = attn.sparse_series_association(q, k, bs, 6).data
        mask = attn.local_window_mask(n, bs)
        assert (s[..., ~mask] == 0.0).all()
        assert (s[..., mask] > 0.0).all()


@pytest.fixture
def layer_setup():
    cfg = attn.AttentionConfig(d_model=8, n_heads=2, block_size=4)
    rng = np.random.default_rng(42)
    params = attn.init_attention_params(cfg, rng)
    x = ad.Tensor(np.random.default_rng(7).standard_normal((2, 16, 8)))
    return cfg, params, x


class TestAnomalySparseAttention:
    def test_degenerate_length_one(self):
        cfg = attn.AttentionConfig(d_model=8, n_heads=2, block_size=4)
        params = attn.init_attention_params(cfg, np.random.default_rng(0))
        x = ad.Tensor(np.random.default_rng(1).standard_normal((1, 1, 8)))
        out, maps = attn.anomaly_sparse_attention(x, cfg, params)
        assert out.data.shape == (1, 1, 8)
        np.testing.assert_array_equal(maps.series.data, np.ones((1, 2, 1, 1)))
        assert np.isfinite(out.data).all()

    def test_shape_preserved(self, layer_setup):
        cfg, params, x = layer_setup
        out, _ = attn.anomaly_sparse_attention(x, cfg, params)
        assert out.data.shape == x.data.shape

    def test_maps_row_stochastic(self, layer_setup):
        cfg, params, x = layer_setup
        _, maps = attn.anomaly_sparse_attention(x, cfg, params)
        for m in (maps.prior.data, maps.series.data):
            np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)
            assert (m >= 0).all()
        assert (maps.sigma.data > 0).all()

    def test_gradient_against_finite_differences(self):
        cfg = attn.AttentionConfig(d_model=6, n_heads=2, block_size=4)
        params = attn.init_attention_params(cfg, np.random.default_rng(3))
        weight = np.random.default_rng(4).standard_normal((1, 5, 6))

        def f(t):
            out, _ = attn.anomaly_sparse_attention(t, cfg, params)
            return ad.tsum(ad.mul(out, ad.Tensor(weight)))

        x = ad.Tensor(np.random.default_rng(5).standard_normal((1, 5, 6)))
        assert ad.grad_check(f, x, eps=1e-4) < 1e-4

    def test_dense_limit_layer_equivalence(self, layer_setup):
        """With the window covering the sequence the layer must match a
        dense-attention reference recomputed directly with numpy."""
        cfg, params, x = layer_setup
        n = x.data.shape[1]
        wide = attn.AttentionConfig(
            d_model=cfg.d_model, n_heads=cfg.n_heads, block_size=2 * (n - 1)
        )
        out, maps = attn.anomaly_sparse_attention(x, wide, params)

        b, h, dh, dm = 2, wide.n_heads, wide.d_head, wide.d_model
        xd = x.data

        def project(w, bias):
            return (xd @ w.data + bias.data).reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = (
            project(params.wq, params.bq),
            project(params.wk, params.bk),
            project(params.wv, params.bv),
        )
        s_ref = dense_softmax(q @ k.swapaxes(-1, -2) / np.sqrt(dm))
        ctx = (s_ref @ v).transpose(0, 2, 1, 3).reshape(b, n, dm)
        resid = xd + ctx @ params.wo.data + params.bo.data
        mu = resid.mean(axis=-1, keepdims=True)
        var = ((resid - mu) ** 2).mean(axis=-1, keepdims=True)
        ref = (resid - mu) / np.sqrt(var + 1e-5) * params.ln_gamma.data + params.ln_beta.data

        assert np.max(np.abs(maps.series.data - s_ref)) < 1e-9
        assert np.max(np.abs(out.data - ref)) < 1e-9

    def test_batch_permutation_equivariance(self, layer_setup):
        cfg, params, x = layer_setup
        out, _ = attn.anomaly_sparse_attention(x, cfg, params)
        perm = [1, 0]
        out_p, _ = attn.anomaly_sparse_attention(ad.Tensor(x.data[perm]), cfg, params)
        np.testing.assert_array_equal(out_p.data, out.data[perm])

    def test_width_mismatch_rejected(self, layer_setup):
        cfg, params, _ = layer_setup
        bad = ad.Tensor(np.zeros((1, 4, 5)))
        with pytest.raises(ShapeError):
            attn.anomaly_sparse_attention(bad, cfg, params)

    def test_config_validation(self):
        with pytest.raises(ShapeError):
            attn.AttentionConfig(d_model=7, n_heads=2, block_size=4)
        with pytest.raises(ShapeError):
            attn.AttentionConfig(d_model=8, n_heads=2, block_size=0)
