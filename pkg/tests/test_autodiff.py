"""Tensor arithmetic and reverse-mode gradient checks."""

import numpy as np
import pytest

from tsad import autodiff as ad
from tsad.errors import ContractError, DegenerateRowError, ShapeError


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        ident = ad.Tensor(np.eye(2))
        x = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(ident, x).data, x.data)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12

    def test_loop_oracle_on_small_dims(self):
        rng = np.random.default_rng(1)
        for m, k, n in [(1, 1, 1), (2, 7, 3), (16, 16, 16), (3, 1, 5)]:
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            got = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
            assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_batched_gradient_pools_over_batch(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.standard_normal((4, 5, 3)))
        w = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.tsum(ad.matmul(x, w))
        tape.backward(loss)
        expected = x.data.reshape(-1, 3).T @ np.ones((4 * 5, 2))
        np.testing.assert_allclose(w.grad, expected, atol=1e-12)


class TestSoftmaxRows:
    def test_uniform_on_constant_row(self):
        out = ad.softmax_rows(ad.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_mask_forces_exact_zero(self):
        out = ad.softmax_rows(
            ad.Tensor([[2.5, 100.0]]), mask=np.array([[True, False]])
        )
        assert out.data[0, 0] == 1.0
        assert out.data[0, 1] == 0.0

    def test_matches_direct_formula(self):
        x = np.array([[1.0, 2.0, 3.0]])
        out = ad.softmax_rows(ad.Tensor(x)).data
        direct = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(out - direct)) < 1e-12

    def test_rows_sum_to_one_in_unit_interval(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 9)) * 50
        mask = rng.random((6, 9)) < 0.7
        mask[:, 0] = True
        out = ad.softmax_rows(ad.Tensor(x), mask=mask).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert (out >= 0).all() and (out <= 1).all()

    def test_fully_masked_row_raises(self):
        with pytest.raises(DegenerateRowError):
            ad.softmax_rows(ad.Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    def test_extreme_values_are_stable(self):
        out = ad.softmax_rows(ad.Tensor([[1000.0, 1000.0, -1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-12)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        x = ad.Tensor(np.full((3, 4), 2.7))
        out = ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_standardization(self):
        out = ad.layer_norm(
            ad.Tensor([[1.0, 3.0]]), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
        )
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_row_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 8)) * 3 + 1
        out = ad.layer_norm(
            ad.Tensor(x), ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8))
        ).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(
                ad.Tensor(np.ones((2, 0))), ad.Tensor(np.ones(0)), ad.Tensor(np.ones(0))
            )


class TestGradCheck:
    def test_quadratic(self):
        err = ad.grad_check(lambda t: ad.tsum(ad.mul(t, t)), ad.Tensor([3.0]), eps=1e-4)
        assert err < 1e-6

    def test_softmax_sum(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.standard_normal((4, 6)))
        weight = ad.Tensor(rng.standard_normal((4, 6)))

        def f(t):
            return ad.tsum(ad.mul(ad.softmax_rows(t), weight))

        assert ad.grad_check(f, x, eps=1e-4) < 1e-5

    def test_rejects_non_scalar(self):
        with pytest.raises(ContractError):
            ad.grad_check(lambda t: ad.mul(t, 2.0), ad.Tensor([1.0, 2.0]))

    def test_rejects_bad_eps(self):
        with pytest.raises(ContractError):
            ad.grad_check(lambda t: ad.tsum(t), ad.Tensor([1.0]), eps=0.1)

    @pytest.mark.parametrize(
        "name,f",
        [
            ("exp", lambda t: ad.tsum(ad.exp(t))),
            ("log", lambda t: ad.tsum(ad.log(ad.add(ad.mul(t, t), 1.0)))),
            ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t))),
            ("softplus", lambda t: ad.tsum(ad.softplus(t))),
            ("silu", lambda t: ad.tsum(ad.silu(t))),
            ("sqrt", lambda t: ad.tsum(ad.sqrt(ad.add(ad.mul(t, t), 1.0)))),
            ("div", lambda t: ad.tsum(ad.div(t, ad.add(ad.mul(t, t), 2.0)))),
            ("mean", lambda t: ad.tmean(ad.mul(t, t))),
            ("norm", lambda t: ad.tsum(
                ad.layer_norm(t, ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5)))
                if t.ndim == 2 else t
            )),
        ],
    )
    def test_elementwise_rules(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = ad.Tensor(rng.standard_normal((3, 5)))
        assert ad.grad_check(f, x, eps=1e-4) < 1e-4

    def test_reshape_transpose_concat_slice(self):
        rng = np.random.default_rng(6)
        w = ad.Tensor(rng.standard_normal((4, 6)))

        def f(t):
            a = ad.transpose(ad.reshape(t, (2, 3, 4)), (1, 0, 2))
            b = ad.concat([a, a], axis=2)
            c = ad.slice_axis(b, 2, 1, 5)
            return ad.tsum(ad.mul(ad.reshape(c, (6, 4)), ad.transpose(w, (1, 0))))

        x = ad.Tensor(rng.standard_normal((24,)))
        assert ad.grad_check(f, x, eps=1e-4) < 1e-4

    def test_masked_softmax_gradient(self):
        rng = np.random.default_rng(7)
        mask = rng.random((3, 7)) < 0.6
        mask[:, 2] = True
        weight = ad.Tensor(rng.standard_normal((3, 7)))

        def f(t):
            return ad.tsum(ad.mul(ad.softmax_rows(t, mask=mask), weight))

        x = ad.Tensor(rng.standard_normal((3, 7)))
        assert ad.grad_check(f, x, eps=1e-4) < 1e-4


class TestTape:
    def test_backward_requires_scalar(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 3.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_each_node_contributes_once(self):
        x = ad.Tensor(2.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)  # reused input
            z = ad.add(y, y)  # reused intermediate
            loss = ad.tsum(z)
        tape.backward(loss)
        assert x.grad == pytest.approx(2 * 2 * 2.0)  # d(2x^2)/dx = 4x

    def test_detach_blocks_gradient(self):
        x = ad.Tensor(3.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x.detach(), x)
            loss = ad.tsum(y)
        tape.backward(loss)
        assert x.grad == pytest.approx(3.0)  # only the tracked factor

    def test_no_tape_means_no_tracking(self):
        x = ad.Tensor(1.0, requires_grad=True)
        y = ad.mul(x, 2.0)
        assert y.grad is None and y.requires_grad is False

    def test_nested_tapes_rejected(self):
        with ad.Tape():
            with pytest.raises(ContractError):
                with ad.Tape():
                    pass
