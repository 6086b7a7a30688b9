import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookout import autodiff as ad
from lookout.autodiff import ParamStore, Tensor
from lookout.optim import gradient_check


def scalar(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestHardtanh:
    def test_clamps_above(self):
        assert ad.hardtanh(scalar(12.0), -10, 10).item() == 10.0

    def test_interior_identity(self):
        assert ad.hardtanh(scalar(3.0), -10, 10).item() == 3.0

    def test_clamps_below(self):
        assert ad.hardtanh(scalar(-12.0), -10, 10).item() == -10.0

    def test_gradient_mask(self):
        x = Tensor(np.array([-12.0, -10.0, 0.0, 9.9, 10.0, 12.0]), requires_grad=True)
        ad.tensor_sum(ad.hardtanh(x, -10, 10)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 1.0, 0.0, 0.0])

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            ad.hardtanh(scalar(0.0), 1.0, 1.0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_output_always_within_bounds(self, values):
        out = ad.hardtanh(Tensor(np.array(values)), -10, 10)
        assert np.all(out.data >= -10) and np.all(out.data <= 10)


class TestBinaryCrossEntropy:
    def test_half_probability(self):
        loss = ad.binary_cross_entropy(scalar(0.5), np.float64(1.0))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_near_perfect(self):
        loss = ad.binary_cross_entropy(scalar(1.0 - 1e-7), np.float64(1.0))
        assert loss.item() == pytest.approx(1e-7, rel=1e-6)

    def test_confident_wrong(self):
        loss = ad.binary_cross_entropy(scalar(0.9), np.float64(0.0))
        assert loss.item() == pytest.approx(-math.log(0.1), abs=1e-12)

    def test_batched_returns_mean(self):
        p = Tensor(np.array([0.5, 0.9]))
        y = np.array([1.0, 0.0])
        expected = (math.log(2) - math.log(0.1)) / 2
        assert ad.binary_cross_entropy(p, y).item() == pytest.approx(expected, abs=1e-12)

    def test_finite_at_extremes(self):
        loss = ad.binary_cross_entropy(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
        assert np.isfinite(loss.item())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.binary_cross_entropy(Tensor(np.zeros(3)), np.zeros(4))


class TestKlToStandardNormal:
    def test_zero_for_standard_normal(self):
        assert ad.kl_to_standard_normal(Tensor(np.zeros(5)), Tensor(np.zeros(5))).item() == 0.0

    def test_unit_mean(self):
        assert ad.kl_to_standard_normal(scalar([1.0]), scalar([0.0])).item() == pytest.approx(0.5, abs=1e-15)

    def test_variance_four(self):
        # closed form evaluated independently: -0.5 * (1 + ln4 - 0 - 4)
        expected = -0.5 * (1.0 + math.log(4.0) - 0.0 - 4.0)
        got = ad.kl_to_standard_normal(scalar([0.0]), scalar([math.log(4.0)])).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.806853, abs=1e-6)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mu = Tensor(rng.normal(size=8))
            logvar = Tensor(rng.normal(size=8))
            assert ad.kl_to_standard_normal(mu, logvar).item() >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.kl_to_standard_normal(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def identity_attention_params(d=64):
    eye = np.eye(d)
    return dict(wq=Tensor(eye), wk=Tensor(eye), wv=Tensor(eye), wo=Tensor(eye))


class TestMultiHeadAttention:
    def test_identical_keys_give_uniform_weights(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(4, 64)))
        k = Tensor(np.tile(rng.normal(size=(1, 64)), (4, 1)))
        v = Tensor(rng.normal(size=(4, 64)))
        out, w = ad.multi_head_attention(
            q, k, v, num_heads=8, return_weights=True, **identity_attention_params()
        )
        np.testing.assert_allclose(w.data, np.full((8, 4, 4), 0.25), atol=1e-12)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (4, 1)), atol=1e-12)

    def test_saturated_softmax_recovers_values(self):
        q = Tensor(np.eye(4, 64) * 1000.0)
        v = Tensor(np.random.default_rng(1).normal(size=(4, 64)))
        out = ad.multi_head_attention(
            q, q, v, num_heads=1, **identity_attention_params()
        )
        np.testing.assert_allclose(out.data, v.data, atol=1e-9)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.normal(size=(4, 64)))
        k = Tensor(rng.normal(size=(4, 64)))
        v = Tensor(rng.normal(size=(4, 64)))
        params = {k2: Tensor(rng.normal(size=t.data.shape)) for k2, t in identity_attention_params().items()}
        _, w = ad.multi_head_attention(q, k, v, num_heads=8, return_weights=True, **params)
        assert w.data.shape == (8, 4, 4)
        np.testing.assert_allclose(w.data.sum(axis=-1), np.ones((8, 4)), atol=1e-12)
        # independent softmax renormalization of the same weights
        renorm = w.data / w.data.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(w.data, renorm, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        q = Tensor(np.zeros((4, 64)))
        with pytest.raises(ValueError):
            ad.multi_head_attention(q, q, q, num_heads=7, **identity_attention_params())
        with pytest.raises(ValueError):
            ad.multi_head_attention(
                q, Tensor(np.zeros((3, 64))), q, num_heads=8, **identity_attention_params()
            )


class TestSoftmax:
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_nonnegative_and_normalized(self, n, m, seed):
        x = np.random.default_rng(seed).normal(scale=20.0, size=(n, m))
        s = ad.softmax(Tensor(x), axis=-1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(n), atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        s = ad.softmax(Tensor(np.array([[1e6, -1e6, 0.0]])), axis=-1)
        assert np.isfinite(s.data).all()


class TestConv2d:
    def conv_oracle(self, x, w, b, stride, padding):
        # independent brute-force convolution
        bsz, cin, h, wd = x.shape
        cout, _, k, _ = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        oh = (h + 2 * padding - k) // stride + 1
        ow = (wd + 2 * padding - k) // stride + 1
        out = np.zeros((bsz, cout, oh, ow))
        for bi in range(bsz):
            for oc in range(cout):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                        out[bi, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
        return out

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_bruteforce(self, stride, padding):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 6, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, self.conv_oracle(x, w, b, stride, padding), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        store = ParamStore()
        x = store.add("x", Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True))
        w = store.add("w", Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True))
        b = store.add("b", Tensor(rng.normal(size=3), requires_grad=True))

        def loss():
            out = ad.conv2d(x, w, b, stride=2, padding=1)
            return ad.tensor_sum(ad.mul(out, out))

        assert gradient_check(loss, store, eps=1e-5) < 1e-6

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.ones(100))
        out = ad.dropout(x, 0.5, None, train=False)
        assert out is x

    def test_inverted_scaling_preserves_mean(self):
        rng = np.random.default_rng(9)
        x = Tensor(np.ones(200000))
        out = ad.dropout(x, 0.5, rng, train=True)
        kept = out.data[out.data > 0]
        assert np.allclose(kept, 2.0)
        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_requires_rng_in_train_mode(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(4)), 0.5, None, train=True)


class TestBroadcastingAndShapes:
    def test_add_broadcast_gradients(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        ad.tensor_sum(ad.add(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_mul_broadcast_gradients(self):
        a = Tensor(np.full((2, 3), 2.0), requires_grad=True)
        b = Tensor(np.full((1, 3), 5.0), requires_grad=True)
        ad.tensor_sum(ad.mul(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.full((2, 3), 5.0))
        np.testing.assert_array_equal(b.grad, np.full((1, 3), 4.0))

    def test_concat_and_slice_roundtrip_gradients(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        cat = ad.concat([a, b], axis=1)
        piece = ad.slice_axis(cat, 1, 3, 5)
        ad.tensor_sum(piece).backward()
        np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))

    def test_transpose_reshape_gradients(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        y = ad.reshape(ad.transpose(x, (2, 0, 1)), (4, 6))
        ad.tensor_sum(ad.mul(y, y)).backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_matmul_batched_gradcheck(self):
        rng = np.random.default_rng(11)
        store = ParamStore()
        a = store.add("a", Tensor(rng.normal(size=(2, 5, 3, 4)), requires_grad=True))
        b = store.add("b", Tensor(rng.normal(size=(4, 6)), requires_grad=True))

        def loss():
            return ad.tensor_sum(ad.mul(ad.matmul(a, b), 0.5))

        assert gradient_check(loss, store) < 1e-8


class TestGraphMechanics:
    def test_reused_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.mul(x, x).backward()

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.add(y, 0.001)
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(-50, 50, size=(4, 8)))
        for op in (ad.relu, ad.sigmoid, lambda t: ad.softmax(t, axis=-1), lambda t: ad.hardtanh(t, -10, 10)):
            assert np.isfinite(op(x).data).all()


class TestParamStore:
    def test_lexicographic_iteration(self):
        store = ParamStore()
        store.add("z.weight", Tensor(np.zeros(1), requires_grad=True))
        store.add("a.weight", Tensor(np.zeros(1), requires_grad=True))
        store.add("m.bias", Tensor(np.zeros(1), requires_grad=True))
        assert store.names() == ["a.weight", "m.bias", "z.weight"]
        assert [n for n, _ in store.items()] == store.names()

    def test_duplicate_names_rejected(self):
        store = ParamStore()
        store.add("p", Tensor(np.zeros(1)))
        with pytest.raises(ValueError):
            store.add("p", Tensor(np.zeros(1)))

    def test_copy_load_roundtrip(self):
        store = ParamStore()
        rng = np.random.default_rng(5)
        store.add("w", Tensor(rng.normal(size=(2, 2)), requires_grad=True))
        snap = store.copy_values()
        store["w"].data += 1.0
        store.load_values(snap)
        np.testing.assert_array_equal(store["w"].data, snap["w"])

    def test_load_rejects_mismatch(self):
        store = ParamStore()
        store.add("w", Tensor(np.zeros((2, 2)), requires_grad=True))
        with pytest.raises(ValueError):
            store.load_values({"other": np.zeros((2, 2))})
        with pytest.raises(ValueError):
            store.load_values({"w": np.zeros((3, 2))})


class TestOpGradients:
    """Every differentiable op passes a finite-difference check at 1e-3."""

    @pytest.mark.parametrize(
        "op",
        [
            lambda x: ad.relu(x),
            lambda x: ad.sigmoid(x),
            lambda x: ad.exp(ad.mul(x, 0.1)),
            lambda x: ad.softmax(x, axis=-1),
            lambda x: ad.hardtanh(x, -0.5, 0.5),
            lambda x: ad.tensor_mean(x, axis=1),
            lambda x: ad.tensor_sum(x, axis=0, keepdims=True),
        ],
    )
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(13)
        store = ParamStore()
        x = store.add("x", Tensor(rng.normal(size=(3, 7)), requires_grad=True))

        def loss():
            out = op(x)
            return ad.tensor_sum(ad.mul(out, out))

        assert gradient_check(loss, store) < 1e-3

    def test_bce_gradient(self):
        store = ParamStore()
        x = store.add("x", Tensor(np.array([0.3, -0.2, 1.1]), requires_grad=True))
        y = np.array([1.0, 0.0, 1.0])

        def loss():
            return ad.binary_cross_entropy(ad.sigmoid(x), y)

        assert gradient_check(loss, store) < 1e-6

    def test_kl_gradient(self):
        rng = np.random.default_rng(14)
        store = ParamStore()
        mu = store.add("mu", Tensor(rng.normal(size=6), requires_grad=True))
        lv = store.add("lv", Tensor(rng.normal(size=6), requires_grad=True))

        def loss():
            return ad.kl_to_standard_normal(mu, lv)

        assert gradient_check(loss, store) < 1e-6

    def test_attention_gradient(self):
        rng = np.random.default_rng(15)
        store = ParamStore()
        tokens = store.add("t", Tensor(rng.normal(size=(4, 16)), requires_grad=True))
        weights = {
            nm: store.add(nm, Tensor(rng.normal(size=(16, 16)) * 0.3, requires_grad=True))
            for nm in ("wq", "wk", "wv", "wo")
        }

        def loss():
            out = ad.multi_head_attention(
                tokens, tokens, tokens,
                weights["wq"], weights["wk"], weights["wv"], weights["wo"],
                num_heads=4,
            )
            return ad.tensor_sum(ad.mul(out, out))

        assert gradient_check(loss, store) < 1e-3
