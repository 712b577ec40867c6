import io
import math

import mpmath
import numpy as np
import pytest

import famlp.tensor as tc
from famlp import (
    Tensor,
    backward,
    cross_entropy,
    gelu,
    kl_divergence,
    layer_norm,
    log_softmax,
    no_grad,
    softmax,
)
from gradcheck import finite_difference, grad_check, max_rel_err


class TestMatmul:
    def test_identity(self):
        m = np.random.default_rng(0).normal(size=(3, 3))
        out = Tensor(np.eye(3)).matmul(Tensor(m))
        np.testing.assert_allclose(out.data, m, rtol=0, atol=0)

    def test_hand_checked_2x2(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal((a @ b).data, [[2.0], [4.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        grad_check(lambda: (a @ b).sum(), [a, b], rtol=1e-6)

    def test_batched_gradient(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4, 2)))
        grad_check(lambda: ((a @ b) * w).sum(), [a, b])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))).matmul(Tensor(np.zeros((2, 3))))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_matches_high_precision_oracle(self):
        """x * Phi(x) with Phi from 50-digit erf."""
        mpmath.mp.dps = 50
        for x in (1.0, -0.7, 2.3, -3.1):
            expected = float(mpmath.mpf(x) * 0.5 * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))))
            got = gelu(Tensor([x])).data[0]
            assert abs(got - expected) < 1e-12

    def test_gradient(self):
        x = Tensor(np.linspace(-3, 3, 13), requires_grad=True)
        g = Tensor(np.random.default_rng(3).normal(size=13))
        grad_check(lambda: (gelu(x) * g).sum(), [x])


class TestLayerNorm:
    def _affine(self, d):
        return Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True)

    def test_constant_row_maps_to_zeros(self):
        g, b = self._affine(3)
        out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), g, b, eps=1e-6)
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-12)

    def test_already_normalized_row(self):
        g, b = self._affine(2)
        out = layer_norm(Tensor([[1.0, -1.0]]), g, b, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_row_statistics(self):
        rng = np.random.default_rng(4)
        g, b = self._affine(32)
        out = layer_norm(Tensor(rng.normal(2.0, 3.0, size=(5, 32))), g, b, eps=1e-10)
        assert np.abs(out.data.mean(axis=-1)).max() <= 1e-10
        assert np.abs(out.data.var(axis=-1) - 1.0).max() <= 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6), requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)))
        grad_check(lambda: (layer_norm(x, g, b, 1e-5) * w).sum(), [x, g, b])

    def test_empty_axis_rejected(self):
        g, b = self._affine(0)
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 0))), g, b, 1e-6)

    def test_nonpositive_eps_rejected(self):
        g, b = self._affine(2)
        with pytest.raises(ValueError):
            layer_norm(Tensor([[1.0, 2.0]]), g, b, 0.0)


class TestSoftmax:
    def test_uniform_row(self):
        for tau in (0.5, 1.0, 10.0):
            out = softmax(Tensor([[2.0, 2.0, 2.0, 2.0]]), temperature=tau)
            np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_closed_form(self):
        out = softmax(Tensor([[math.log(1), math.log(2)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_paper_temperature_matches_scalar_oracle(self):
        """tau = 10 on logits [0, 1] against a 50-digit softmax."""
        mpmath.mp.dps = 50
        e0, e1 = mpmath.exp(0), mpmath.exp(mpmath.mpf(1) / 10)
        expected = [float(e0 / (e0 + e1)), float(e1 / (e0 + e1))]
        out = softmax(Tensor([[0.0, 1.0]]), temperature=10.0)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-9)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(6).normal(size=(4, 9)) * 30
        out = softmax(Tensor(x), temperature=2.0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            softmax(Tensor([[1.0]]), temperature=0.0)
        with pytest.raises(ValueError):
            log_softmax(Tensor([[1.0]]), temperature=-1.0)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5)))
        grad_check(lambda: (softmax(x, 3.0) * w).sum(), [x])
        grad_check(lambda: (log_softmax(x, 3.0) * w).sum(), [x])


class TestCrossEntropy:
    def test_confident_correct_goes_to_zero(self):
        logits = Tensor(np.array([[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]]))
        assert cross_entropy(logits, [0, 1]).data < 1e-12

    def test_uniform_logits_give_log_k(self):
        k = 7
        loss = cross_entropy(Tensor(np.zeros((3, k))), [0, 3, 6])
        np.testing.assert_allclose(loss.data, math.log(k), atol=1e-12)

    def test_matches_scalar_oracle(self):
        mpmath.mp.dps = 50
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(3, 4))
        labels = [1, 0, 3]
        total = mpmath.mpf(0)
        for row, lab in zip(logits, labels):
            den = sum(mpmath.exp(mpmath.mpf(v)) for v in row)
            total -= mpmath.log(mpmath.exp(mpmath.mpf(row[lab])) / den)
        expected = float(total / 3)
        got = cross_entropy(Tensor(logits), labels).data
        assert abs(got - expected) < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient(self):
        x = Tensor(np.random.default_rng(9).normal(size=(4, 5)), requires_grad=True)
        grad_check(lambda: cross_entropy(x, [0, 2, 4, 1]), [x])


class TestKLDivergence:
    def test_identical_distributions(self):
        q = np.full((2, 4), 0.25)
        assert kl_divergence(Tensor(np.log(q)), Tensor(q)).data == 0.0

    def test_closed_form_with_zero_mass(self):
        """q = [1, 0] against uniform p; 0 * log 0 contributes nothing."""
        loss = kl_divergence(Tensor(np.log([[0.5, 0.5]])), Tensor([[1.0, 0.0]]))
        np.testing.assert_allclose(loss.data, math.log(2), atol=1e-12)

    def test_random_pair_nonnegative_and_matches_oracle(self):
        mpmath.mp.dps = 50
        rng = np.random.default_rng(10)
        q = rng.dirichlet(np.ones(5), size=3)
        p = rng.dirichlet(np.ones(5), size=3)
        got = kl_divergence(Tensor(np.log(p)), Tensor(q)).data
        expected = mpmath.mpf(0)
        for qr, pr in zip(q, p):
            for qi, pi in zip(qr, pr):
                expected += mpmath.mpf(qi) * (mpmath.log(mpmath.mpf(qi)) - mpmath.log(mpmath.mpf(pi)))
        expected = float(expected / 3)
        assert got >= 0.0
        assert abs(got - expected) < 1e-9

    def test_negative_q_rejected(self):
        with pytest.raises(ValueError):
            kl_divergence(Tensor(np.log([[0.5, 0.5]])), Tensor([[1.5, -0.5]]))

    def test_gradients(self):
        rng = np.random.default_rng(11)
        lp = Tensor(np.log(rng.dirichlet(np.ones(4), size=2)), requires_grad=True)
        q = Tensor(rng.dirichlet(np.ones(4), size=2), requires_grad=True)
        grad_check(lambda: kl_divergence(lp, q), [lp, q])


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(12).normal(size=(3, 4, 2)), requires_grad=True)
        backward(w.sum())
        np.testing.assert_array_equal(w.grad, np.ones((3, 4, 2)))

    def test_linear_map_gives_broadcast_factor(self):
        w = Tensor(np.random.default_rng(13).normal(size=(3, 4)), requires_grad=True)
        x = Tensor(np.array([2.0, -1.0, 0.5, 3.0]))
        backward((w * x).sum())
        np.testing.assert_allclose(w.grad, np.tile(x.data, (3, 1)))

    def test_composite_chain_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w1 = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        g = Tensor(np.ones(6), requires_grad=True)
        b = Tensor(np.zeros(6), requires_grad=True)

        def loss():
            h = layer_norm(x, g, b, 1e-6)
            return cross_entropy(gelu(h @ w1), [0, 2, 4])

        grad_check(loss, [x, w1, g, b])

    def test_accumulation_doubles_without_zeroing(self):
        w = Tensor(np.random.default_rng(15).normal(size=(2, 3)), requires_grad=True)
        y = (w * w).sum()
        backward(y)
        once = w.grad.copy()
        backward(y)
        np.testing.assert_array_equal(w.grad, 2.0 * once)

    def test_non_scalar_rejected(self):
        w = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            backward(w + 1.0)

    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(16)
            a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = softmax(gelu(a @ a), 2.0)
            return out.data.tobytes()

        assert run() == run()


class TestShapeOps:
    def test_transpose_reshape_mean_gradients(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 2)))
        m = Tensor(rng.normal(size=(4, 2)))
        v = Tensor(rng.normal(size=(2, 4)))
        grad_check(lambda: (x.transpose(2, 1, 0) * w).sum(), [x])
        grad_check(lambda: (x.reshape(6, 4) @ m).sum(), [x])
        grad_check(lambda: (x.mean(axis=1) * v).sum(), [x])

    def test_mean_values(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(x.mean(axis=0).data, [1.5, 2.5, 3.5])
        np.testing.assert_allclose(x.mean().data, 2.5)

    def test_scalar_ops(self):
        x = Tensor(np.array([2.0, 4.0]), requires_grad=True)
        y = ((x * 3.0 - 1.0) / 2.0 + 0.5).sum()
        backward(y)
        np.testing.assert_allclose(x.grad, [1.5, 1.5])

    def test_division_by_tensor_rejected(self):
        with pytest.raises(TypeError):
            Tensor([1.0]) / Tensor([2.0])


class TestGraphModes:
    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None and not y.requires_grad

    def test_detach_severs_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).detach()
        assert not y.requires_grad
        np.testing.assert_array_equal(y.data, 2.0 * np.ones(3))

    def test_unused_parameter_keeps_none_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        w = Tensor(np.ones(3), requires_grad=True)
        backward((x * 2.0).sum())
        assert w.grad is None and x.grad is not None


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        arr = np.random.default_rng(18).normal(size=(3, 1, 5))
        path = tmp_path / "t.famt"
        tc.save_tensor(Tensor(arr), path)
        back = tc.load_tensor(path)
        np.testing.assert_array_equal(back.data, arr)

    def test_header_layout(self):
        buf = io.BytesIO()
        tc.write_tensor_to(buf, Tensor(np.zeros((2, 3))))
        raw = buf.getvalue()
        assert raw[:4] == b"FAMT"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 2  # ndim
        assert int.from_bytes(raw[12:20], "little") == 2
        assert int.from_bytes(raw[20:28], "little") == 3
        assert len(raw) == 28 + 6 * 8

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            tc.read_tensor_from(io.BytesIO(b"XXXX" + b"\x00" * 32))

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        tc.write_tensor_to(buf, Tensor(np.zeros(4)))
        with pytest.raises(ValueError, match="truncated"):
            tc.read_tensor_from(io.BytesIO(buf.getvalue()[:-8]))


class TestGradientSuiteProperty:
    def test_every_primitive_against_finite_differences(self):
        """One randomized sweep over all differentiable primitives."""
        rng = np.random.default_rng(19)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        c = Tensor(rng.normal(size=(3, 4)))
        m = Tensor(rng.normal(size=(3, 2)))
        cases = [
            lambda: (x + c * 2.0).sum(),
            lambda: ((x - 1.0) * x).sum(),
            lambda: (-x).mean(),
            lambda: (x.T @ m).sum(),
            lambda: (gelu(x) * w).sum(),
            lambda: (softmax(x, 1.7) * w).sum(),
            lambda: (log_softmax(x, 0.7) * w).sum(),
        ]
        for build in cases:
            grad_check(build, [x])
