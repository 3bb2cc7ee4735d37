import numpy as np
import pytest

import mhssm
from mhssm import tensor as T
from mhssm.errors import ShapeError
from mhssm.tensor import GradTape, Tensor

from oracles import direct_linear_conv, mp_sigmoid, mp_softmax, naive_dft, naive_matmul

# frozen high-precision sigmoid values at x = -2, -1, 0, 1, 2
SIGMOID_TABLE = {
    -2.0: 0.11920292202211755,
    -1.0: 0.2689414213699951,
    0.0: 0.5,
    1.0: 0.7310585786300049,
    2.0: 0.8807970779778823,
}


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_checked(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - naive_matmul(a, b)).max() <= 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 2, 3)), rng.standard_normal((3, 5))
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, a @ b, atol=1e-15)


class TestPointwise:
    def test_sigmoid_symmetry(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_gelu_at_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_matches_high_precision(self):
        xs = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        got = T.sigmoid(Tensor(xs)).data
        for x, g in zip(xs, got):
            assert abs(g - SIGMOID_TABLE[x]) <= 1e-12
            assert abs(g - mp_sigmoid(x)) <= 1e-12

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_scale_dispatch(self):
        out = T.pointwise("scale", Tensor([1.0, -2.0]), 3.0)
        np.testing.assert_array_equal(out.data, [3.0, -6.0])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown pointwise"):
            T.pointwise("tanh", Tensor([0.0]))

    def test_scalar_broadcast(self):
        out = T.add(Tensor([[1.0, 2.0]]), Tensor(3.0))
        np.testing.assert_array_equal(out.data, [[4.0, 5.0]])


class TestLayerNorm:
    def test_constant_vector_gives_zero(self):
        x = Tensor(np.full((3, 5), 2.7))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), 1e-5)
        assert np.abs(out.data).max() < 1e-6

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), 0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-15)

    def test_output_statistics(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 6, 32)) * 3 + 1)
        out = T.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)), 1e-5).data
        assert np.abs(out.mean(axis=-1)).max() <= 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-4


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_against_high_precision(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 9)) * 4
        got = T.softmax(Tensor(x)).data
        for row, ref in zip(x, got):
            assert np.abs(ref - mp_softmax(row)).max() <= 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((10, 7)) * 5
        mask = rng.random((10, 7)) > 0.3
        mask[:, 0] = True
        out = T.softmax(Tensor(x), mask).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() <= 1e-12
        assert (out[~mask] == 0.0).all()

    def test_fully_masked_row_raises(self):
        with pytest.raises(ValueError, match="fully masked"):
            T.softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, True],
                                                          [False, False, False]]))


class TestFft:
    def test_impulse_spectrum_all_ones(self):
        x = np.zeros(16)
        x[0] = 1.0
        spec = T.fft_real(Tensor(x)).data
        np.testing.assert_allclose(spec[..., 0], np.ones(16), atol=1e-14)
        np.testing.assert_allclose(spec[..., 1], np.zeros(16), atol=1e-14)

    def test_constant_sequence_dc_only(self):
        spec = T.fft_real(Tensor(np.full(8, 2.5))).data
        np.testing.assert_allclose(spec[0], [20.0, 0.0], atol=1e-12)
        assert np.abs(spec[1:]).max() <= 1e-12

    def test_against_naive_dft(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(256)
        got = T.fft_real(Tensor(x)).data
        ref = naive_dft(x)
        scale = np.abs(ref).max()
        assert np.abs(got[..., 0] - ref.real).max() / scale <= 1e-9
        assert np.abs(got[..., 1] - ref.imag).max() / scale <= 1e-9

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 64))
        back = T.ifft_real(T.fft_real(Tensor(x))).data
        assert np.abs(back - x).max() / np.abs(x).max() <= 1e-10

    def test_linearity(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal(32), rng.standard_normal(32)
        lhs = T.fft_real(Tensor(2.0 * a + 3.0 * b)).data
        rhs = 2.0 * T.fft_real(Tensor(a)).data + 3.0 * T.fft_real(Tensor(b)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-11)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ShapeError, match="zero-pad"):
            T.fft_real(Tensor(np.zeros(12)))

    @pytest.mark.parametrize("n", [16, 256, 1024])
    def test_fft_convolution_matches_direct(self, n):
        rng = np.random.default_rng(n)
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        m = T.next_pow2(2 * n)
        fa = T.fft_real(Tensor(np.concatenate([a, np.zeros(m - n)]))).data
        fb = T.fft_real(Tensor(np.concatenate([b, np.zeros(m - n)]))).data
        prod = np.stack([fa[..., 0] * fb[..., 0] - fa[..., 1] * fb[..., 1],
                         fa[..., 0] * fb[..., 1] + fa[..., 1] * fb[..., 0]], axis=-1)
        got = T.ifft_real(Tensor(prod)).data[: 2 * n - 1]
        ref = direct_linear_conv(a, b)
        assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-9


class TestCausalConvFft:
    def test_matches_direct_causal(self):
        rng = np.random.default_rng(8)
        u = rng.standard_normal((2, 20, 3))
        k = rng.standard_normal((3, 20))
        got = T.causal_conv_fft(Tensor(u), Tensor(k)).data
        for b in range(2):
            for c in range(3):
                from oracles import direct_causal_conv
                ref = direct_causal_conv(u[b, :, c], k[c])
                assert np.abs(got[b, :, c] - ref).max() <= 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            T.causal_conv_fft(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((3, 4))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(x)
        np.testing.assert_array_equal(tape.gradients(loss)[x], np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.mul(x, x))
        np.testing.assert_allclose(tape.gradients(loss)[x], [2.0, 4.0], atol=1e-15)

    def test_additive_accumulation(self):
        x = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.add(T.mul(x, x), T.scale(x, 5.0)))
        np.testing.assert_allclose(tape.gradients(loss)[x], [11.0], atol=1e-15)

    def test_loss_not_on_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            T.tsum(x)
        stray = Tensor(1.0)
        with pytest.raises(ValueError, match="not recorded"):
            tape.gradients(stray)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            tape.gradients(y)

    def test_module_level_backward(self):
        x = Tensor([2.0], requires_grad=True)
        with GradTape() as tape:
            loss = T.tsum(T.mul(x, x))
        assert mhssm.backward(tape, loss)[x][0] == pytest.approx(4.0)

    def test_parameters_property(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0])
        with GradTape() as tape:
            T.tsum(T.add(x, y))
        assert tape.parameters == [x]


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed):
    from mhssm.verify import max_grad_error, tensor_op_cases
    for name, apply, params in tensor_op_cases(seed):
        err = max_grad_error(apply, params)
        assert err <= 1.0, f"{name} gradient error {err:.3f}x tolerance at seed {seed}"


class TestDropout:
    def test_identity_when_disabled(self):
        x = Tensor([1.0, 2.0])
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x
        assert T.dropout(x, 0.5, None) is x

    def test_deterministic_given_generator(self):
        x = Tensor(np.ones(1000))
        a = T.dropout(x, 0.3, np.random.default_rng(9)).data
        b = T.dropout(x, 0.3, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)
        assert abs(a.mean() - 1.0) < 0.1


class TestCrossEntropy:
    def test_matches_manual(self):
        rng = np.random.default_rng(10)
        logits = rng.standard_normal((2, 3, 4))
        targets = np.array([[0, -1, 2], [3, 1, -1]])
        loss = T.cross_entropy(Tensor(logits), targets).item()
        ref = []
        for b in range(2):
            for t in range(3):
                if targets[b, t] < 0:
                    continue
                z = logits[b, t]
                ref.append(-(z[targets[b, t]] - np.log(np.exp(z - z.max()).sum()) - z.max()))
        assert loss == pytest.approx(np.mean(ref), abs=1e-12)

    def test_accuracy_ignores_invalid(self):
        logits = np.zeros((1, 3, 2))
        logits[0, :, 1] = 1.0
        targets = np.array([[1, 0, -1]])
        assert T.accuracy(logits, targets) == 0.5


class TestReverseWithin:
    def test_involution(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((3, 7, 2)))
        lengths = [7, 4, 1]
        twice = T.reverse_within(T.reverse_within(x, lengths), lengths)
        np.testing.assert_array_equal(twice.data, x.data)

    def test_padding_stays_in_place(self):
        x = Tensor(np.array([[[1.0], [2.0], [3.0], [0.0]]]))
        out = T.reverse_within(x, [3])
        np.testing.assert_array_equal(out.data[0, :, 0], [3.0, 2.0, 1.0, 0.0])

    def test_against_loop_oracle(self):
        from oracles import loop_reverse
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 9, 3))
        lengths = [9, 5, 2, 7]
        got = T.reverse_within(Tensor(x), lengths).data
        np.testing.assert_array_equal(got, loop_reverse(x, lengths))


class TestTensorType:
    def test_immutable(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0

    def test_shape_data_consistency(self):
        x = Tensor(np.zeros((2, 3, 4)))
        assert x.size == np.prod(x.shape) == x.data.size

    def test_dtype_coercion(self):
        assert Tensor([1, 2]).dtype == np.float64
        assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32

    def test_finite_outputs_for_finite_inputs(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((4, 8)) * 10)
        for op in (T.sigmoid, T.gelu, T.relu, T.exp, T.sin, T.cos):
            assert np.isfinite(op(x).data).all()
