import math

import numpy as np
import pytest

from tfgrasp import tensor as T
from tfgrasp.errors import ContractError, NumericError, ParameterError, ShapeError
from tfgrasp.tensor import Tensor


def t64(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg, dtype=np.float64)


def fd_grad(fn, x, eps=1e-6):
    """Central finite differences of scalar fn wrt float64 array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1, 2], [3, 4]])
        out = T.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert np.allclose(out.data, [[19, 22], [43, 50]])

    def test_grad_of_sum(self):
        # d sum(A@B)/dA = ones @ B^T
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor([[2, 0], [0, 2]])
        T.backward(T.tsum(T.matmul(a, b)))
        assert np.allclose(a.grad, [[2, 2], [2, 2]])

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)

    def test_batched_broadcast_backward(self):
        a = t64(np.random.default_rng(0).normal(size=(3, 2, 4)), rg=True)
        b = t64(np.random.default_rng(1).normal(size=(4, 2)), rg=True)

        def run():
            return T.tsum(T.matmul(a, b)).data

        T.backward(T.tsum(T.matmul(a, b)))
        assert np.allclose(a.grad, fd_grad(run, a.data), atol=1e-6)
        assert np.allclose(b.grad, fd_grad(run, b.data), atol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(T.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_closed_form(self):
        out = T.softmax(Tensor([math.log(1), math.log(3)]), 0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-6)

    def test_mask_saturation(self):
        out = T.softmax(Tensor([0.0, -1e9]), 0)
        assert out.data[0] > 1 - 1e-7
        assert out.data[1] < 1e-7

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 7)) * 10)
        y = T.softmax(x, axis=1)
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-6)
        assert ((y.data >= 0) & (y.data <= 1)).all()

    def test_nonfinite_raises(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([0.0, np.nan]), 0)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), 3)


class TestLayerNorm:
    def test_constant_vector_zeros(self):
        x = Tensor([4.0, 4.0, 4.0])
        out = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-6)
        assert np.allclose(out.data, 0.0, atol=1e-3)

    def test_two_point(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-4)

    def test_affine_override(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4)))
        out = T.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
        assert np.allclose(out.data, 5.0)

    def test_bad_eps(self):
        with pytest.raises(ParameterError):
            T.layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_bad_affine_shape(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestElementwise:
    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_one(self):
        assert abs(T.gelu(Tensor([1.0])).data[0] - 0.84134) < 1e-4

    def test_add_identity(self):
        x = Tensor([1.0, -2.0, 3.0])
        assert np.array_equal(T.add(x, Tensor(np.zeros(3))).data, x.data)

    def test_sigmoid_range(self):
        y = T.sigmoid(Tensor([-50.0, 0.0, 50.0]))
        assert np.allclose(y.data, [0.0, 0.5, 1.0], atol=1e-6)

    def test_scale(self):
        assert np.allclose(T.scale(Tensor([2.0, 4.0]), 0.5).data, [1.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_broadcast_add_backward(self):
        a = t64(np.random.default_rng(0).normal(size=(3, 4)), rg=True)
        bias = t64(np.random.default_rng(1).normal(size=(4,)), rg=True)
        T.backward(T.tsum(T.add(a, bias)))
        assert np.allclose(bias.grad, np.full(4, 3.0))
        assert np.allclose(a.grad, np.ones((3, 4)))


class TestStridedConv:
    def test_output_shape(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 8, 8)))
        k = Tensor(np.random.default_rng(1).normal(size=(2, 1, 4, 4)))
        assert T.strided_conv2d(x, k, 4).shape == (2, 2, 2)

    def test_zero_input(self):
        x = Tensor(np.zeros((1, 8, 8)))
        k = Tensor(np.random.default_rng(1).normal(size=(2, 1, 4, 4)))
        assert np.array_equal(T.strided_conv2d(x, k, 4).data, np.zeros((2, 2, 2)))

    def test_one_hot_corner_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 8, 8)).astype(np.float32)
        k = np.zeros((1, 1, 4, 4), dtype=np.float32)
        k[0, 0, 0, 0] = 1.0
        out = T.strided_conv2d(Tensor(x), Tensor(k), 4)
        assert np.allclose(out.data[0], x[0, ::4, ::4])

    def test_non_divisible(self):
        with pytest.raises(ShapeError):
            T.strided_conv2d(Tensor(np.zeros((1, 9, 8))), Tensor(np.zeros((2, 1, 4, 4))), 4)


class TestReshapePermuteConcat:
    def test_permute_roundtrip_bit_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        back = T.permute(T.permute(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x.data)

    def test_concat_shape(self):
        out = T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_row_major_rule(self):
        x = Tensor(np.arange(6, dtype=np.float32))
        r = T.reshape(x, (2, 3))
        assert r.data[1, 2] == x.data[5]

    def test_multiset_preserved(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 6)))
        y = T.concat([T.permute(T.reshape(x, (2, 2, 6)), (1, 0, 2))], axis=0)
        assert np.array_equal(np.sort(y.data.ravel()), np.sort(x.data.ravel()))

    def test_inconsistent_spec(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.zeros(6)), (4, 2))
        with pytest.raises(ShapeError):
            T.permute(Tensor(np.zeros((2, 3))), (0, 2))
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_roll_inverse(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5, 5)))
        y = T.roll(T.roll(x, (-2, -2), (0, 1)), (2, 2), (0, 1))
        assert np.array_equal(y.data, x.data)


class TestTakeRows:
    def test_gather_and_scatter(self):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3),
                       requires_grad=True, dtype=np.float64)
        idx = np.array([0, 2, 2])
        out = T.take_rows(table, idx)
        assert np.array_equal(out.data, table.data[idx])
        T.backward(T.tsum(out))
        expect = np.zeros((4, 3))
        expect[0] = 1
        expect[2] = 2
        assert np.array_equal(table.grad, expect)


class TestMseLoss:
    def test_zero(self):
        x = Tensor([1.0, 2.0])
        assert T.mse_loss(x, Tensor([1.0, 2.0])).data == 0.0

    def test_hand_value(self):
        out = T.mse_loss(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]))
        assert np.isclose(out.data, 2.5)

    def test_grad(self):
        p = Tensor([1.0], requires_grad=True)
        T.backward(T.mse_loss(p, Tensor([0.0])))
        assert np.allclose(p.grad, [2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        assert np.allclose(x.grad, [6.0])

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        w = t64(rng.normal(size=(4, 4)), rg=True)
        x = t64(rng.normal(size=(2, 4)), rg=True)
        tgt = t64(rng.normal(size=(2, 4)))

        def loss():
            return T.mse_loss(T.softmax(T.matmul(x, w), axis=1), tgt)

        T.backward(loss())
        for p in (w, x):
            fd = fd_grad(lambda: loss().data, p.data)
            denom = np.maximum(np.abs(fd), 1e-4)
            assert (np.abs(p.grad - fd) / denom).max() < 1e-3

    def test_double_backward_doubles(self):
        x = Tensor([2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        g1 = x.grad.copy()
        T.backward(loss)
        assert np.array_equal(x.grad, 2 * g1)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_linearity_of_sum(self):
        rng = np.random.default_rng(13)
        x = t64(rng.normal(size=(3, 3)), rg=True)
        t1 = t64(rng.normal(size=(3, 3)))
        t2 = t64(rng.normal(size=(3, 3)))
        l1 = T.mse_loss(T.gelu(x), t1)
        l2 = T.mse_loss(T.sigmoid(x), t2)
        T.backward(T.add(l1, l2))
        combined = x.grad.copy()
        x.zero_grad()
        T.backward(l1)
        T.backward(l2)
        assert np.array_equal(x.grad, combined)


class TestGradcheckAllOps:
    """Spec invariant: analytic vs central FD within 1e-3 on small tensors."""

    @pytest.mark.parametrize("seed", range(20))
    def test_random_small_tensors(self, seed):
        rng = np.random.default_rng(seed)
        a = t64(rng.normal(size=(3, 4)), rg=True)
        b = t64(rng.normal(size=(4, 5)), rg=True)
        g = t64(rng.normal(size=(5,)), rg=True)
        bt = t64(rng.normal(size=(5,)), rg=True)
        tgt = t64(rng.normal(size=(3, 5)))

        def loss():
            h = T.matmul(a, b)
            h = T.layer_norm(h, g, bt, eps=1e-5)
            h = T.gelu(h)
            h = T.softmax(h, axis=1)
            return T.mse_loss(h, tgt)

        T.backward(loss())
        for p in (a, b, g, bt):
            fd = fd_grad(lambda: loss().data, p.data)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(p.grad)), 1e-4)
            assert (np.abs(p.grad - fd) / denom).max() < 1e-3, f"seed {seed}"


class TestAdamW:
    def test_first_step_bias_correction(self):
        p = np.zeros(1, dtype=np.float64)
        g = np.ones(1, dtype=np.float64)
        m = np.zeros(1)
        v = np.zeros(1)
        T.adamw_update(p, g, m, v, 1, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                       weight_decay=0.0)
        assert abs(p[0] + 1e-3) < 1e-9

    def test_zero_grad_no_motion(self):
        p = np.full(3, 0.7)
        m = np.zeros(3)
        v = np.zeros(3)
        for t in range(1, 5):
            T.adamw_update(p, np.zeros(3), m, v, t, 1e-2, 0.9, 0.999, 1e-8, 0.0)
        assert np.allclose(p, 0.7)

    def test_decoupled_decay(self):
        p = np.ones(1, dtype=np.float64)
        m = np.zeros(1)
        v = np.zeros(1)
        T.adamw_update(p, np.zeros(1), m, v, 1, lr=1e-3, beta1=0.9, beta2=0.999,
                       eps=1e-8, weight_decay=0.5)
        assert np.isclose(p[0], 1.0 - 1e-3 * 0.5)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            T.adamw_update(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), 1,
                           1e-3, 0.9, 0.999, 1e-8, 0.0)

    def test_optimizer_lr_zero(self):
        params = {"w": Tensor(np.ones(4), requires_grad=True)}
        opt = T.AdamW(params, lr=0.0)
        params["w"].grad = np.ones(4, dtype=np.float32)
        opt.step()
        assert np.array_equal(params["w"].data, np.ones(4, dtype=np.float32))


class TestTape:
    def test_clear_resets(self):
        tape = T.get_tape()
        tape.clear()
        x = Tensor([1.0], requires_grad=True)
        T.mul(x, x)
        assert len(tape) == 1
        tape.clear()
        assert len(tape) == 0

    def test_no_grad_skips_recording(self):
        tape = T.get_tape()
        tape.clear()
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            T.mul(x, x)
        assert len(tape) == 0

    def test_constants_not_recorded(self):
        tape = T.get_tape()
        tape.clear()
        T.mul(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0
