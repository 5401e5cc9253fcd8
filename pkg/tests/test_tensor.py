"""Autodiff primitives against central finite differences and closed forms."""

import numpy as np
import pytest

from varidiff import tensor as T
from varidiff.tensor import NonFiniteError, Tape, Tensor, validate_finite


def finite_diff_grad(f, x, h=1e-4):
    """Central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2.0 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def check_gradient(build, shapes, seed, tol=1e-5):
    """Compare autodiff grads of scalar build(*tensors) against finite differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for i, (arr, t) in enumerate(zip(arrays, tensors)):
        def f(x, i=i):
            args = [Tensor(a.copy()) for a in arrays]
            args[i] = Tensor(x)
            return float(build(*args).data)

        fd = finite_diff_grad(f, arr)
        assert rel_err(t.grad, fd) < tol, f"operand {i}: rel err {rel_err(t.grad, fd)}"


class TestElementwise:
    def test_add_values(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [4.0, 6.0])

    def test_mul_by_zero_annihilates(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        out = T.sum_(T.mul(x, Tensor([0.0, 0.0, 0.0])))
        out.backward()
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_broadcast_add_grad_is_column_sum(self):
        # [2,3] + [3]: gradient of the [3] operand is the column sum of
        # the upstream grad; checked against finite differences
        check_gradient(
            lambda a, b: T.sum_(T.mul(T.add(a, b), T.add(a, b))), [(2, 3), (3,)], seed=0
        )

    def test_sub_scale_neg_grads(self):
        check_gradient(
            lambda a, b: T.sum_(T.mul(T.sub(a, b), T.scale(T.neg(a), 0.7))),
            [(4, 2), (4, 2)],
            seed=1,
        )

    def test_scalar_operand_keeps_dtype(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert T.add(x, 1.0).dtype == np.float32
        assert T.mul(x, 2.5).dtype == np.float32


class TestMatmul:
    def test_identity(self):
        v = np.arange(3.0).reshape(3, 1)
        out = T.matmul(Tensor(np.eye(3)), Tensor(v))
        np.testing.assert_allclose(out.data, v)

    def test_2x2_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_allclose(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self):
        check_gradient(lambda a, b: T.sum_(T.matmul(a, b)), [(3, 4), (4, 2)], seed=2)

    def test_batched_gradient(self):
        check_gradient(
            lambda a, b: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))),
            [(2, 3, 4), (4, 5)],
            seed=3,
        )


class TestSoftmax:
    def test_constant_row_uniform(self):
        out = T.softmax(Tensor([[2.0, 2.0, 2.0, 2.0]]), axis=-1)
        np.testing.assert_allclose(out.data, 0.25)

    def test_closed_form(self):
        out = T.softmax(Tensor([0.0, np.log(3.0)]), axis=-1)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        x = np.random.default_rng(4).standard_normal((3, 5))
        a = T.softmax(Tensor(x), axis=-1).data
        b = T.softmax(Tensor(x + 123.0), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(5).standard_normal((6, 7)) * 10
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradient(self):
        check_gradient(
            lambda x: T.sum_(T.mul(T.softmax(x, axis=-1), Tensor(np.arange(8.0).reshape(2, 4)))),
            [(2, 4)],
            seed=6,
        )


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_gradient(self):
        check_gradient(
            lambda x, g, b: T.sum_(
                T.mul(T.layer_norm(x, g, b), Tensor(np.arange(12.0).reshape(3, 4)))
            ),
            [(3, 4), (4,), (4,)],
            seed=7,
            tol=1e-4,  # eps in the norm denominator perturbs the comparison
        )


class TestActivationsReductionsShapes:
    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_gradient(self):
        check_gradient(lambda x: T.sum_(T.gelu(x)), [(5, 3)], seed=8)

    def test_silu_gradient(self):
        check_gradient(lambda x: T.sum_(T.silu(x)), [(5, 3)], seed=9)

    def test_mean_value(self):
        assert float(T.mean(Tensor([2.0, 4.0])).data) == 3.0

    def test_mean_axis_gradient(self):
        check_gradient(lambda x: T.sum_(T.mul(T.mean(x, axis=0), Tensor([1.0, 2.0]))), [(4, 2)], seed=10)

    def test_reshape_round_trip(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = T.reshape(T.reshape(Tensor(x), (6, 4)), (2, 3, 4))
        np.testing.assert_array_equal(out.data, x)

    def test_transpose_gradient(self):
        check_gradient(
            lambda x: T.sum_(T.mul(T.transpose(x, (1, 0)), Tensor(np.arange(6.0).reshape(3, 2)))),
            [(2, 3)],
            seed=11,
        )

    def test_concat_gradient(self):
        check_gradient(
            lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=1), T.concat([a, b], axis=1))),
            [(2, 2), (2, 3)],
            seed=12,
        )

    def test_slice_gradient(self):
        check_gradient(lambda x: T.sum_(T.mul(x[:, 1:3], x[:, 1:3])), [(3, 5)], seed=13)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_power_rule(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.sum_(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, x).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_(x)
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_tape_topological_order(self):
        a = Tensor([1.0], requires_grad=True)
        b = T.mul(a, a)
        c = T.add(b, a)
        d = T.sum_(T.mul(c, b))
        tape = Tape(d)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.mul(x, x)
        assert out._backward is None and not out.requires_grad


class TestValidation:
    def test_validate_finite_passes(self):
        validate_finite(Tensor([1.0, 2.0]))

    def test_validate_finite_raises(self):
        with pytest.raises(NonFiniteError):
            validate_finite(Tensor([1.0, np.nan]))
        with pytest.raises(NonFiniteError):
            validate_finite(Tensor([np.inf]))


class TestDeterminism:
    def test_bit_identical_outputs_and_grads(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
            out = T.mean(T.gelu(T.matmul(x, w)))
            out.backward()
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        a = run()
        b = run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)
