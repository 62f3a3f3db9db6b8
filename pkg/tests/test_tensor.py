"""Autodiff core: forward values, backward rules and finite-difference checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustsleepnet.tensor import (
    ContractError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    concat,
    einsum,
    elementwise,
    get_default_dtype,
    gradient_check,
    matmul,
    no_grad,
    precision,
    softmax,
    stack,
)

finite = st.floats(-5, 5, allow_nan=False, width=64)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))

    def test_gradient_random_3x4_by_4x2(self, rng):
        a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
        w = Tensor(rng.standard_normal((3, 2)), dtype=np.float64)
        rep = gradient_check(lambda a, b: (matmul(a, b) * w).sum(), [a, b], tol=1e-6)
        assert rep.passed, rep

    def test_batched_left_operand(self, rng):
        a, b = t64(rng.standard_normal((2, 3, 4))), t64(rng.standard_normal((4, 5)))
        np.testing.assert_allclose(matmul(a, b).data, a.data @ b.data)
        assert gradient_check(lambda a, b: matmul(a, b).sum(), [a, b]).passed


class TestElementwise:
    def test_known_values(self):
        assert elementwise("tanh", Tensor(0.0)).item() == 0.0
        assert elementwise("sigmoid", Tensor(0.0)).item() == 0.5
        np.testing.assert_array_equal(elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_log_rejects_non_positive(self):
        with pytest.raises(DomainError):
            elementwise("log", Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            Tensor([-1.0]).log()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        # leading-dimension broadcasting is deliberately unsupported
        with pytest.raises(ShapeError):
            elementwise("mul", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_trailing_broadcast(self):
        out = elementwise("add", Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("cube", Tensor(1.0))

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp", "log"])
    def test_unary_gradients_on_twenty_inputs(self, op):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.uniform(0.1, 3.0, size=(3, 2)) if op == "log" else rng.standard_normal((3, 2))
            rep = gradient_check(lambda v: elementwise(op, v).sum(), t64(x), tol=1e-6)
            assert rep.passed, (op, rep)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients_on_twenty_inputs(self, op):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = t64(rng.standard_normal((2, 3))), t64(rng.standard_normal(3))
            w = Tensor(rng.standard_normal((2, 3)), dtype=np.float64)
            rep = gradient_check(lambda a, b: (elementwise(op, a, b) * w).sum(), [a, b], tol=1e-6)
            assert rep.passed, (op, rep)

    def test_sigmoid_is_stable_at_extremes(self):
        out = Tensor([-800.0, 800.0], dtype=np.float64).sigmoid().data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0], dtype=np.float64)).data, [1 / 3] * 3, atol=1e-15)

    def test_ln2(self, frozen):
        out = softmax(Tensor([0.0, math.log(2)], dtype=np.float64)).data
        np.testing.assert_allclose(out, frozen["softmax_ln2"], atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), finite)
    def test_sums_to_one_and_shift_invariant(self, x, c):
        a = softmax(Tensor(x, dtype=np.float64), axis=-1).data
        b = softmax(Tensor(x + c, dtype=np.float64), axis=-1).data
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(a, b, atol=1e-9)
        assert np.all(a >= 0)

    def test_gradient_other_axis(self, rng):
        x = t64(rng.standard_normal((4, 3)))
        w = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        assert gradient_check(lambda x: (softmax(x, axis=0) * w).sum(), x, tol=1e-6).passed


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        assert x.grad is None

    def test_linearity(self, rng):
        x_np = rng.standard_normal((3, 4))

        def grad_of(fn):
            x = t64(x_np)
            fn(x).backward()
            return x.grad

        f = lambda x: (x.tanh() * x).sum()  # noqa: E731
        g = lambda x: (x.exp() * 0.3).sum()  # noqa: E731
        both = grad_of(lambda x: f(x) + g(x))
        np.testing.assert_allclose(both, grad_of(f) + grad_of(g), rtol=0, atol=1e-12)

    def test_shared_subexpression(self):
        # y is used twice; its gradient must be the sum of both paths
        x = t64([0.5, -1.0])
        y = x * x
        (y * y + y).sum().backward()
        np.testing.assert_allclose(x.grad, 4 * x.data ** 3 + 2 * x.data)

    def test_tape_is_topological(self, rng):
        x = t64(rng.standard_normal(3))
        a = x.tanh()
        b = a * x
        loss = (b + a).sum()
        tape = Tape.record(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert tape.nodes[-1] is loss

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad and y._parents == ()


class TestStructuralOps:
    def test_concat_stack_getitem_gradients(self, rng):
        a, b = t64(rng.standard_normal((2, 3))), t64(rng.standard_normal((2, 2)))
        w = Tensor(rng.standard_normal((2, 5)), dtype=np.float64)
        assert gradient_check(lambda a, b: (concat([a, b], axis=-1) * w).sum(), [a, b]).passed
        c = t64(rng.standard_normal((2, 3)))
        w2 = Tensor(rng.standard_normal((2, 2, 3)), dtype=np.float64)
        assert gradient_check(lambda a, c: (stack([a, c], axis=1) * w2).sum(), [a, c]).passed
        assert gradient_check(lambda a: (a[:, 1:] * a[:, :2]).sum(), a).passed
        assert gradient_check(lambda a: a[np.array([0, 0, 1])].sum(), a).passed

    def test_reductions_reshape_transpose(self, rng):
        x = t64(rng.standard_normal((2, 3, 4)))
        w = Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
        assert gradient_check(lambda x: (x.mean(axis=1).transpose(1, 0) * w).sum(), x).passed
        assert gradient_check(lambda x: x.reshape(6, 4).sum(axis=0, keepdims=True).tanh().sum(), x).passed

    def test_einsum_matches_numpy_and_gradients(self, rng):
        a, b = t64(rng.standard_normal((2, 3, 4))), t64(rng.standard_normal((2, 4)))
        out = einsum("bij,bj->bi", a, b)
        np.testing.assert_allclose(out.data, np.einsum("bij,bj->bi", a.data, b.data))
        assert gradient_check(lambda a, b: einsum("bij,bj->bi", a, b).tanh().sum(), [a, b]).passed
        # an index summed inside one operand only
        assert gradient_check(lambda a, b: einsum("bij,bk->bi", a, b).sum(), [a, b]).passed

    def test_scalar_division_only(self, rng):
        a = t64(rng.standard_normal(3))
        assert gradient_check(lambda a: (a / 4.0).tanh().sum(), a).passed
        with pytest.raises(TypeError):
            a / a


class TestGradientCheck:
    def test_sum_has_zero_error(self, rng):
        rep = gradient_check(lambda x: x.sum(), t64(rng.standard_normal((3, 3))))
        assert rep.max_rel_error < 1e-9 and rep.n_checked == 9

    def test_requires_float64(self):
        with pytest.raises(ContractError):
            gradient_check(lambda x: x.sum(), Tensor(np.ones(2, dtype=np.float32)))

    def test_detects_a_wrong_gradient(self):
        from robustsleepnet.tensor import _result

        def bad_square(x):
            return _result(x.data ** 2, (x,), lambda g: x._accumulate(g * 3 * x.data))

        rep = gradient_check(lambda x: bad_square(x).sum(), t64([1.0, 2.0]))
        assert not rep.passed

    def test_max_coords_subsamples(self, rng):
        rep = gradient_check(lambda x: (x * x).sum(), t64(rng.standard_normal(50)), max_coords=7)
        assert rep.n_checked == 7


class TestPrecision:
    def test_default_is_float32_and_switch_restores(self):
        assert get_default_dtype() == np.float32
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_forward_on_finite_inputs_stays_finite(self, rng):
        x = Tensor(rng.standard_normal((4, 4)) * 50)
        out = softmax(x.tanh() * x, -1).log()
        assert np.all(np.isfinite(out.data))
