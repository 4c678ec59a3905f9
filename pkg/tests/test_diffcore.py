import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdarhmm import diffcore as dc
from kdarhmm.diffcore import (
    NumericalError,
    Primitive,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    check_gradient,
    record,
)


def grad_of(f, *values):
    tape = Tape()
    leaves = [tape.leaf(np.asarray(v, dtype=np.float64)) for v in values]
    out = f(*leaves)
    g = backward(tape, out)
    return out.item(), [g[x] for x in leaves]


class TestRecordExamples:
    def test_mul_product_rule(self):
        value, (gx, gy) = grad_of(lambda x, y: record("mul", [x, y]), 3.0, 4.0)
        assert value == 12.0
        assert gx == 4.0 and gy == 3.0

    def test_logsumexp_symmetric(self):
        value, (g,) = grad_of(lambda x: record("logsumexp", [x]), [0.0, 0.0])
        assert value == pytest.approx(np.log(2.0), abs=1e-15)
        np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-15)

    def test_matmul_against_finite_differences(self):
        rng = np.random.default_rng(0)
        B = rng.normal(size=(3, 1))
        w = rng.normal(size=(2, 1))
        err = check_gradient(lambda A: dc.tsum(record("matmul", [A, B]) * w), rng.normal(size=(2, 3)))
        assert err < 1e-6
        A = rng.normal(size=(2, 3))
        err = check_gradient(lambda Bt: dc.tsum(record("matmul", [A, Bt]) * w), B)
        assert err < 1e-6

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
            record("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1)))])
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones(2)) + Tensor(np.ones(3))

    def test_operands_on_different_tapes_rejected(self):
        a, b = Tape().leaf(1.0), Tape().leaf(2.0)
        with pytest.raises(TapeError):
            a + b

    def test_constants_do_not_record(self):
        tape = Tape()
        x = tape.leaf(2.0)
        c = Tensor(3.0) * Tensor(4.0)
        assert len(tape) == 0
        y = x * c
        assert len(tape) == 1
        assert y.item() == 24.0


class TestBackwardExamples:
    def test_square(self):
        _, (g,) = grad_of(lambda x: x**2, 3.0)
        assert g == 6.0

    def test_sigmoid_at_zero(self):
        _, (g,) = grad_of(dc.sigmoid, 0.0)
        assert g == 0.25

    def test_two_layer_tanh_network(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(5, 3))
        y = rng.normal(size=(5, 1))
        W2 = rng.normal(size=(4, 1))

        def loss(W1):
            h = dc.tanh(Tensor(X) @ W1)
            return dc.tsum(dc.square(h @ W2 - y)) / 5.0

        assert check_gradient(loss, rng.normal(size=(3, 4))) < 1e-4

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(TapeError, match="scalar"):
            backward(tape, x * 2.0)

    def test_untouched_leaf_gets_zero(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        unused = tape.leaf(np.ones((2, 2)))
        g = backward(tape, dc.tsum(x * x))
        np.testing.assert_array_equal(g[unused], np.zeros((2, 2)))
        np.testing.assert_array_equal(g[x], [2.0, 4.0])

    def test_detached_tensor_contributes_nothing(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        y = dc.tsum(x * x.detach())
        np.testing.assert_array_equal(backward(tape, y)[x], [1.0, 2.0])


class TestCheckGradient:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(2)
        assert check_gradient(lambda x: dc.tsum(dc.square(x)), rng.normal(size=7)) < 1e-9

    def test_logsumexp(self):
        assert check_gradient(lambda x: dc.logsumexp(x), np.array([1.0, 2.0, 3.0])) < 1e-6

    def test_detects_wrong_partial(self):
        broken = Primitive("broken_square", np.square, lambda g, out, a: (3.0 * g * a,))
        err = check_gradient(lambda x: dc.tsum(record(broken, [x])), np.array([0.7, -1.3]))
        assert err > 1e-2

    def test_rejects_non_finite_perturbation(self):
        # sqrt is finite at the point but NaN one step to the left
        with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
            check_gradient(lambda x: dc.tsum(dc.sqrt(x)), np.array([1e-6]), step=1e-5)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            check_gradient(lambda x: dc.tsum(x), np.ones(2), step=0.0)


def _mixed_sign(rng, shape, low=0.1, high=10.0):
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


# Saturating ops get narrower ranges: where the true partial is below ~1e-6 of
# the function value, central differences lose it to roundoff.
UNARY = {
    "exp": (dc.exp, lambda r, s: _mixed_sign(r, s, 0.1, 5.0)),
    "log": (dc.log, lambda r, s: r.uniform(0.1, 10.0, s)),
    "tanh": (dc.tanh, lambda r, s: _mixed_sign(r, s, 0.1, 3.0)),
    "sigmoid": (dc.sigmoid, lambda r, s: _mixed_sign(r, s, 0.1, 5.0)),
    "softplus": (dc.softplus, lambda r, s: _mixed_sign(r, s, 0.1, 5.0)),
    "square": (dc.square, _mixed_sign),
    "sqrt": (dc.sqrt, lambda r, s: r.uniform(0.1, 10.0, s)),
    "neg": (lambda x: -x, _mixed_sign),
    "sum": (lambda x: dc.tsum(x, axis=0), _mixed_sign),
    "mean": (lambda x: dc.mean(x, axis=1), _mixed_sign),
    "logsumexp": (lambda x: dc.logsumexp(x, axis=1), lambda r, s: _mixed_sign(r, s, 0.1, 3.0)),
    "cumsum": (lambda x: dc.cumsum(x, axis=1), _mixed_sign),
    "reshape": (lambda x: dc.reshape(x, (-1,)), _mixed_sign),
    "transpose": (dc.transpose, _mixed_sign),
    "getitem": (lambda x: x[1:, ::2], _mixed_sign),
    "concat": (lambda x: dc.concat([x, x * 2.0], axis=1), _mixed_sign),
    "stack": (lambda x: dc.stack([x, x], axis=0), _mixed_sign),
}

BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_unary_primitive_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    op, draw = UNARY[name]
    x = draw(rng, (3, 4))
    # positive weights: summed partials cannot cancel to roundoff level
    w = rng.uniform(0.5, 1.5, size=np.shape(op(Tensor(x)).value))
    assert check_gradient(lambda t: dc.tsum(op(t) * w), x) < 1e-6


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_binary_primitive_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    op = BINARY[name]
    a, b = _mixed_sign(rng, (3, 4)), _mixed_sign(rng, (3, 4))
    w = rng.uniform(0.5, 1.5, size=(3, 4))
    assert check_gradient(lambda t: dc.tsum(op(t, Tensor(b)) * w), a) < 1e-6
    assert check_gradient(lambda t: dc.tsum(op(Tensor(a), t) * w), b) < 1e-6


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_broadcast_operand_gradient_sums_over_rows(name, seed):
    rng = np.random.default_rng(seed)
    op = BINARY[name]
    a, b = rng.uniform(0.1, 10.0, (3, 4)), rng.uniform(0.1, 10.0, (4,))
    w = rng.uniform(0.5, 1.5, size=(3, 4))
    assert check_gradient(lambda t: dc.tsum(op(Tensor(a), t) * w), b) < 1e-6


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_solve_tril_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.normal(size=(3, 3)) * 0.3) + np.diag(rng.uniform(1.0, 2.0, 3))
    B = rng.normal(size=(3, 2))
    w = rng.normal(size=(3, 2))
    assert check_gradient(lambda t: dc.tsum(dc.solve_tril(t, Tensor(B)) * w), L) < 1e-6
    assert check_gradient(lambda t: dc.tsum(dc.solve_tril(Tensor(L), t) * w), B) < 1e-6


def test_every_registered_primitive_is_covered():
    covered = set(UNARY) | set(BINARY) | {"matmul", "solve_tril"}
    assert set(dc.primitives()) <= covered


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_of_independent_sum_is_concatenation(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=3), rng.normal(size=2)
    f = lambda a: dc.tsum(dc.tanh(a) * a)
    g = lambda b: dc.logsumexp(b * 3.0)
    _, (ga, gb) = grad_of(lambda a, b: f(a) + g(b), a0, b0)
    _, (fa,) = grad_of(f, a0)
    _, (gb_only,) = grad_of(g, b0)
    np.testing.assert_array_equal(np.concatenate([ga, gb]), np.concatenate([fa, gb_only]))


def test_backward_is_repeatable():
    rng = np.random.default_rng(3)
    tape = Tape()
    x = tape.leaf(rng.normal(size=(4, 3)))
    y = dc.logsumexp(dc.tanh(x @ rng.normal(size=(3, 2))))
    first = backward(tape, y)[x]
    second = backward(tape, y)[x]
    np.testing.assert_array_equal(first, second)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_logsumexp_is_shift_safe(values):
    x = np.array(values)
    base = dc.logsumexp(Tensor(x)).item()
    shifted = dc.logsumexp(Tensor(x + 1000.0)).item()
    assert np.isfinite(shifted)
    assert abs(shifted - base - 1000.0) < 1e-9


def test_division_by_tiny_value_is_an_error():
    with pytest.raises(NumericalError):
        Tensor(1.0) / Tensor(1e-301)


def test_log_clamps_at_floor():
    assert dc.log(Tensor(0.0)).item() == pytest.approx(np.log(1e-300))


def test_gradients_from_parallel_tapes_merge_order_free():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=(3,))
    chunks = [rng.normal(size=(5, 3)) for _ in range(4)]
    results = [None] * len(chunks)

    def work(i):
        tape = Tape()
        w = tape.leaf(w0, name="w")
        loss = dc.tsum(dc.square(Tensor(chunks[i]) @ w))
        results[i] = backward(tape, loss).by_name()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(chunks))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    forward = dc.merge_gradients(results)["w"]
    reverse = dc.merge_gradients(results[::-1])["w"]
    _, (whole,) = grad_of(lambda w: dc.tsum(dc.square(Tensor(np.vstack(chunks)) @ w)), w0)
    np.testing.assert_allclose(forward, reverse, rtol=1e-14)
    np.testing.assert_allclose(forward, whole, rtol=1e-12)
