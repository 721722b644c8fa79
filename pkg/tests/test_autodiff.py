import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxybnn import autodiff as ad
from proxybnn.autodiff import DomainError, Tape, gradcheck


def scalar_tape(fn, x0):
    tape = Tape()
    x = tape.leaf(x0)
    tape.mark_output(fn(x))
    return tape


# forward examples ------------------------------------------------------------

def test_relu_negative_branch():
    tape = scalar_tape(ad.relu, -2.0)
    assert tape.forward([-2.0])[0] == 0.0


def test_pythagorean_identity():
    tape = scalar_tape(lambda x: ad.square(ad.sin(x)) + ad.square(ad.cos(x)), 0.7)
    assert tape.forward([0.7])[0] == pytest.approx(1.0, abs=1e-15)


def test_x_exp_x_matches_high_precision():
    tape = scalar_tape(lambda x: x * ad.exp(x), 1.0)
    assert float(tape.forward([1.0])[0]) == pytest.approx(float(mpmath.e), rel=1e-15)


def test_forward_replays_for_new_values():
    tape = scalar_tape(lambda x: x * x + 1.0, 2.0)
    assert tape.forward([3.0])[0] == 10.0
    assert tape.forward([-1.0])[0] == 2.0


def test_forward_rejects_wrong_leaf_count_and_shape():
    tape = scalar_tape(ad.exp, 0.0)
    with pytest.raises(ValueError):
        tape.forward([1.0, 2.0])
    with pytest.raises(ValueError):
        tape.forward([np.zeros(3)])


# backward examples -----------------------------------------------------------

def test_power_rule():
    tape = scalar_tape(ad.square, 3.0)
    assert tape.backward([3.0])[0] == 6.0


def test_relu_kink_derivative_is_zero():
    tape = scalar_tape(ad.relu, 0.0)
    assert tape.backward([0.0])[0] == 0.0


def test_sigmoid_derivative_at_zero():
    tape = scalar_tape(ad.sigmoid, 0.0)
    assert tape.backward([0.0])[0] == 0.25


def test_backward_output_index_out_of_range():
    tape = scalar_tape(ad.exp, 0.0)
    with pytest.raises(IndexError):
        tape.backward([0.0], output_index=1)


def test_backward_needs_element_for_vector_output():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    tape.mark_output(x * 2.0)
    with pytest.raises(ValueError):
        tape.backward()
    g = tape.backward(element=(1,))
    np.testing.assert_array_equal(g[0], [0.0, 2.0, 0.0])


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(1.0)
    tape.leaf(np.ones(2))
    tape.mark_output(x * 3.0)
    g = tape.backward()
    assert g[0] == 3.0
    np.testing.assert_array_equal(g[1], [0.0, 0.0])


# domain errors ---------------------------------------------------------------

@pytest.mark.parametrize("fn,x", [(ad.log, 0.0), (ad.log, -1.0), (ad.sqrt, -1e-3),
                                  (lambda v: 1.0 / v, 0.0)])
def test_domain_violations_raise(fn, x):
    with pytest.raises(DomainError):
        scalar_tape(fn, x)
    tape = scalar_tape(fn, 1.0)
    with pytest.raises(DomainError):
        tape.forward([x])


def test_sqrt_at_zero_only_fails_when_gradient_flows():
    tape = Tape()
    x = tape.leaf(np.array([0.0, 4.0]))
    s = ad.sqrt(x)
    tape.mark_output(ad.sum(s * np.array([0.0, 1.0])))
    np.testing.assert_allclose(tape.backward()[0], [0.0, 0.25])
    tape2 = Tape()
    z = tape2.leaf(0.0)
    tape2.mark_output(ad.sqrt(z))
    with pytest.raises(DomainError):
        tape2.backward()


# gradcheck -------------------------------------------------------------------

def test_gradcheck_cube():
    tape = scalar_tape(lambda x: x * x * x, 1.5)
    assert gradcheck(tape, [1.5], 1e-5) < 1e-6


def test_gradcheck_two_relu_layers():
    rng = np.random.default_rng(3)
    vals = [rng.normal(size=(3,)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
    tape = Tape()
    x, W1, W2 = (tape.leaf(v) for v in vals)
    tape.mark_output(ad.sum(ad.relu(ad.relu(x @ W1) @ W2)))
    assert gradcheck(tape, vals, 1e-5) < 1e-6


def test_gradcheck_constant_tape():
    tape = Tape()
    tape.leaf(2.0)
    c = tape.const(5.0)
    tape.mark_output(c * 1.0)
    assert gradcheck(tape, [2.0]) == 0.0


def test_gradcheck_rejects_bad_step():
    tape = scalar_tape(ad.exp, 0.0)
    with pytest.raises(ValueError):
        gradcheck(tape, [0.0], step=0.0)


def test_broadcast_gradients_sum_back():
    tape = Tape()
    a = tape.leaf(np.ones((4, 3)))
    b = tape.leaf(np.array([1.0, 2.0, 3.0]))
    c = tape.leaf(2.0)
    tape.mark_output(ad.sum(a * b + c))
    ga, gb, gc = tape.backward()
    np.testing.assert_array_equal(ga, np.tile([1.0, 2.0, 3.0], (4, 1)))
    np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])
    assert gc == 12.0


def test_sum_axis():
    tape = Tape()
    a = tape.leaf(np.arange(6.0).reshape(2, 3))
    s = ad.sum(a, axis=1)
    np.testing.assert_array_equal(s.value, [3.0, 12.0])
    tape.mark_output(ad.sum(ad.square(s)))
    np.testing.assert_array_equal(tape.backward()[0], [[6.0] * 3, [24.0] * 3])


def test_numpy_fallback():
    assert ad.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert ad.sigmoid(0.0) == 0.5
    assert math.isclose(ad.softplus(0.0), math.log(2.0))


def test_sigmoid_softplus_extreme_inputs_stay_finite():
    x = np.array([-800.0, 0.0, 800.0])
    assert np.all(np.isfinite(ad.sigmoid(x)))
    assert np.all(np.isfinite(ad.softplus(x)))
    tape = Tape()
    v = tape.leaf(x)
    tape.mark_output(ad.sum(ad.softplus(v) + ad.sigmoid(v)))
    assert np.all(np.isfinite(tape.backward()[0]))


# properties ------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_gradient_is_linear(a, b, xs):
    x0 = np.array(xs)

    def grad(fn):
        tape = Tape()
        x = tape.leaf(x0)
        tape.mark_output(fn(x))
        return tape.backward()[0]

    f = lambda x: ad.sum(ad.sin(x) * x)  # noqa: E731
    g = lambda x: ad.sum(ad.exp(x * 0.5))  # noqa: E731
    combo = grad(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), rtol=0, atol=1e-12)


def test_repeated_runs_bit_identical():
    rng = np.random.default_rng(0)
    vals = [rng.normal(size=(5, 4)), rng.normal(size=(4,))]

    def run():
        tape = Tape()
        W, b = tape.leaf(vals[0]), tape.leaf(vals[1])
        tape.mark_output(ad.sum(ad.softplus(W @ b) * ad.cos(W @ b)))
        out = tape.forward(vals)[0]
        return out, tape.backward()

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))
