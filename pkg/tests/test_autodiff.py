import numpy as np
import pytest

from verivqa.autodiff import (EPS, AutodiffError, NonFiniteValue, OP_KINDS,
                              ShapeMismatch, Tape, grad_check)
from verivqa.params import ParamStore

LOG2 = 0.6931471805599453


def test_identity_graph():
    tape = Tape()
    x = tape.leaf("x", [1.0, 2.0])
    y = x + 0.0
    tape.mark_output("y", y)
    assert np.array_equal(y.value, [1.0, 2.0])


def test_sigmoid_at_zero():
    tape = Tape()
    x = tape.leaf("x", [0.0])
    assert x.sigmoid().value[0] == pytest.approx(0.5, abs=0)


def test_matmul_identity():
    tape = Tape()
    eye = tape.leaf("i", np.eye(2))
    v = tape.leaf("v", [[3.0], [4.0]])
    assert np.array_equal((eye @ v).value, [[3.0], [4.0]])


def test_matmul_shape_mismatch_names_op():
    tape = Tape()
    a = tape.leaf("a", np.ones((2, 3)))
    b = tape.leaf("b", np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        a @ b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_rejected():
    tape = Tape()
    x = tape.leaf("x", [1e308])
    with pytest.raises(NonFiniteValue):
        x * 1e308


def test_backward_power_rule():
    tape = Tape()
    x = tape.leaf("x", [3.0])
    y = (x * x).sum()
    grads = tape.backward(y)
    assert grads["x"][0] == pytest.approx(6.0)


def test_backward_constant_has_zero_grad():
    tape = Tape()
    x = tape.leaf("x", np.ones((2, 2)))
    unused = tape.leaf("unused", np.ones(3))
    y = x.sum()
    grads = tape.backward(y)
    assert np.array_equal(grads["unused"], np.zeros(3))


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf("x", np.ones(3))
    y = x * 2.0
    with pytest.raises(AutodiffError):
        tape.backward(y)


def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(5)
    store = ParamStore()
    store.create("w1", rng.standard_normal((4, 5)) * 0.6)
    store.create("w2", rng.standard_normal((5, 3)) * 0.6)
    store.create("w3", rng.standard_normal((3, 1)) * 0.6)
    x0 = rng.standard_normal((2, 4))

    def build(tape, L):
        x = tape.const(x0)
        h1 = (x @ L["w1"]).tanh()
        h2 = (h1 @ L["w2"]).sigmoid()
        return (h2 @ L["w3"]).sum()

    assert grad_check(build, store, step=1e-5) <= 1e-4


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(6)
    store = ParamStore()
    store.create("w", rng.standard_normal((1, 4)))
    x0 = rng.standard_normal((4, 1))

    def build(tape, L):
        return (L["w"] @ tape.const(x0)).sum()

    assert grad_check(build, store) <= 1e-8


def test_grad_check_bce_sigmoid_head():
    rng = np.random.default_rng(7)
    store = ParamStore()
    store.create("w", rng.standard_normal((3, 2)))
    store.create("b", rng.standard_normal(2))
    x0 = rng.standard_normal((4, 3))
    t0 = rng.uniform(0.1, 0.9, size=(4, 2))

    def build(tape, L):
        p = (tape.const(x0) @ L["w"] + L["b"]).sigmoid()
        return tape.bce_soft(p, t0).sum()

    assert grad_check(build, store) <= 1e-4


def test_grad_check_zero_parameters_vacuous():
    store = ParamStore()

    def build(tape, L):
        return tape.const([2.0]).sum()

    assert grad_check(build, store) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    store = ParamStore()
    store.create("w", np.array([[710.0]]))

    def build(tape, L):
        # exp-style blowup via repeated multiplication to force inf
        y = L["w"] * 1e307
        return (y * 1.0).sum()

    with pytest.raises(NonFiniteValue):
        grad_check(build, store)


class TestBceSoft:
    def test_perfect_prediction_near_zero(self):
        tape = Tape()
        p = tape.leaf("p", [1.0 - EPS])
        loss = tape.bce_soft(p, np.array([1.0]))
        assert float(loss.value[0]) == pytest.approx(0.0, abs=1e-6)

    def test_symmetric_point_log2(self):
        tape = Tape()
        p = tape.leaf("p", [0.5])
        loss = tape.bce_soft(p, np.array([0.5]))
        assert float(loss.value[0]) == pytest.approx(LOG2, abs=1e-12)

    def test_against_high_precision_oracle(self):
        # mpmath (50 digits): -(0.3 log 0.8 + 0.7 log 0.2)
        expected = 1.193549604098133189
        tape = Tape()
        p = tape.leaf("p", [0.8])
        loss = tape.bce_soft(p, np.array([0.3]))
        assert float(loss.value[0]) == pytest.approx(expected, abs=1e-12)

    def test_target_outside_unit_interval_rejected(self):
        tape = Tape()
        p = tape.leaf("p", [0.5])
        with pytest.raises(AutodiffError):
            tape.bce_soft(p, np.array([1.5]))

    def test_convex_in_p_midpoint_inequality(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            p1, p2 = rng.uniform(0.01, 0.99, size=2)
            t = rng.uniform(0, 1)
            tape = Tape()
            p = tape.leaf("p", [p1, p2, (p1 + p2) / 2.0])
            vals = tape.bce_soft(p, np.full(3, t)).value
            assert vals[2] <= (vals[0] + vals[1]) / 2.0 + 1e-12


def test_forward_replay_is_bit_exact():
    rng = np.random.default_rng(13)
    tape = Tape()
    x = tape.leaf("x", rng.standard_normal((3, 4)))
    w = tape.leaf("w", rng.standard_normal((4, 9)) * 0.3)
    u = tape.leaf("u", rng.standard_normal((3, 9)) * 0.3)
    b = tape.leaf("b", rng.standard_normal(9) * 0.1)
    hs = tape.gru(x.reshape(3, 1, 4).broadcast_to((3, 2, 4)), w, u, b)
    out = (hs.softmax(axis=-1) * hs.sigmoid()).sum()
    tape.mark_output("out", out)
    first = {name: tape.values[vid].copy() for name, vid in tape._outputs.items()}
    replay = tape.forward({"x": x.value, "w": w.value, "u": u.value, "b": b.value})
    for name in first:
        assert np.array_equal(first[name], replay[name])


def test_forward_missing_leaf_rejected():
    tape = Tape()
    tape.leaf("x", [1.0])
    with pytest.raises(AutodiffError):
        tape.forward({})


def test_forward_wrong_shape_rejected():
    tape = Tape()
    tape.leaf("x", [1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        tape.forward({"x": np.ones(3)})


def test_every_op_kind_has_gradient_rule():
    # keep the table complete when adding kinds
    from verivqa.autodiff import _BACKWARD, _FORWARD

    assert set(_FORWARD) == set(_BACKWARD)
    assert len(OP_KINDS) == len(_FORWARD)


def test_per_op_gradients_match_finite_differences():
    # 100 random points per op kind, step 1e-5, tolerance 1e-4
    from verivqa.gradcheck import _op_checks

    master = np.random.default_rng(np.random.SeedSequence([7, 3]))
    for name, maker in _op_checks(master):
        worst = 0.0
        for p in range(100):
            rng = np.random.default_rng(np.random.SeedSequence([101, p]))
            point, build = maker(rng)
            worst = max(worst, grad_check(build, point, step=1e-5))
        assert worst <= 1e-4, f"{name}: {worst}"
