import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wsprompt import grad as G
from wsprompt.grad import DomainError, OptimizerState, ShapeError, Tensor, adam_step

from fd import numeric_grad, rel_error
from gradcases import PRIMITIVES, check_case, worst_error


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_float64(name):
    assert worst_error(name, cases=100) < 1e-4


@pytest.mark.parametrize("name", ["matmul", "softmax", "layer_norm", "l2_normalize", "cross_entropy"])
def test_primitive_gradients_float32(name):
    build, fn = PRIMITIVES[name]
    rng = np.random.default_rng(7)
    for _ in range(20):
        arrays = [np.asarray(a, dtype=np.float32) for a in build(rng)]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        w = rng.normal(size=out.shape)
        G.backward(G.sum(out * Tensor(w.astype(np.float32))))
        f64 = [a.astype(np.float64) for a in arrays]
        numeric = numeric_grad(lambda *xs: float(np.sum(fn(*[Tensor(x) for x in xs]).data * w)), f64)
        for leaf, n in zip(leaves, numeric):
            assert leaf.grad.dtype == np.float32
            assert rel_error(leaf.grad, n) < 1e-2


def test_relu_definition():
    np.testing.assert_array_equal(G.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_uniform_softmax():
    y = G.softmax(Tensor(np.full((2, 7), 3.3)))
    np.testing.assert_allclose(y.data, 1 / 7, atol=1e-7)


def test_matmul_gradient_3x4_4x2():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    G.backward(G.sum(G.matmul(ta, tb)))
    na, nb = numeric_grad(lambda x, y: float((x @ y).sum()), [a, b])
    assert rel_error(ta.grad, na) < 1e-6
    assert rel_error(tb.grad, nb) < 1e-6


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    G.backward(G.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    G.backward(G.sum(x * x))
    G.backward(G.sum(x * x))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        G.backward(x * 2.0)


def test_fused_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 4))
    target = rng.dirichlet(np.ones(4), size=5)
    t = Tensor(logits, requires_grad=True)
    G.backward(G.cross_entropy(t, target))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(t.grad, (p - target) / 5, atol=1e-12)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        G.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert exc.value.op == "matmul"
    assert exc.value.shapes == ((2, 3), (2, 3))


def test_domain_errors():
    with pytest.raises(DomainError):
        G.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        G.div(Tensor([1.0]), Tensor([0.0]))
    # floored log never fails
    assert np.isfinite(G.log(Tensor([0.0, 1.0]), floor=1e-12).data).all()


def test_zero_row_normalizes_to_zero():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    y = G.l2_normalize(x)
    np.testing.assert_array_equal(y.data[0], [0, 0])
    np.testing.assert_allclose(y.data[1], [0.6, 0.8])
    G.backward(G.sum(y))
    np.testing.assert_array_equal(x.grad[0], [0, 0])


finite_rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                         elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = G.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(G.softmax(Tensor(x + c)).data, y, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_l2_rows_unit_or_zero(x):
    y = G.l2_normalize(Tensor(x)).data
    norms = np.linalg.norm(y, axis=1)
    zero = np.linalg.norm(x, axis=1) == 0
    np.testing.assert_allclose(norms[~zero], 1.0, atol=1e-6)
    assert np.all(norms[zero] == 0)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.normal(size=(16, 8)).astype(np.float32))
        h = G.layer_norm(G.relu(x @ w), Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32)))
        G.backward(G.mean(G.softmax(h) * h))
        return h.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- optimizer

def _state(**kw):
    kw.setdefault("total_steps", 10)
    return OptimizerState(**kw)


def test_adam_zero_gradient_no_decay_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, _state(lr=0.1))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_zero_lr_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.array([0.3, 0.4])}, _state(lr=0.0, weight_decay=0.1))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_on_square():
    # bias-corrected first step moves by lr * g / |g| = lr
    p = {"w": Tensor(np.array([1.0]))}
    adam_step(p, {"w": 2 * p["w"].data}, _state(lr=0.1))
    np.testing.assert_allclose(p["w"].data, [0.9], atol=1e-7)


def test_adam_warmup_ramps_linearly():
    st_ = _state(lr=1.0, total_steps=20, warmup_fraction=0.1)
    assert [st_.current_lr(t) for t in (1, 2, 3, 10)] == [0.5, 1.0, 1.0, 1.0]
    st_ = _state(lr=1.0, total_steps=100, warmup_fraction=0.1)
    np.testing.assert_allclose([st_.current_lr(t) for t in (1, 5, 10, 11)], [0.1, 0.5, 1.0, 1.0])


def test_adam_step_counter_increments():
    st_ = _state(lr=0.1)
    p = {"w": Tensor(np.ones(3))}
    for k in range(3):
        adam_step(p, {"w": np.ones(3)}, st_)
        assert st_.step == k + 1
    assert st_.m["w"].shape == (3,)


def test_adam_nan_gradient_names_parameter():
    p = {"layer.w": Tensor(np.ones(2))}
    with pytest.raises(G.NonFiniteGradient, match="layer.w"):
        adam_step(p, {"layer.w": np.array([np.nan, 1.0])}, _state(lr=0.1))
