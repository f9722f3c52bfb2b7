import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from leaprec import diffcore as dc

from oracles import brute_force_softmax, max_rel_error, numeric_grad

GRAD_TOL = 1e-4


def _weighted(tape, out, seed=0):
    """Reduce any output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return dc.sum(dc.mul(out, tape.constant(w)))


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


SPARSE = sp.random(5, 4, density=0.5, random_state=3, format="csr")

# name -> (parameter factory, forward builder)
OP_CASES = {
    "add": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))},
            lambda t, p: dc.add(p["a"], p["b"])),
    "sub": (lambda r: {"a": r.normal(size=(3, 1)), "b": r.normal(size=(3, 4))},
            lambda t, p: dc.sub(p["a"], p["b"])),
    "mul": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(3, 1))},
            lambda t, p: dc.mul(p["a"], p["b"])),
    "div": (lambda r: {"a": r.normal(size=(3, 4)), "b": _away_from_zero(r, (3, 4), 0.5)},
            lambda t, p: dc.div(p["a"], p["b"])),
    "scale": (lambda r: {"a": r.normal(size=(5,))}, lambda t, p: dc.scale(p["a"], -2.5)),
    "neg": (lambda r: {"a": r.normal(size=(5,))}, lambda t, p: dc.neg(p["a"])),
    "sigmoid": (lambda r: {"a": r.normal(scale=3, size=(6,))}, lambda t, p: dc.sigmoid(p["a"])),
    "log_sigmoid": (lambda r: {"a": r.normal(scale=3, size=(6,))},
                    lambda t, p: dc.log_sigmoid(p["a"])),
    "relu": (lambda r: {"a": _away_from_zero(r, (6,))}, lambda t, p: dc.relu(p["a"])),
    "exp": (lambda r: {"a": r.normal(size=(6,))}, lambda t, p: dc.exp(p["a"])),
    "log": (lambda r: {"a": r.uniform(0.5, 3.0, size=(6,))}, lambda t, p: dc.log(p["a"])),
    "sum_axis": (lambda r: {"a": r.normal(size=(3, 4))}, lambda t, p: dc.sum(p["a"], axis=1)),
    "sum_keepdims": (lambda r: {"a": r.normal(size=(3, 4))},
                     lambda t, p: dc.sum(p["a"], axis=0, keepdims=True)),
    "mean": (lambda r: {"a": r.normal(size=(3, 4))}, lambda t, p: dc.mean(p["a"], axis=-1)),
    "sumsq": (lambda r: {"a": r.normal(size=(3, 4))}, lambda t, p: dc.sumsq(p["a"])),
    "l2norm": (lambda r: {"a": r.normal(size=(3, 4))}, lambda t, p: dc.l2norm(p["a"])),
    "rowdot": (lambda r: {"a": r.normal(size=(4, 3)), "b": r.normal(size=(4, 3))},
               lambda t, p: dc.rowdot(p["a"], p["b"])),
    "matmul": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))},
               lambda t, p: dc.matmul(p["a"], p["b"])),
    "matmul_batched": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 5))},
                       lambda t, p: dc.matmul(p["a"], p["b"])),
    "spmm": (lambda r: {"x": r.normal(size=(4, 3))}, lambda t, p: dc.spmm(SPARSE, p["x"])),
    "swap_last": (lambda r: {"a": r.normal(size=(2, 3, 4))}, lambda t, p: dc.swap_last(p["a"])),
    "gather": (lambda r: {"a": r.normal(size=(5, 3))},
               lambda t, p: dc.gather(p["a"], np.array([[0, 2, 2], [4, 0, 1]]))),
    "index": (lambda r: {"a": r.normal(size=(2, 3, 4))},
              lambda t, p: dc.index(p["a"], (slice(None), -1, slice(None)))),
    "softmax": (lambda r: {"a": r.normal(size=(3, 5))}, lambda t, p: dc.softmax(p["a"])),
    "softmax_masked": (lambda r: {"a": r.normal(size=(3, 5))},
                       lambda t, p: dc.softmax(p["a"], mask=np.array([1, 1, 0, 1, 0], bool))),
    "layer_norm": (lambda r: {"a": r.normal(size=(3, 6)), "g": r.normal(size=(6,)),
                              "b": r.normal(size=(6,))},
                   lambda t, p: dc.layer_norm(p["a"], p["g"], p["b"])),
    "dropout": (lambda r: {"a": r.normal(size=(4, 4))},
                lambda t, p: dc.dropout(p["a"], dc.dropout_mask((4, 4), 0.3, 7))),
}


def _check_op(name, points):
    make, build = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(points):
        params = make(rng)

        def fn(tape, p):
            return _weighted(tape, build(tape, p))

        _, grads = dc.value_and_grad(fn, params)
        num = numeric_grad(lambda q: dc.value_and_grad(fn, q)[0], {k: v.copy() for k, v in params.items()})
        worst = max(worst, max_rel_error(grads, num))
    return worst


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    assert _check_op(name, points=10) <= GRAD_TOL


def test_matmul_shape_error_names_both_operands():
    tape = dc.Tape()
    a = tape.param("left", np.zeros((2, 3)))
    b = tape.param("right", np.zeros((4, 5)))
    with pytest.raises(dc.ShapeError, match="left.*right"):
        dc.matmul(a, b)


def test_broadcast_error_is_shape_error():
    tape = dc.Tape()
    with pytest.raises(dc.ShapeError):
        dc.add(tape.param("a", np.zeros(3)), tape.param("b", np.zeros(4)))


def test_non_finite_output_names_the_node():
    tape = dc.Tape()
    a = tape.param("a", np.array([-1.0, 2.0]))
    with pytest.raises(dc.NonFiniteError, match="log"):
        dc.log(a)


def test_non_finite_leaf_rejected():
    with pytest.raises(dc.NonFiniteError):
        dc.Tape().param("a", np.array([np.nan]))


def test_check_finite_can_be_disabled():
    tape = dc.Tape(check_finite=False)
    out = dc.log(tape.param("a", np.array([-1.0])))
    assert np.isnan(out.value).all()


def test_backward_requires_scalar():
    tape = dc.Tape()
    a = tape.param("a", np.ones(3))
    with pytest.raises(dc.ShapeError):
        tape.backward(dc.scale(a, 2.0))


def test_unused_parameter_gets_zero_gradient():
    def fn(tape, p):
        return dc.sumsq(p["used"])

    _, grads = dc.value_and_grad(fn, {"used": np.ones(2), "unused": np.ones((2, 2))})
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads["used"], 2 * np.ones(2))


def test_gradient_accumulates_over_reuse():
    # f = x*x + x  ->  f' = 2x + 1
    def fn(tape, p):
        x = p["x"]
        return dc.sum(dc.add(dc.mul(x, x), x))

    _, g = dc.value_and_grad(fn, {"x": np.array([3.0])})
    assert g["x"][0] == 7.0


def test_duplicate_parameter_name_rejected():
    tape = dc.Tape()
    tape.param("w", np.ones(1))
    with pytest.raises(KeyError):
        tape.param("w", np.ones(1))


def test_tensor_from_other_tape_rejected():
    a = dc.Tape().param("a", np.ones(2))
    b = dc.Tape().param("b", np.ones(2))
    with pytest.raises(ValueError, match="another tape"):
        dc.add(a, b)


def test_gather_out_of_range():
    tape = dc.Tape()
    with pytest.raises(IndexError):
        dc.gather(tape.param("t", np.zeros((3, 2))), [3])


def test_operator_overloads_match_functions():
    def fn(tape, p):
        a, b = p["a"], p["b"]
        return dc.sum((a + b) * a - b / 2.0 + (-a) @ dc.swap_last(b) * 0.0)

    _, g = dc.value_and_grad(fn, {"a": np.ones((2, 2)), "b": np.full((2, 2), 2.0)})
    # d/da (a+b)a = 2a + b ; d/db = a - 1/2
    np.testing.assert_allclose(g["a"], np.full((2, 2), 4.0))
    np.testing.assert_allclose(g["b"], np.full((2, 2), 0.5))


def test_softmax_matches_brute_force_and_masks():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5))
    mask = np.array([True, False, True, True, False])
    tape = dc.Tape()
    out = dc.softmax(tape.constant(x), mask=mask).value
    np.testing.assert_allclose(out, brute_force_softmax(x, mask), rtol=1e-12)
    assert np.all(out[..., ~mask] == 0)


def test_softmax_is_stable_for_large_logits():
    tape = dc.Tape()
    out = dc.softmax(tape.constant(np.array([1000.0, 1000.0, -1000.0]))).value
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_log_sigmoid_is_stable():
    tape = dc.Tape()
    out = dc.log_sigmoid(tape.constant(np.array([-800.0, 0.0, 800.0]))).value
    np.testing.assert_allclose(out, [-800.0, -np.log(2.0), 0.0])


def test_dropout_mask_properties():
    m = dc.dropout_mask((200, 200), 0.25, seed=1)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert abs((m == 0).mean() - 0.25) < 0.01
    np.testing.assert_array_equal(m, dc.dropout_mask((200, 200), 0.25, seed=1))
    np.testing.assert_array_equal(dc.dropout_mask((3,), 0.0, seed=1), np.ones(3))
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            dc.dropout_mask((3,), bad, seed=0)


def test_dropout_none_is_identity():
    tape = dc.Tape()
    a = tape.param("a", np.ones(3))
    assert dc.dropout(a, None) is a


def test_forward_and_backward_are_deterministic():
    make, build = OP_CASES["layer_norm"]
    params = make(np.random.default_rng(5))

    def fn(tape, p):
        return _weighted(tape, build(tape, p))

    first = dc.value_and_grad(fn, params)
    second = dc.value_and_grad(fn, params)
    assert first[0] == second[0]
    for k in params:
        np.testing.assert_array_equal(first[1][k], second[1][k])


def test_topological_order_is_insertion_order():
    tape = dc.Tape()
    a = tape.param("a", np.ones(2))
    b = dc.exp(a)
    c = dc.add(a, b)
    for node in tape.nodes:
        assert all(p.index < node.index for p in node.parents)
    assert [n.index for n in tape.nodes] == list(range(len(tape.nodes)))
    assert c.index == len(tape.nodes) - 1


finite = st.floats(-10, 10, allow_nan=False, width=64)
vec = hnp.arrays(np.float64, st.integers(1, 6), elements=finite)


@settings(max_examples=60, deadline=None)
@given(vec, st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_the_output(x, alpha, beta):
    """grad(alpha*f + beta*g) == alpha*grad f + beta*grad g."""
    def f(tape, p):
        return dc.sum(dc.sigmoid(p["x"]))

    def g(tape, p):
        return dc.sumsq(p["x"])

    def combo(tape, p):
        return dc.add(dc.scale(f(tape, p), alpha), dc.scale(g(tape, p), beta))

    _, gf = dc.value_and_grad(f, {"x": x})
    _, gg = dc.value_and_grad(g, {"x": x})
    _, gc = dc.value_and_grad(combo, {"x": x})
    np.testing.assert_allclose(gc["x"], alpha * gf["x"] + beta * gg["x"], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec)
def test_softmax_rows_sum_to_one(x):
    out = dc.softmax(dc.Tape().constant(x)).value
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_layer_norm_output_is_normalised(x):
    out = dc.layer_norm(dc.Tape().constant(x), np.ones(4), np.zeros(4)).value
    var = x.var(axis=-1)
    ok = var > 1e-3
    np.testing.assert_allclose(out[ok].mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out[ok].var(axis=-1), var[ok] / (var[ok] + 1e-5), rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=finite),
       hnp.arrays(np.int64, st.integers(1, 8), elements=st.integers(0, 3)))
def test_gather_gradient_counts_repeats(table, idx):
    def fn(tape, p):
        return dc.sum(dc.gather(p["t"], idx))

    _, g = dc.value_and_grad(fn, {"t": table})
    counts = np.bincount(idx, minlength=4)
    np.testing.assert_array_equal(g["t"], np.repeat(counts[:, None], 3, axis=1).astype(float))
