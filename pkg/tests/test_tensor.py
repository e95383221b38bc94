import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from treeattn import opcount
from treeattn.errors import ContractError, DimensionError, NumericError
from treeattn.oracles import matmul as loop_matmul, softmax_row
from treeattn.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    div,
    dropout,
    embedding,
    exp,
    finite_diff_check,
    layer_norm,
    log,
    log_softmax,
    masked_softmax_rows,
    matmul,
    mean,
    mul,
    record_op,
    relu,
    reshape,
    scatter_rows,
    sinusoidal_positions,
    softmax,
    sub,
    sum_,
    swap_last,
    take,
    tanh,
    transpose,
)


def param(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def test_outside_tape_records_nothing(rng):
    x = param(rng, 3)
    y = mul(x, x)
    assert not y.requires_grad
    assert y._tape is None


def test_backward_simple_square(rng):
    x = param(rng, 4)
    with Tape() as tape:
        loss = sum_(mul(x, x))
    g = tape.backward(loss, [x])
    np.testing.assert_allclose(g[x], 2 * x.data)
    assert x.grad is g[x]


def test_module_backward_uses_recording_tape(rng):
    x = param(rng, 2)
    with Tape():
        loss = sum_(exp(x))
    np.testing.assert_allclose(backward(loss)[x], np.exp(x.data))


def test_unused_parameter_gets_zero_gradient(rng):
    x, unused = param(rng, 3), param(rng, 2, 2)
    with Tape() as tape:
        loss = sum_(x)
    g = tape.backward(loss, [x, unused])
    assert np.array_equal(g[unused], np.zeros((2, 2)))


def test_gradient_accumulates_over_reuse(rng):
    x = param(rng, 3)
    with Tape() as tape:
        loss = sum_(add(mul(x, 2.0), mul(x, x)))
    np.testing.assert_allclose(tape.backward(loss, [x])[x], 2.0 + 2 * x.data)


def test_backward_needs_scalar(rng):
    x = param(rng, 3)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_without_tape_is_contract_error(rng):
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(1)))


def test_record_op_custom_primitive(rng):
    x = param(rng, 5)
    with Tape() as tape:
        y = record_op(np.cumsum(x.data), (x,), lambda g: (np.cumsum(g[::-1])[::-1],))
        loss = sum_(mul(y, y))
    g = tape.backward(loss, [x])[x]
    expect = np.cumsum((2 * np.cumsum(x.data))[::-1])[::-1]
    np.testing.assert_allclose(g, expect)


def test_matmul_worked_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(p=st.integers(1, 5), q=st.integers(1, 5), r=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_matmul_matches_loop_oracle(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(p, q)), g.normal(size=(q, r))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)


def test_matmul_counts_multiply_adds():
    with opcount.counting() as c:
        matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert c["madd"] == 3 * 4 * 5


def test_nested_counters_merge_into_parent():
    with opcount.counting() as outer:
        with opcount.counting() as inner:
            add(Tensor(np.ones(4)), Tensor(np.ones(4)))
        assert inner["add"] == 4
    assert outer["add"] == 4


def test_softmax_uniform_and_masked():
    out = masked_softmax_rows(Tensor(np.zeros((1, 4))), np.array([[True, True, False, True]]))
    np.testing.assert_array_equal(out.data, [[1 / 3, 1 / 3, 0.0, 1 / 3]])


def test_softmax_masked_entries_exactly_zero_even_with_huge_logits():
    a = Tensor(np.array([[1e4, 0.0, -3.0]]))
    out = masked_softmax_rows(a, np.array([[False, True, True]]))
    assert out.data[0, 0] == 0.0
    assert abs(out.data.sum() - 1) < 1e-15


def test_softmax_all_masked_row_is_zero(caplog):
    out = masked_softmax_rows(Tensor(np.ones((2, 3))), np.array([[False] * 3, [True] * 3]))
    assert np.array_equal(out.data[0], np.zeros(3))
    assert "all-masked" in caplog.text


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        softmax(Tensor(np.array([[np.nan, 1.0]])))


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.integers(0, 2**16))
def test_softmax_matches_row_oracle(a, seed):
    mask = np.random.default_rng(seed).random(a.shape) < 0.7
    mask[:, 0] = True
    out = masked_softmax_rows(Tensor(a), mask).data
    for i in range(3):
        np.testing.assert_allclose(out[i], softmax_row(list(a[i]), list(mask[i])), atol=1e-12)
    assert np.all(out[~mask] == 0.0)


def test_layer_norm_constant_row_maps_to_bias():
    x = Tensor(np.full((1, 4), 5.0))
    out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.arange(4.0)))
    np.testing.assert_allclose(out.data, [[0.0, 1.0, 2.0, 3.0]])


def test_layer_norm_zero_mean_unit_variance(rng):
    x = Tensor(rng.normal(3.0, 7.0, size=(5, 16)))
    out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


def test_layer_norm_dimension_check():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


UNARY = {
    "exp": exp,
    "log": lambda x: log(add(mul(x, x), 1.0)),
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "transpose": transpose,
    "swap_last": swap_last,
    "reshape": lambda x: reshape(x, (-1,)),
    "mean_axis": lambda x: mean(x, axis=1),
    "sum_keep": lambda x: sum_(x, axis=0, keepdims=True),
    "div": lambda x: div(x, add(mul(x, x), 2.0)),
    "sub": lambda x: sub(1.0, x),
    "take": lambda x: take(x, [2, 0, 0], axis=0),
    "take_cols": lambda x: take(x, [1, 3], axis=1),
    "scatter": lambda x: scatter_rows(x, [1, 1, 4], 5),
    "concat": lambda x: concat([x, mul(x, x)], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = param(rng, 3, 4)
    w = Tensor(rng.normal(size=UNARY[name](x).shape))
    err = finite_diff_check(lambda: sum_(mul(UNARY[name](x), w)), [x])
    assert err < 1e-7


def test_binary_broadcast_gradients(rng):
    a, b = param(rng, 3, 4), param(rng, 4)
    err = finite_diff_check(lambda: sum_(mul(add(a, b), div(a, add(mul(b, b), 1.0)))), [a, b])
    assert err < 1e-7


def test_matmul_batched_gradients(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    assert finite_diff_check(lambda: sum_(mul(matmul(a, b), w)), [a, b]) < 1e-7


def test_layer_norm_gradients(rng):
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    w = Tensor(rng.normal(size=(3, 6)))
    assert finite_diff_check(lambda: sum_(mul(layer_norm(x, g, b), w)), [x, g, b]) < 1e-6


def test_masked_softmax_gradients(rng):
    x = param(rng, 4, 5)
    mask = rng.random((4, 5)) < 0.6
    mask[:, 2] = True
    w = Tensor(rng.normal(size=(4, 5)))
    assert finite_diff_check(lambda: sum_(mul(masked_softmax_rows(x, mask), w)), [x]) < 1e-7


def test_cross_entropy_value_and_gradient(rng):
    logits = param(rng, 3, 4)
    y = [0, 3, 1]
    ce = cross_entropy(logits, y).item()
    lp = logits.data - np.log(np.exp(logits.data).sum(1, keepdims=True))
    assert ce == pytest.approx(-lp[np.arange(3), y].mean(), abs=1e-12)
    assert finite_diff_check(lambda: cross_entropy(logits, y), [logits]) < 1e-7


def test_embedding_gradient_scatters(rng):
    table = param(rng, 5, 3)
    with Tape() as tape:
        loss = sum_(embedding(table, [1, 1, 4]))
    g = tape.backward(loss, [table])[table]
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 0, 1])


def test_dropout_identity_in_eval_and_scaled_in_train(rng):
    x = Tensor(np.ones((100, 10)))
    assert dropout(x, 0.5, rng, training=False) is x
    y = dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    y2 = dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert np.array_equal(y, y2)


def test_sinusoidal_positions_first_row():
    p = sinusoidal_positions(3, 8).data
    np.testing.assert_array_equal(p[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_finite_diff_check_detects_wrong_rule(rng):
    x = param(rng, 4)
    bad = lambda: sum_(record_op(x.data**2, (x,), lambda g: (g * x.data,)))  # missing factor 2
    assert finite_diff_check(bad, [x]) > 0.1


def test_finite_diff_sampled_coordinates(rng):
    x = param(rng, 30, 30)
    assert finite_diff_check(lambda: sum_(mul(x, x)), [x], max_coords=200) < 1e-8


def test_cross_tape_use_is_rejected(rng):
    x = param(rng, 2)
    with Tape():
        y = mul(x, x)
    with Tape():
        with pytest.raises(ContractError):
            mul(y, y)


def test_matmul_identity_and_projector():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]])).data, [[5.0], [0.0]])


def test_softmax_small_rows():
    out = masked_softmax_rows(Tensor([[0.0, 9.0], [1.0, 2.0]]), np.array([[True, False], [True, True]]))
    np.testing.assert_array_equal(out.data[0], [1.0, 0.0])
    e = np.e
    out = masked_softmax_rows(Tensor([[1.0, 2.0, 5.0]]), np.array([[True, True, False]]))
    np.testing.assert_allclose(out.data[0], [1 / (1 + e), e / (1 + e), 0.0], atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([[7.5, 7.5, 7.5]])).data, [[1 / 3] * 3], atol=1e-15)


def test_layer_norm_two_point_row():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])


def test_finite_diff_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert finite_diff_check(lambda: sum_(mul(x, x)), [x]) < 1e-9
    c = Tensor([3.0])
    assert finite_diff_check(lambda: sum_(c), [x]) == 0.0
