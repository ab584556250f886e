"""Tensor primitives: forward values, gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upmoe import autograd as ag
from upmoe.autograd import Tensor

from oracles import check_gradients, rel_err

F64 = np.float64


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=F64)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(ag.matmul(a, eye).data, a.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(ag.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    check_gradients(lambda: ag.matmul(a, b).sum(), [a, b])


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = _param(rng, 2, 3, 4), _param(rng, 2, 4, 2)
    check_gradients(lambda: ag.matmul(a, b).sum(), [a, b])


def test_softmax_symmetry():
    y = ag.softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_allclose(y, [0.5, 0.5], atol=1e-7)


def test_softmax_extreme_logits_stable():
    y = ag.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-6)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = _param(rng, 5)
    w = Tensor(rng.standard_normal(5), dtype=F64)
    check_gradients(lambda: ag.mul(ag.softmax(x), w).sum(), [x])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-50, 50), min_size=2, max_size=6),
        min_size=1,
        max_size=4,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_sum_to_one(rows):
    y = ag.softmax(Tensor(np.array(rows, dtype=np.float32))).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 7)).astype(np.float32))
    ls = ag.log_softmax(x).data
    np.testing.assert_allclose(ls, np.log(ag.softmax(x).data), atol=1e-5)


def test_log_softmax_gradient():
    rng = np.random.default_rng(4)
    x = _param(rng, 3, 5)
    w = Tensor(rng.standard_normal((3, 5)), dtype=F64)
    check_gradients(lambda: ag.mul(ag.log_softmax(x), w).sum(), [x])


def test_topk_tie_break_ascending_index():
    values, idx = ag.topk(Tensor([0.0, 0.0, 0.0, 0.0]), 2)
    np.testing.assert_array_equal(values.data, [0.0, 0.0])
    np.testing.assert_array_equal(idx, [0, 1])


def test_topk_sorted_descending():
    values, idx = ag.topk(Tensor([1.0, 3.0, 2.0]), 2)
    np.testing.assert_array_equal(values.data, [3.0, 2.0])
    np.testing.assert_array_equal(idx, [1, 2])


def test_topk_k_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ag.topk(Tensor([1.0, 2.0]), 3)
    with pytest.raises(ValueError, match="out of range"):
        ag.topk(Tensor([1.0, 2.0]), 0)


def test_topk_gradient_away_from_ties():
    # pairwise gaps >= 1e-2 so h=1e-3 perturbations cannot flip the selection
    x = Tensor(np.array([0.40, -0.20, 0.10, 0.25, -0.05]), requires_grad=True, dtype=F64)
    gaps = np.abs(np.subtract.outer(x.data, x.data))
    assert gaps[np.triu_indices(5, k=1)].min() >= 1e-2
    check_gradients(lambda: ag.topk(x, 3)[0].sum(), [x])


def test_topk_scatters_gradient_to_selected_only():
    x = Tensor(np.array([1.0, 5.0, 3.0]), requires_grad=True, dtype=F64)
    ag.reset_graph()
    values, idx = ag.topk(x, 2)
    ag.backward(values.sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_relu():
    np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_layernorm_constant_vector_hits_eps_floor():
    gain = Tensor(np.full(4, 2.0))
    bias = Tensor(np.full(4, 0.5))
    y = ag.layernorm(Tensor(np.full(4, 3.0)), gain, bias).data
    np.testing.assert_allclose(y, np.full(4, 0.5), atol=1e-6)


def test_layernorm_gradient():
    rng = np.random.default_rng(5)
    x, gain, bias = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    w = Tensor(rng.standard_normal((3, 6)), dtype=F64)
    check_gradients(lambda: ag.mul(ag.layernorm(x, gain, bias), w).sum(), [x, gain, bias])


def test_add_mul_broadcast_gradients():
    rng = np.random.default_rng(6)
    x, b = _param(rng, 4, 3), _param(rng, 3)
    check_gradients(lambda: ag.mul(ag.add(x, b), b).sum(), [x, b])


def test_scale_and_mean_gradients():
    rng = np.random.default_rng(7)
    x = _param(rng, 5, 2)
    check_gradients(lambda: ag.scale(x.mean(axis=0).sum(), 3.0), [x])


def test_reshape_transpose_concat_gradients():
    rng = np.random.default_rng(8)
    x, y = _param(rng, 2, 6), _param(rng, 3, 4)

    def loss():
        a = ag.reshape(x, (3, 4))
        b = ag.transpose(y, (0, 1))
        c = ag.concat([a, b], axis=0)
        return ag.mul(c, c).sum()

    check_gradients(loss, [x, y])


def test_gather_scatter_gradients():
    rng = np.random.default_rng(9)
    x = _param(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])

    def loss():
        rows = ag.take_rows(x, idx)
        back = ag.scatter_rows(rows, idx, 5)
        pairs = ag.take_pairs(x, np.array([1, 3]), np.array([0, 2]))
        return ag.add(ag.mul(back, back).sum(), ag.mul(pairs, pairs).sum())

    check_gradients(loss, [x])


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    ag.reset_graph()
    y = ag.scale(x, 2.0)
    with pytest.raises(ag.GraphError, match="scalar"):
        ag.backward(y)


def test_backward_is_idempotent_per_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.reset_graph()
    loss = ag.mul(x, x).sum()
    ag.backward(loss)
    first = x.grad.copy()
    ag.backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    ag.reset_graph()
    with ag.no_grad():
        y = ag.scale(x, 2.0)
    assert len(ag.active_graph()) == 0
    assert not y.requires_grad


def test_shared_input_accumulates_both_paths():
    x = Tensor([3.0], requires_grad=True, dtype=F64)
    ag.reset_graph()
    loss = ag.mul(x, x).sum()  # d(x^2)/dx = 2x
    ag.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        ag.reset_graph()
        loss = ag.mul(ag.softmax(ag.matmul(x, w)), ag.relu(x)).sum()
        ag.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    la, xa, wa = run()
    lb, xb, wb = run()
    assert la.tobytes() == lb.tobytes()
    assert xa.tobytes() == xb.tobytes()
    assert wa.tobytes() == wb.tobytes()


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64


def test_two_block_toy_model_full_gradient_check():
    # small residual stack: two blocks of layernorm -> matmul -> relu -> matmul
    rng = np.random.default_rng(10)
    d = 4
    x = Tensor(rng.standard_normal((3, d)), dtype=F64)
    params = []
    for _ in range(2):
        params += [
            _param(rng, d) ,
            _param(rng, d),
            _param(rng, d, 2 * d),
            _param(rng, 2 * d, d),
        ]

    def loss():
        h = x
        for i in range(2):
            gain, bias, w1, w2 = params[4 * i : 4 * i + 4]
            z = ag.matmul(ag.relu(ag.matmul(ag.layernorm(h, gain, bias), w1)), w2)
            h = ag.add(h, z)
        return ag.mul(ag.softmax(h), h).sum()

    worst = check_gradients(loss, params)
    assert worst <= 1e-4
