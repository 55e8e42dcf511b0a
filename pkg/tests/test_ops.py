import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from himosa import ops
from himosa import tensor as T
from himosa.errors import ContractError, DimensionError
from himosa.oracle import naive_avg_pool_oracle, naive_conv_oracle
from himosa.tensor import Tensor


def _int_array(rng, *shape):
    return rng.integers(-4, 5, size=shape).astype(np.float64)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_equals_loop_oracle_exactly_on_integers(k):
    rng = np.random.default_rng(k)
    x, w, b = _int_array(rng, 3, 5, 6), _int_array(rng, 4, 3, k, k), _int_array(rng, 4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_array_equal(got, naive_conv_oracle(x, w, b))


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 4, 4))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


def test_depthwise_matches_block_diagonal_conv():
    rng = np.random.default_rng(1)
    x, w = _int_array(rng, 3, 4, 5), _int_array(rng, 3, 1, 3, 3)
    full = np.zeros((3, 3, 3, 3))
    for c in range(3):
        full[c, c] = w[c, 0]
    np.testing.assert_array_equal(ops.depthwise_conv2d(Tensor(x), Tensor(w)).data, naive_conv_oracle(x, full))


def test_global_avg_pool_exact_on_integers():
    x = _int_array(np.random.default_rng(2), 4, 4, 4)
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(x)).data, naive_avg_pool_oracle(x))


def test_pixel_shuffle_index_formula():
    r, C, H, W = 3, 2, 2, 3
    x = np.arange(C * r * r * H * W, dtype=float).reshape(C * r * r, H, W)
    y = ops.pixel_shuffle(Tensor(x), r).data
    assert y.shape == (C, H * r, W * r)
    for c in range(C):
        for h in range(H):
            for w in range(W):
                for i in range(r):
                    for j in range(r):
                        assert y[c, h * r + i, w * r + j] == x[c * r * r + i * r + j, h, w]


def test_pixel_shuffle_bad_channels():
    with pytest.raises(DimensionError):
        ops.pixel_shuffle(Tensor(np.ones((5, 2, 2))), 2)


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), gh=st.integers(1, 3), gw=st.integers(1, 3), ws=st.integers(1, 4))
def test_window_roundtrip_is_exact(c, gh, gw, ws):
    x = np.random.default_rng(0).standard_normal((c, gh * ws, gw * ws))
    win, layout = ops.window_partition(Tensor(x), ws)
    assert win.shape == (gh * gw, ws * ws, c)
    np.testing.assert_array_equal(ops.window_merge(win, layout).data, x)


def test_window_partition_is_row_major():
    x = np.arange(16.0).reshape(1, 4, 4)
    win, _ = ops.window_partition(Tensor(x), 2)
    np.testing.assert_array_equal(win.data[:, :, 0], [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_window_partition_rejects_non_multiple():
    with pytest.raises(DimensionError):
        ops.window_partition(Tensor(np.ones((1, 5, 4))), 2)


def test_reflect_pad_bottom_right():
    x = np.arange(6.0).reshape(1, 2, 3)
    p = ops.reflect_pad(x, 1, 2)
    np.testing.assert_array_equal(p[0], [[0, 1, 2, 1, 0], [3, 4, 5, 4, 3], [0, 1, 2, 1, 0]])


def test_topk_tie_break_lowest_index_first():
    scores = np.array([[0.5], [0.9], [0.5], [0.9], [0.1]])
    np.testing.assert_array_equal(ops.topk_select(scores, 3), [[1, 3, 0]])
    np.testing.assert_array_equal(ops.topk_select(scores[:, 0], 3), [1, 3, 0])


def test_topk_per_expert_columns():
    scores = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.5]])
    np.testing.assert_array_equal(ops.topk_select(scores, 2), [[1, 2], [0, 2]])


def test_topk_bounds():
    with pytest.raises(ContractError):
        ops.topk_select(np.zeros((4, 1)), 5)
    with pytest.raises(ContractError):
        ops.topk_select(np.zeros((4, 1)), 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.data())
def test_topk_matches_sorted_definition(vals, data):
    k = data.draw(st.integers(1, len(vals)))
    scores = np.array(vals, dtype=float)[:, None]
    want = sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]
    assert ops.topk_select(scores[:, 0], k).tolist() == want


def test_gather_rows_bounds():
    with pytest.raises(ContractError):
        ops.gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


def test_scatter_add_accumulates_duplicates():
    acc = Tensor(np.zeros((3, 1)))
    out = ops.scatter_add_rows(acc, np.array([1, 1]), Tensor(np.array([[2.0], [3.0]])))
    np.testing.assert_array_equal(out.data[:, 0], [0, 5, 0])


def test_layer_norm_zero_mean_unit_var():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 16)) * 3 + 2)
    y = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-6)


def test_sparse_attention_single_token_is_value_projection():
    rng = np.random.default_rng(0)
    tokens = Tensor(rng.standard_normal((1, 5, 3)))
    wq, wk, wv = (Tensor(rng.standard_normal((2, 3, 4))) for _ in range(3))
    wo = Tensor(rng.standard_normal((2, 4, 3)))
    idx = np.array([[[2], [4]]])
    gates = Tensor(np.array([[[0.25], [0.5]]]))
    out = ops.sparse_window_attention(tokens, idx, gates, wq, wk, wv, wo).data[0]
    x = tokens.data[0]
    want = np.zeros((5, 3))
    want[2] = 0.25 * x[2] @ wv.data[0] @ wo.data[0]
    want[4] = 0.5 * x[4] @ wv.data[1] @ wo.data[1]
    np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-14)


def test_sparse_attention_rejects_bad_weights():
    with pytest.raises(DimensionError):
        ops.sparse_window_attention(Tensor(np.ones((1, 4, 3))), np.zeros((1, 2, 1), dtype=np.int64), None,
                                    Tensor(np.ones((2, 5, 4))), Tensor(np.ones((2, 3, 4))),
                                    Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 3))))


def test_ops_respect_no_grad():
    x = Tensor(np.ones((2, 3, 3)), requires_grad=True)
    with T.no_grad():
        y = ops.conv2d(x, Tensor(np.ones((1, 2, 3, 3)), requires_grad=True))
    assert not y.requires_grad


def test_sparse_attention_rejects_duplicate_selection():
    w = Tensor(np.ones((1, 3, 2)))
    with pytest.raises(ContractError):
        ops.sparse_window_attention(Tensor(np.ones((1, 4, 3))), np.array([[[1, 1]]]), None,
                                    w, w, w, Tensor(np.ones((1, 2, 3))))
