import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlyproto import diffcore as dc
from earlyproto.diffcore import Tensor
from earlyproto.gradcheck import check, weighted_sum


def rnd(seed, *shape, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0, scale, size=shape))


def attn_params(seed, d):
    rng = np.random.default_rng(seed)
    p = {}
    for m in "qkvo":
        p["w" + m] = Tensor(rng.normal(0, 0.5, size=(d, d)))
        p["b" + m] = Tensor(rng.normal(0, 0.1, size=d))
    return p


# ------------------------------------------------------------------- linear

def test_linear_identity():
    x = Tensor([[1.0, 0.0], [0.0, 1.0]])
    y = dc.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [[1, 0], [0, 1]])


def test_linear_sum_plus_bias():
    y = dc.linear(Tensor([[2.0, 3.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(y.data, [[6.0]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        dc.linear(rnd(0, 3, 4), rnd(1, 5, 2), rnd(2, 2))


def test_linear_gradcheck_seed7():
    rng = np.random.default_rng(7)
    x, w, b = (Tensor(rng.normal(size=s)) for s in [(3, 4), (4, 2), (2,)])
    assert check(lambda x, w, b: dc.tsum(dc.linear(x, w, b)), [x, w, b]) < 1e-6


# ------------------------------------------------------------------ softmax

def test_softmax_uniform():
    np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_stable():
    y = dc.softmax(Tensor([1000.0, 0.0])).data
    assert y[0] == 1.0 and 0 <= y[1] < 1e-300 and np.all(np.isfinite(y))


def test_softmax_rejects_nan():
    with pytest.raises(dc.NumericError):
        dc.softmax(Tensor([np.nan, 0.0]))


def test_softmax_jacobian_seed3():
    x = rnd(3, 5)
    assert check(lambda x: weighted_sum(dc.softmax(x), 3), [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    y = dc.softmax(Tensor(np.array(xs))).data
    assert not np.any(np.isnan(y)) and np.all(y >= 0)
    assert abs(y.sum() - 1.0) <= 1e-12


# --------------------------------------------------------------- layer norm

def test_layer_norm_constant_slice():
    y = dc.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 0.0])


def test_layer_norm_already_normalised():
    y = dc.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    s = 1.0 / math.sqrt(1.0 + dc.LN_EPS)
    np.testing.assert_allclose(y, [s, -s], rtol=1e-15)


def test_layer_norm_gradcheck_seed11():
    x, g, b = rnd(11, 8), rnd(12, 8), rnd(13, 8)
    assert check(lambda x, g, b: weighted_sum(dc.layer_norm(x, g, b), 11), [x, g, b]) < 1e-6


# ---------------------------------------------------------------- attention

def brute_attention(x, p, n_heads):
    """Per-row attention over the prefix only; no mask needed."""
    T, D = x.shape
    dh = D // n_heads
    q = x @ p["wq"].data + p["bq"].data
    k = x @ p["wk"].data + p["bk"].data
    v = x @ p["wv"].data + p["bv"].data
    out = np.zeros((T, D))
    for t in range(T):
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = np.array([q[t, sl] @ k[j, sl] / math.sqrt(dh) for j in range(t + 1)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[t, sl] = sum(a[j] * v[j, sl] for j in range(t + 1))
    return out @ p["wo"].data + p["bo"].data


def test_mhsa_single_token_is_plain_attention():
    p = attn_params(0, 4)
    x = rnd(1, 1, 4)
    y = dc.causal_mhsa(x, p, 2).data
    # one token attends only to itself: output is its value projected
    v = x.data @ p["wv"].data + p["bv"].data
    np.testing.assert_allclose(y, v @ p["wo"].data + p["bo"].data, rtol=1e-12)


def test_mhsa_matches_prefix_oracle_seed5():
    p = attn_params(5, 4)
    x = rnd(5, 3, 4)
    np.testing.assert_allclose(dc.causal_mhsa(x, p, 1).data, brute_attention(x.data, p, 1), rtol=1e-12, atol=1e-14)


def test_mhsa_multihead_matches_oracle():
    p = attn_params(6, 8)
    x = rnd(6, 5, 8)
    np.testing.assert_allclose(dc.causal_mhsa(x, p, 4).data, brute_attention(x.data, p, 4), rtol=1e-12, atol=1e-14)


def test_mhsa_bad_heads():
    with pytest.raises(dc.ConfigError):
        dc.causal_mhsa(rnd(0, 2, 6), attn_params(0, 6), 4)


@pytest.mark.parametrize("seed", range(10))
def test_mhsa_causal_exact(seed):
    rng = np.random.default_rng(seed)
    T, D = 6, 8
    p = attn_params(seed, D)
    x = rng.normal(size=(T, D))
    t = int(rng.integers(0, T - 1))
    y0 = dc.causal_mhsa(Tensor(x), p, 2).data
    x2 = x.copy()
    x2[t + 1:] += rng.normal(scale=10.0, size=x2[t + 1:].shape)
    y1 = dc.causal_mhsa(Tensor(x2), p, 2).data
    assert np.array_equal(y0[: t + 1], y1[: t + 1])


def test_mhsa_gradcheck():
    p = attn_params(4, 4)
    x = rnd(4, 3, 4)
    names = list(p)
    ins = [x] + [p[n] for n in names]

    def fn(x, *ws):
        return weighted_sum(dc.causal_mhsa(x, dict(zip(names, ws)), 2), 4)

    assert check(fn, ins) < 1e-6


# ------------------------------------------------------------- l2 similarity

def test_neg_l2_345():
    s = dc.neg_l2_scores(Tensor([0.0, 0.0]), Tensor([[3.0, 4.0], [0.0, 1.0]])).data
    np.testing.assert_array_equal(s, [-5.0, -1.0])


def test_neg_l2_zero_distance_is_max():
    b = rnd(1, 4, 3)
    s = dc.neg_l2_scores(Tensor(b.data[2].copy()), b).data
    assert s[2] == 0.0 and np.argmax(s) == 2 and np.sum(s == 0) == 1


def test_neg_l2_zero_distance_gradient_is_zero():
    b = rnd(1, 2, 3)
    a = Tensor(b.data[0].copy(), requires_grad=True)
    b.requires_grad = True
    dc.backward(dc.tsum(dc.neg_l2_scores(a, b)[0:1]))
    assert np.all(a.grad == 0) and np.all(b.grad == 0)


def test_neg_l2_gradcheck_seed9():
    a, b = rnd(9, 6), rnd(10, 4, 6)
    assert check(lambda a, b: weighted_sum(dc.neg_l2_scores(a, b), 9), [a, b]) < 1e-6


def test_neg_l2_batched_gradcheck():
    a, b = rnd(9, 2, 3, 6), rnd(10, 4, 6)
    assert check(lambda a, b: weighted_sum(dc.neg_l2_scores(a, b), 9), [a, b]) < 1e-6


# ------------------------------------------------------------- cross entropy

def test_ce_uniform():
    assert dc.cross_entropy_smoothed(Tensor(np.zeros(4)), 2, 0.0).item() == pytest.approx(math.log(4), abs=1e-12)
    assert abs(dc.cross_entropy_smoothed(Tensor(np.zeros(4)), 2, 0.0).item() - 1.386294) < 1e-6


def test_ce_confident():
    logits = Tensor(np.eye(4)[1] * 1e6)
    assert dc.cross_entropy_smoothed(logits, 1, 0.0).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        dc.cross_entropy_smoothed(Tensor(np.zeros(3)), 3, 0.0)


def test_ce_smoothing_definition():
    x = rnd(2, 5)
    eps = 0.1
    logp = x.data - np.log(np.exp(x.data).sum())
    q = np.full(5, eps / 5)
    q[3] += 1 - eps
    assert dc.cross_entropy_smoothed(x, 3, eps).item() == pytest.approx(-(q * logp).sum(), abs=1e-14)


def test_ce_gradcheck_seed2():
    x = rnd(2, 5)
    assert check(lambda x: dc.cross_entropy_smoothed(x, 1, 0.1), [x]) < 1e-6


# --------------------------------------------------------------- stop-grad

def test_stop_grad_forward_identity_and_blocks():
    a = rnd(0, 3)
    a.requires_grad = True
    b = rnd(1, 3)
    b.requires_grad = True
    s = dc.stop_grad(a)
    assert np.array_equal(s.data, a.data)
    dc.backward(dc.tsum(dc.mul(s, b)) + dc.tsum(b))
    assert a.grad is None
    np.testing.assert_allclose(b.grad, a.data + 1)


# -------------------------------------------------------- structural pieces

@pytest.mark.parametrize("seed", range(10))
def test_all_primitives_gradcheck(seed):
    rng = np.random.default_rng(seed)
    T = lambda *s: Tensor(rng.normal(size=s))
    a, b = T(2, 3), T(2, 3)
    assert check(lambda a, b: weighted_sum(dc.mul(a, b) + a - b, seed), [a, b]) < 1e-4
    assert check(lambda a: weighted_sum(dc.gelu(a), seed), [a]) < 1e-4
    assert check(lambda a: weighted_sum(dc.log_softmax(a), seed), [a]) < 1e-4
    assert check(lambda a, b: dc.mse(a, b), [a, b]) < 1e-4
    x, w = T(2, 3, 4), T(4, 5)
    assert check(lambda x, w: weighted_sum(dc.matmul(x, w), seed), [x, w]) < 1e-4
    assert check(lambda x: weighted_sum(dc.swapaxes(x, -1, -2).reshape(2, 12)[..., 1:5], seed), [x]) < 1e-4
    assert check(lambda x: dc.tmean(x, axis=(0, 2)).sum(), [x]) < 1e-4
