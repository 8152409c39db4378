"""Math kernels against independent oracles: brute-force attention, analytic
rotations, and central finite differences for every gradient."""

import math

import numpy as np
import pytest

from emaseg.linalg import (Mlp, RopeParams, ShapeError, as_mat, as_vec,
                           attention, attention_backward, attention_forward,
                           attention_weights, init_mlp, layernorm_backward,
                           layernorm_forward, mlp_backward, mlp_forward,
                           rope_apply, rope_apply_rows, rope_backward_rows,
                           sgd_step, sigmoid, sincos_code, softmax)
from emaseg.rng import CounterRng


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1.0 / 3.0), atol=1e-15)


def test_softmax_saturation():
    out = softmax(np.array([1000.0, 0.0]))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_1_2_3():
    # oracle: direct exp/sum evaluation with math.exp on python floats
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    s = sum(e)
    expected = [v / s for v in e]
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), expected, atol=1e-5)
    np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_sums_to_one_and_permutation_equivariant():
    rng = CounterRng(101)
    for _ in range(200):
        x = rng.normal(7) * 10.0
        p = softmax(x)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0.0)
        perm = rng.shuffled(7)
        np.testing.assert_allclose(softmax(x[perm]), p[perm], atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax(np.array([1.0, np.nan]))
    with pytest.raises(ShapeError):
        softmax(np.array([]))


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------

def test_rope_identity_at_origin():
    rng = CounterRng(7)
    params = RopeParams(head_dim=8)
    v = rng.normal(8)
    np.testing.assert_array_equal(rope_apply(v, (0, 0), params), v)


def test_rope_basis_vector_row_rotation():
    # first channel pair belongs to the row axis at unit frequency, so
    # position (1, 0) rotates (1, 0) by exactly one radian
    params = RopeParams(head_dim=8, base=10000.0)
    e0 = np.zeros(8)
    e0[0] = 1.0
    out = rope_apply(e0, (1, 0), params)
    expected = np.zeros(8)
    expected[0] = math.cos(1.0)
    expected[1] = math.sin(1.0)
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_rope_is_isometry():
    rng = CounterRng(21)
    params = RopeParams(head_dim=16)
    for _ in range(100):
        v = rng.normal(16)
        pos = (int(rng.integers(0, 50, 1)[0]), int(rng.integers(0, 50, 1)[0]))
        out = rope_apply(v, pos, params)
        assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-12


def test_rope_angles_additive_per_axis():
    # rotating by p then q equals rotating by p+q componentwise
    rng = CounterRng(33)
    params = RopeParams(head_dim=12)
    v = rng.normal(12)
    via_two = rope_apply(rope_apply(v, (2, 5), params), (3, 1), params)
    direct = rope_apply(v, (5, 6), params)
    np.testing.assert_allclose(via_two, direct, atol=1e-12)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ShapeError):
        RopeParams(head_dim=6)


def test_rope_rows_skips_unpositioned():
    rng = CounterRng(70)
    params = RopeParams(head_dim=8)
    tokens = rng.normal((3, 8))
    out = rope_apply_rows(tokens, [(1, 2), None, (0, 3)], params)
    np.testing.assert_array_equal(out[1], tokens[1])
    assert not np.allclose(out[0], tokens[0])


def test_rope_backward_is_adjoint():
    # <R x, y> == <x, R^T y> for random x, y
    rng = CounterRng(71)
    params = RopeParams(head_dim=8)
    positions = [(2, 3), None, (7, 1)]
    x = rng.normal((3, 8))
    y = rng.normal((3, 8))
    lhs = np.sum(rope_apply_rows(x, positions, params) * y)
    rhs = np.sum(x * rope_backward_rows(y, positions, params))
    assert abs(lhs - rhs) < 1e-10


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def oracle_attention(q, k, v, scale):
    """Two-loop softmax-weighted sum, independent of the vectorized path."""
    nq, nk = q.shape[0], k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = [scale * sum(q[i][t] * k[j][t] for t in range(q.shape[1]))
                  for j in range(nk)]
        m = max(logits)
        weights = [math.exp(l - m) for l in logits]
        z = sum(weights)
        for j in range(nk):
            out[i] += (weights[j] / z) * v[j]
    return out


def test_attention_single_key_returns_value():
    rng = CounterRng(40)
    q = rng.normal((4, 8))
    k = rng.normal((1, 8))
    v = rng.normal((1, 8))
    out = attention(q, k, v, 0.5)
    for i in range(4):
        np.testing.assert_allclose(out[i], v[0], atol=1e-15)


def test_attention_identical_keys_average_values():
    rng = CounterRng(41)
    q = rng.normal((3, 8))
    k = np.tile(rng.normal(8), (5, 1))
    v = rng.normal((5, 8))
    out = attention(q, k, v, 1.0)
    for i in range(3):
        np.testing.assert_allclose(out[i], v.mean(axis=0), atol=1e-12)


def test_attention_matches_oracle_5x8():
    rng = CounterRng(42)
    q = rng.normal((5, 8))
    k = rng.normal((7, 8))
    v = rng.normal((7, 8))
    np.testing.assert_allclose(attention(q, k, v, 0.35),
                               oracle_attention(q, k, v, 0.35), atol=1e-10)


def test_attention_matches_oracle_1000_random_cases():
    rng = CounterRng(43)
    for _ in range(1000):
        nq = int(rng.integers(1, 17, 1)[0])
        nk = int(rng.integers(1, 17, 1)[0])
        d = int(rng.integers(1, 9, 1)[0])
        dv = int(rng.integers(1, 9, 1)[0])
        scale = float(rng.uniform(1)[0]) * 2.0
        q = rng.normal((nq, d))
        k = rng.normal((nk, d))
        v = rng.normal((nk, dv))
        np.testing.assert_allclose(attention(q, k, v, scale),
                                   oracle_attention(q, k, v, scale), atol=1e-10)


def test_attention_weights_rows_sum_to_one():
    rng = CounterRng(44)
    w = attention_weights(rng.normal((6, 8)), rng.normal((9, 8)), 0.7)
    np.testing.assert_allclose(w.sum(axis=1), np.ones(6), atol=1e-12)


def test_attention_shape_errors():
    rng = CounterRng(45)
    with pytest.raises(ShapeError):
        attention(rng.normal((2, 4)), rng.normal((3, 5)), rng.normal((3, 4)), 1.0)
    with pytest.raises(ShapeError):
        attention(rng.normal((2, 4)), rng.normal((3, 4)), rng.normal((2, 4)), 1.0)


def test_attention_backward_matches_finite_differences():
    rng = CounterRng(46)
    q = rng.normal((3, 6))
    k = rng.normal((4, 6))
    v = rng.normal((4, 5))
    w = rng.normal((3, 5))  # projection making a scalar loss
    scale = 0.6

    def loss(qq, kk, vv):
        return float(np.sum(attention(qq, kk, vv, scale) * w))

    out, cache = attention_forward(q, k, v, scale)
    dq, dk, dv = attention_backward(cache, w)
    h = 1e-6
    for arr, grad in ((q, dq), (k, dk), (v, dv)):
        flat = arr.reshape(-1)
        for idx in range(0, flat.size, 3):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss(q, k, v)
            flat[idx] = orig - h
            down = loss(q, k, v)
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - grad.reshape(-1)[idx]) < 1e-6


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layernorm_backward_matches_finite_differences():
    rng = CounterRng(47)
    x = rng.normal((4, 6)) * 2.0
    gamma = rng.normal(6) * 0.5 + 1.0
    beta = rng.normal(6) * 0.1
    up = rng.normal((4, 6))

    def loss(xx, gg, bb):
        out, _ = layernorm_forward(xx, gg, bb)
        return float(np.sum(out * up))

    out, cache = layernorm_forward(x, gamma, beta)
    dx, dg, db = layernorm_backward(cache, up)
    h = 1e-6
    for arr, grad in ((x, dx), (gamma, dg), (beta, db)):
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            upv = loss(x, gamma, beta)
            flat[idx] = orig - h
            downv = loss(x, gamma, beta)
            flat[idx] = orig
            fd = (upv - downv) / (2 * h)
            assert abs(fd - grad.reshape(-1)[idx]) < 1e-5


# ---------------------------------------------------------------------------
# MLP forward / backward
# ---------------------------------------------------------------------------

def test_mlp_zero_weights_sigmoid_gives_half():
    m = Mlp(w1=np.zeros((4, 3)), b1=np.zeros(4),
            w2=np.zeros((2, 4)), b2=np.zeros(2), out_act="sigmoid")
    y, _ = mlp_forward(m, np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(y, [0.5, 0.5], atol=1e-15)


def test_mlp_identity_weights_relu_clamp():
    m = Mlp(w1=np.eye(2), b1=np.zeros(2), w2=np.eye(2), b2=np.zeros(2))
    y, _ = mlp_forward(m, np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])


def test_mlp_forward_matches_independent_reevaluation():
    rng = CounterRng(50)
    m = init_mlp(rng, 5, 7, 3, out_act="sigmoid")
    x = rng.normal(5)
    y, _ = mlp_forward(m, x)
    # oracle: python-loop re-evaluation with math.exp
    hidden = []
    for i in range(7):
        z = sum(m.w1[i][j] * x[j] for j in range(5)) + m.b1[i]
        hidden.append(max(z, 0.0))
    expected = []
    for i in range(3):
        z = sum(m.w2[i][j] * hidden[j] for j in range(7)) + m.b2[i]
        expected.append(1.0 / (1.0 + math.exp(-z)))
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_mlp_backward_zero_upstream():
    rng = CounterRng(51)
    m = init_mlp(rng, 3, 4, 2)
    _, cache = mlp_forward(m, rng.normal(3))
    g = mlp_backward(m, cache, np.zeros(2))
    for arr in (g.dw1, g.db1, g.dw2, g.db2, g.dx):
        assert not np.any(arr)


def test_mlp_backward_linear_case():
    # 1-unit linear network, loss = y: dL/dw1 has x on its active row
    m = Mlp(w1=np.array([[2.0]]), b1=np.zeros(1),
            w2=np.array([[1.0]]), b2=np.zeros(1))
    x = np.array([3.0])
    _, cache = mlp_forward(m, x)
    g = mlp_backward(m, cache, np.array([1.0]))
    np.testing.assert_allclose(g.dw1, [[3.0]])
    np.testing.assert_allclose(g.dw2, [[6.0]])


def _mlp_param_views(m):
    return {"w1": m.w1, "b1": m.b1, "w2": m.w2, "b2": m.b2}


def _bce(y, t):
    eps = 1e-12
    return float(-(t * math.log(y + eps) + (1 - t) * math.log(1 - y + eps)))


def test_mlp_backward_matches_finite_differences_bce():
    # 4 -> 8 -> 1 sigmoid net under BCE, central differences step 1e-5
    rng = CounterRng(52)
    failures = 0
    for trial in range(100):
        m = init_mlp(rng, 4, 8, 1, out_act="sigmoid")
        x = rng.normal(4)
        target = float(rng.uniform(1)[0] > 0.5)

        def loss():
            y, _ = mlp_forward(m, x)
            return _bce(float(y[0]), target)

        y, cache = mlp_forward(m, x)
        # dBCE/dy then chain through the net
        dy = np.array([(y[0] - target) / max(y[0] * (1 - y[0]), 1e-12)])
        grads = mlp_backward(m, cache, dy)
        analytic = {"w1": grads.dw1, "b1": grads.db1, "w2": grads.dw2, "b2": grads.db2}
        h = 1e-5
        for name, arr in _mlp_param_views(m).items():
            flat = arr.reshape(-1)
            idx = int(rng.integers(0, flat.size, 1)[0])
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss()
            flat[idx] = orig - h
            down = loss()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[idx]
            denom = max(abs(fd), abs(a), 1e-8)
            if abs(fd - a) / denom >= 1e-4:
                failures += 1
    assert failures == 0


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def test_sgd_zero_lr_no_change():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([5.0, -1.0])}
    out = sgd_step(p, g, 0.0)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_sgd_arithmetic():
    out = sgd_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, 0.5)
    np.testing.assert_allclose(out["p"], [0.0])


def test_sgd_quadratic_convergence():
    # loss (p-3)^2: p_k = 3 (1 - (1 - 2 lr)^k), monotone loss decrease
    params = {"p": np.array([0.0])}
    lr = 0.1
    losses = []
    for k in range(10):
        p = params["p"][0]
        losses.append((p - 3.0) ** 2)
        params = sgd_step(params, {"p": np.array([2.0 * (p - 3.0)])}, lr)
    closed_form = 3.0 * (1.0 - (1.0 - 2.0 * lr) ** 10)
    np.testing.assert_allclose(params["p"][0], closed_form, atol=1e-12)
    assert abs(params["p"][0] - 3.0) < 0.4
    assert all(losses[i + 1] < losses[i] for i in range(len(losses) - 1))


def test_sgd_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, 0.1)


# ---------------------------------------------------------------------------
# validators and small helpers
# ---------------------------------------------------------------------------

def test_as_vec_checks():
    with pytest.raises(ShapeError):
        as_vec(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        as_vec(np.array([1.0, np.inf]))
    with pytest.raises(ShapeError):
        as_vec(np.zeros(3), dim=4)


def test_as_mat_checks():
    with pytest.raises(ShapeError):
        as_mat(np.zeros(3))
    with pytest.raises(ShapeError):
        as_mat(np.zeros((2, 3)), rows=3)


def test_sigmoid_extremes_stable():
    assert sigmoid(np.array([800.0]))[0] == 1.0
    assert sigmoid(np.array([-800.0]))[0] == 0.0
    assert abs(sigmoid(np.array([0.0]))[0] - 0.5) < 1e-15


def test_sincos_code_structure():
    code = sincos_code(0.0, 0.0, 8)
    # zero coordinates: sines 0, cosines 1 in both halves
    np.testing.assert_allclose(code, [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-15)
    c2 = sincos_code(3.0, 0.0, 8)
    assert not np.allclose(c2[:4], code[:4])
    np.testing.assert_allclose(c2[4:], code[4:], atol=1e-15)
