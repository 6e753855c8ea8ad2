"""Network tests: loop-based forward oracle, structural properties, and the
finite-difference gradient check."""

import math

import numpy as np
import pytest

from fabsched import net
from fabsched.net import BLOCK_ORDER, LotBatch, init_params


def random_batch(rng, n, family_count):
    return LotBatch(
        x=rng.standard_normal((n, net.MODEL_DIM)),
        fam=rng.integers(0, family_count, size=n),
    )


# --- independent straight-line oracle (pure Python loops, no numpy algebra) ---


def loop_trunk(params, x_rows, fam):
    n = len(x_rows)
    d = net.MODEL_DIM
    h_dim = net.HEAD_DIM
    s = [[x_rows[i][j] + params.encoding[fam[i]][j] for j in range(d)] for i in range(n)]
    x = [[params.alpha * s[i][j] for j in range(d)] for i in range(n)]

    def mat(rows, w, cols):
        return [
            [sum(rows[i][k] * w[k][j] for k in range(len(rows[i]))) for j in range(cols)]
            for i in range(n)
        ]

    heads = []
    for q_w, k_w, v_w in ((params.q1, params.k1, params.v1), (params.q2, params.k2, params.v2)):
        q = mat(x, q_w, h_dim)
        k = mat(x, k_w, h_dim)
        v = mat(x, v_w, h_dim)
        p = []
        for i in range(n):
            scores = [
                sum(q[i][a] * k[j][a] for a in range(h_dim)) / math.sqrt(h_dim)
                for j in range(n)
            ]
            top = max(scores)
            exps = [math.exp(z - top) for z in scores]
            denom = sum(exps)
            p.append([e / denom for e in exps])
        heads.append(
            [[sum(p[i][j] * v[j][a] for j in range(n)) for a in range(h_dim)] for i in range(n)]
        )
    concat = [heads[0][i] + heads[1][i] for i in range(n)]
    attn = mat(concat, params.w_out, d)
    return [[x[i][j] + params.beta * attn[i][j] for j in range(d)] for i in range(n)]


def loop_policy(params, x_rows, fam):
    y = loop_trunk(params, x_rows, fam)
    n = len(y)
    out = []
    for i in range(n):
        h1 = [
            math.tanh(sum(y[i][k] * params.w1[k][j] for k in range(net.MODEL_DIM)) + params.b1[j])
            for j in range(net.FFN_DIM)
        ]
        h2 = [
            math.tanh(sum(h1[k] * params.w2[k][j] for k in range(net.FFN_DIM)) + params.b2[j])
            for j in range(net.FFN_DIM)
        ]
        out.append(sum(h2[k] * params.w3[k][0] for k in range(net.FFN_DIM)) + params.b3[0])
    return out


# --- initialization -----------------------------------------------------------


def test_init_residual_starts_as_identity():
    params = init_params(0, 4)
    assert params.alpha == 1.0
    assert params.beta == 0.0


def test_init_deterministic_and_bounded():
    a = init_params(11, 5)
    b = init_params(11, 5)
    for name in BLOCK_ORDER:
        assert np.array_equal(a.block(name), b.block(name)), name
    assert np.abs(a.q1).max() <= 1 / math.sqrt(12)
    c = init_params(12, 5)
    assert not np.array_equal(a.q1, c.q1)


# --- encode -------------------------------------------------------------------


def test_encode_zero_encoding_is_identity():
    params = init_params(0, 3)
    params.encoding = np.zeros_like(params.encoding)
    rng = np.random.default_rng(1)
    batch = random_batch(rng, 4, 3)
    assert np.array_equal(net.encode(params, batch), batch.x)


def test_encode_selects_rows_for_zero_input():
    params = init_params(0, 3)
    batch = LotBatch(x=np.zeros((3, 12)), fam=np.array([2, 0, 2]))
    out = net.encode(params, batch)
    assert np.array_equal(out[0], params.encoding[2])
    assert np.array_equal(out[1], params.encoding[0])


def test_encode_additive_linearity():
    params = init_params(0, 3)
    rng = np.random.default_rng(2)
    x1 = rng.standard_normal((2, 12))
    x2 = rng.standard_normal((2, 12))
    fam = np.array([1, 1])
    d = net.encode(params, LotBatch(x=x1, fam=fam)) - net.encode(params, LotBatch(x=x2, fam=fam))
    assert np.allclose(d, x1 - x2)


def test_encode_rejects_bad_family():
    params = init_params(0, 3)
    with pytest.raises(ValueError):
        net.encode(params, LotBatch(x=np.zeros((1, 12)), fam=np.array([3])))


# --- attention ----------------------------------------------------------------


def test_attention_single_row():
    params = init_params(3, 4)
    x = np.random.default_rng(3).standard_normal((1, 12))
    # one-row softmax is 1, so the output is the concatenated V rows projected
    expected = np.concatenate([x @ params.v1, x @ params.v2], axis=1) @ params.w_out
    assert np.allclose(net.attention_forward(params, x), expected, atol=1e-12)


def test_attention_zero_values_give_zero():
    params = init_params(4, 4)
    params.v1 = np.zeros_like(params.v1)
    params.v2 = np.zeros_like(params.v2)
    x = np.random.default_rng(5).standard_normal((3, 12))
    assert np.allclose(net.attention_forward(params, x), 0.0)


def test_trunk_matches_loop_oracle():
    rng = np.random.default_rng(6)
    params = init_params(7, 4)
    params.beta = 0.7
    params.alpha = 1.3
    for n in (1, 2, 5):
        batch = random_batch(rng, n, 4)
        got = net._trunk(params, batch)
        want = np.array(loop_trunk(params, batch.x.tolist(), batch.fam.tolist()))
        assert np.abs(got - want).max() < 1e-10


def test_policy_matches_loop_oracle():
    rng = np.random.default_rng(7)
    params = init_params(8, 4)
    params.beta = -0.4
    batch = random_batch(rng, 3, 4)
    got = net.forward_policy(params, batch)
    want = np.array(loop_policy(params, batch.x.tolist(), batch.fam.tolist()))
    assert np.abs(got - want).max() < 1e-10


# --- policy head properties -----------------------------------------------------


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    params = init_params(9, 5)
    params.beta = 0.9
    for _ in range(20):
        n = int(rng.integers(2, 33))
        batch = random_batch(rng, n, 5)
        perm = rng.permutation(n)
        scores = net.forward_policy(params, batch)
        permuted = net.forward_policy(params, LotBatch(x=batch.x[perm], fam=batch.fam[perm]))
        assert np.abs(permuted - scores[perm]).max() < 1e-6


def test_beta_zero_scores_are_local():
    rng = np.random.default_rng(9)
    params = init_params(10, 4)
    assert params.beta == 0.0
    batch = random_batch(rng, 6, 4)
    scores = net.forward_policy(params, batch)
    changed = batch.x.copy()
    changed[3] += 10.0
    scores2 = net.forward_policy(params, LotBatch(x=changed, fam=batch.fam))
    keep = [i for i in range(6) if i != 3]
    assert np.array_equal(scores2[keep], scores[keep])
    assert scores2[3] != scores[3]


def test_size_invariance():
    rng = np.random.default_rng(10)
    params = init_params(11, 4)
    params.beta = 0.2
    for n in range(1, 65):
        scores = net.forward_policy(params, random_batch(rng, n, 4))
        assert scores.shape == (n,)
        assert np.all(np.isfinite(scores))


# --- pretext head ----------------------------------------------------------------


def test_pretext_rows_sum_to_one():
    rng = np.random.default_rng(11)
    params = init_params(12, 6)
    params.beta = 0.5
    probs = net.forward_pretext(params, random_batch(rng, 8, 6))
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
    assert probs.min() >= 0.0


def test_pretext_uniform_when_classifier_zero():
    params = init_params(13, 5)
    params.wc = np.zeros_like(params.wc)
    params.bc = np.zeros_like(params.bc)
    probs = net.forward_pretext(params, random_batch(np.random.default_rng(12), 4, 5))
    assert np.allclose(probs, 0.2)


def test_pretext_softmax_saturation():
    params = init_params(14, 3)
    params.wc = np.zeros_like(params.wc)
    params.bc = np.array([30.0, 0.0, 0.0])
    probs = net.forward_pretext(params, random_batch(np.random.default_rng(13), 2, 3))
    assert probs[:, 0].min() > 0.99


# --- gradients --------------------------------------------------------------------


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def finite_difference_grads(params, batch, lam, h=1e-5):
    flat = params.to_flat(BLOCK_ORDER)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        loss_plus = net.pretext_loss(params.with_flat(plus, BLOCK_ORDER), batch, batch.fam, lam)
        loss_minus = net.pretext_loss(params.with_flat(minus, BLOCK_ORDER), batch, batch.fam, lam)
        grad[i] = (loss_plus - loss_minus) / (2 * h)
    return grad


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(14)
    for case in range(3):
        params = init_params(100 + case, 4)
        params.alpha = float(rng.uniform(0.5, 1.5))
        params.beta = float(rng.uniform(-0.8, 0.8))
        batch = random_batch(rng, 5, 4)
        lam = 0.2
        _, grads = net.backward_pretext(params, batch, batch.fam, lam)
        analytic = np.concatenate([grads[name].ravel() for name in BLOCK_ORDER])
        numeric = finite_difference_grads(params, batch, lam)
        assert relative_error(analytic, numeric).max() < 1e-4


def test_l2_term_adds_two_lambda_encoding():
    rng = np.random.default_rng(15)
    params = init_params(16, 4)
    batch = random_batch(rng, 4, 4)
    _, g0 = net.backward_pretext(params, batch, batch.fam, 0.0)
    _, g1 = net.backward_pretext(params, batch, batch.fam, 0.5)
    assert np.allclose(g1["encoding"] - g0["encoding"], 2 * 0.5 * params.encoding)
    assert np.allclose(g1["wc"], g0["wc"])


def test_policy_head_blocks_have_zero_pretext_gradient():
    rng = np.random.default_rng(16)
    params = init_params(17, 4)
    batch = random_batch(rng, 4, 4)
    _, grads = net.backward_pretext(params, batch, batch.fam, 0.1)
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        assert np.all(grads[name] == 0.0), name


# --- flat packing and persistence ---------------------------------------------------


def test_flat_round_trip_all_blocks():
    params = init_params(18, 5)
    flat = params.to_flat(BLOCK_ORDER)
    rebuilt = params.with_flat(flat, BLOCK_ORDER)
    for name in BLOCK_ORDER:
        assert np.array_equal(rebuilt.block(name), params.block(name)), name


def test_frozen_blocks_excluded_from_flat():
    params = init_params(19, 5)
    params.frozen = frozenset({"encoding"})
    names = params.trainable_blocks()
    assert "encoding" not in names
    flat = params.to_flat()
    bumped = params.with_flat(flat + 1.0)
    assert np.array_equal(bumped.encoding, params.encoding)
    assert not np.array_equal(bumped.q1, params.q1)


def test_save_load_round_trip(tmp_path):
    params = init_params(20, 4)
    params.frozen = frozenset({"encoding"})
    path = tmp_path / "params.npz"
    net.save_params(path, params, meta={"train_seed": 99})
    loaded, meta = net.load_params(path)
    assert meta["train_seed"] == 99
    assert loaded.frozen == frozenset({"encoding"})
    for name in BLOCK_ORDER:
        assert np.array_equal(loaded.block(name), params.block(name)), name


def test_determinism_of_forward():
    rng = np.random.default_rng(21)
    params = init_params(22, 4)
    params.beta = 0.3
    batch = random_batch(rng, 7, 4)
    a = net.forward_policy(params, batch)
    b = net.forward_policy(params, batch)
    assert np.array_equal(a, b)
