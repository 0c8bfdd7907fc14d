import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params
from oracles import assert_grad_close, central_diff, sigmoid
from pdcfrs.model import (AdamState, LossConfig, ModelParams, adam_step, bce_grad, bce_loss,
                          grad_item_cl, grad_total_client_loss, info_nce, info_nce_with_grad, init_params,
                          load_params, predict_score, save_params, score_all_items, scatter_rows)


# ---------------------------------------------------------------- predictor

def test_zero_params_give_half():
    p = init_params(2, 3, dim=4, layers=(3, 2))
    for w in p.weights:
        w[:] = 0
    p.h[:] = 0
    assert predict_score(p, 1, 2) == 0.5


def test_hand_computed_forward():
    p = ModelParams(U=np.array([[0.3]]), V=np.array([[0.7]]), weights=[np.array([[1.0], [1.0]])],
                    biases=[np.zeros(1)], h=np.array([1.0]))
    assert predict_score(p, 0, 0) == pytest.approx(sigmoid(1.0), abs=1e-12)
    assert predict_score(p, 0, 0) == pytest.approx(0.7311, abs=1e-4)


def test_score_in_open_interval(rng):
    # logits beyond ~37 round to exactly 1.0 in float64, so keep them moderate
    p = random_params(rng)
    for u in range(3):
        for i in range(4):
            assert 0.0 < predict_score(p, u, i) < 1.0


def test_predict_index_bounds():
    p = init_params(2, 3, dim=4, layers=(3,))
    with pytest.raises(IndexError):
        predict_score(p, 2, 0)


def test_score_all_items_matches_pointwise(rng):
    p = random_params(rng, num_users=5, num_items=7)
    s = score_all_items(p, [4, 0, 2], chunk=2)
    for r, u in enumerate([4, 0, 2]):
        for i in range(7):
            assert sigmoid(s[r, i]) == pytest.approx(predict_score(p, u, i), rel=1e-12)


# ---------------------------------------------------------------- BCE

def test_bce_empty_is_zero(rng):
    assert bce_loss(random_params(rng), []) == 0.0


def test_bce_half_is_ln2():
    p = init_params(1, 1, dim=2, layers=(2,))
    p.h[:] = 0
    assert bce_loss(p, [(0, 0, 1)]) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamp_near_perfect():
    p = ModelParams(U=np.array([[50.0]]), V=np.array([[0.0]]), weights=[np.array([[1.0], [0.0]])],
                    biases=[np.zeros(1)], h=np.array([1.0]))
    loss = bce_loss(p, [(0, 0, 1)])
    assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
    assert loss == pytest.approx(1e-7, rel=1e-6)
    assert math.isfinite(bce_loss(p, [(0, 0, 0)]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-6, 6), st.floats(0.01, 3), st.sampled_from([0, 1]))
def test_bce_monotone_toward_label(logit, step, label):
    def loss_at(z):
        p = ModelParams(U=np.array([[z]]), V=np.array([[0.0]]), weights=[np.array([[1.0], [0.0]])],
                        biases=[np.zeros(1)], h=np.array([1.0]), activation="identity")
        return bce_loss(p, [(0, 0, label)])
    toward = logit + step if label == 1 else logit - step
    assert loss_at(toward) <= loss_at(logit)


# ---------------------------------------------------------------- InfoNCE closed forms

def test_info_nce_identical_orthonormal():
    a = np.eye(2)
    assert info_nce(a, a, 1.0) == pytest.approx(2 * -math.log(math.e / (math.e + 1)), abs=1e-12)
    assert info_nce(a, a, 1.0) == pytest.approx(0.6265, abs=1e-4)


def test_info_nce_swapped_orthonormal():
    a = np.eye(2)
    assert info_nce(a, a[::-1], 1.0) == pytest.approx(2 * -math.log(1 / (1 + math.e)), abs=1e-12)
    assert info_nce(a, a[::-1], 1.0) == pytest.approx(2 * 1.3133, abs=1e-4)


def test_info_nce_zero_row():
    with pytest.raises(ValueError, match="zero-norm"):
        info_nce(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(1, 5), st.integers(0, 10 ** 6), st.floats(0.05, 2.0))
def test_info_nce_symmetries(n, d, seed, tau):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, d)), r.normal(size=(n, d))
    if np.any(np.linalg.norm(a, axis=1) < 1e-3) or np.any(np.linalg.norm(b, axis=1) < 1e-3):
        return
    base = info_nce(a, b, tau)
    perm = r.permutation(n)
    assert abs(info_nce(a[perm], b[perm], tau) - base) <= 1e-10 * max(1, abs(base))
    a2 = a.copy()
    a2[r.integers(n)] *= r.uniform(0.1, 10)
    b2 = b.copy()
    b2[r.integers(n)] *= r.uniform(0.1, 10)
    assert abs(info_nce(a2, b2, tau) - base) <= 1e-10 * max(1, abs(base))


# ---------------------------------------------------------------- gradients vs finite differences

@pytest.mark.parametrize("seed", range(4))
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, num_users=3, num_items=4, dim=4)
    triples = [(0, 1, 1), (0, 3, 0), (1, 1, 0), (2, 0, 1), (2, 2, 1), (1, 3, 1)]
    _, (dU, dV, dws, dbs, dh) = bce_grad(p, triples)
    f = lambda: bce_loss(p, triples)
    assert_grad_close(dU, central_diff(f, p.U))
    assert_grad_close(dV, central_diff(f, p.V))
    for w, dw in zip(p.weights, dws):
        assert_grad_close(dw, central_diff(f, w))
    for b, db in zip(p.biases, dbs):
        assert_grad_close(db, central_diff(f, b))
    assert_grad_close(dh, central_diff(f, p.h))


@pytest.mark.parametrize("seed", range(3))
def test_item_cl_gradient(seed):
    rng = np.random.default_rng(seed)
    V, V_aux = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    cfg = LossConfig(tau=0.3, beta=0.7)
    loss, g = grad_item_cl(V, V_aux, cfg)
    assert loss == pytest.approx(0.7 * info_nce(V, V_aux, 0.3), rel=1e-12)
    assert_grad_close(g, central_diff(lambda: 0.7 * info_nce(V, V_aux, 0.3), V))


def test_item_cl_zero_beta_and_copermutation(rng):
    V, V_aux = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    _, g0 = grad_item_cl(V, V_aux, LossConfig(beta=0.0))
    assert not g0.any()
    cfg = LossConfig(tau=0.5, beta=1.0)
    _, g = grad_item_cl(V, V_aux, cfg)
    perm = rng.permutation(6)
    _, gp = grad_item_cl(V[perm], V_aux[perm], cfg)
    np.testing.assert_allclose(gp, g[perm], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_user_cl_gradient(seed):
    rng = np.random.default_rng(seed)
    U_aux = rng.normal(size=(5, 4))
    u = rng.normal(size=(1, 4))
    _, g = info_nce_with_grad(u, U_aux, [2], 0.4)

    def f():
        # -log softmax, written out directly
        cos = [float(u[0] @ U_aux[j] / (np.linalg.norm(u[0]) * np.linalg.norm(U_aux[j]))) for j in range(5)]
        return -(cos[2] / 0.4 - math.log(sum(math.exp(c / 0.4) for c in cos)))
    assert_grad_close(g, central_diff(f, u))


@pytest.mark.parametrize("seed", range(4))
def test_total_client_gradient(seed):
    """BCE over own + augmented triples plus lambda * user InfoNCE, all parameters."""
    rng = np.random.default_rng(seed)
    p = random_params(rng, num_users=4, num_items=8, dim=4)
    U_aux = rng.normal(size=p.U.shape)
    cfg = LossConfig(tau=0.3, lam=0.6)
    user = 1
    own = [(user, 0, 1), (user, 2, 0), (user, 5, 0), (user, 7, 0)]
    augmented = [(user, 3, 1), (user, 6, 1)]
    triples = own + augmented
    loss, g = grad_total_client_loss(p, triples, U_aux, cfg, user)

    def f():
        return bce_loss(p, triples) + cfg.lam * info_nce_with_grad(p.U[user:user + 1], U_aux, [user], cfg.tau,
                                                                   need_grad=False)[0]
    assert loss == pytest.approx(f(), rel=1e-12)
    urow = p.U[user]
    assert_grad_close(g.u, central_diff(f, urow))
    assert_grad_close(g.V, central_diff(f, p.V))
    for w, dw in zip(p.weights, g.weights):
        assert_grad_close(dw, central_diff(f, w))
    for b, db in zip(p.biases, g.biases):
        assert_grad_close(db, central_diff(f, b))
    assert_grad_close(g.h, central_diff(f, p.h))


def test_total_client_gradient_lambda_zero_is_bce(rng):
    p = random_params(rng)
    triples = [(0, 1, 1), (0, 2, 0)]
    _, g = grad_total_client_loss(p, triples, rng.normal(size=p.U.shape), LossConfig(lam=0.0), 0)
    _, (dU, dV, dws, dbs, dh) = bce_grad(p, triples)
    assert np.array_equal(g.u, dU[0]) and np.array_equal(g.V, dV) and np.array_equal(g.h, dh)
    assert all(np.array_equal(a, b) for a, b in zip(g.weights, dws))


def test_total_client_gradient_empty(rng):
    p = random_params(rng)
    loss, g = grad_total_client_loss(p, np.empty((0, 3), dtype=int), None, LossConfig(lam=0.0), 0)
    assert loss == 0.0
    assert not g.u.any() and not g.V.any() and not g.h.any()


def test_total_client_gradient_rejects_foreign_triples(rng):
    p = random_params(rng)
    with pytest.raises(ValueError):
        grad_total_client_loss(p, [(1, 0, 1)], None, LossConfig(), 0)


def test_scatter_rows_relabel_invariance(rng):
    rows = rng.normal(size=(9, 3))
    idx = np.array([4, 1, 4, 0, 1, 4, 2, 0, 1])
    out = scatter_rows(5, idx, rows)
    ref = np.zeros((5, 3))
    for i, r in zip(idx, rows):
        ref[i] += r
    np.testing.assert_allclose(out, ref, rtol=1e-14)
    # order-preserving relabel 0..4 -> 10,11,13,17,19 gives bit-identical rows
    relabel = np.array([10, 11, 13, 17, 19])
    out2 = scatter_rows(20, relabel[idx], rows)
    assert np.array_equal(out2[relabel], out)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient(rng):
    p = [rng.normal(size=(3, 2))]
    st0 = AdamState([np.ones((3, 2))], [np.ones((3, 2))], step=4)
    new, st1 = adam_step(st0, p, [np.zeros((3, 2))])
    m_hat = 0.9 / (1 - 0.9 ** 5)
    v_hat = 0.999 / (1 - 0.999 ** 5)
    np.testing.assert_allclose(new[0], p[0] - 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)
    # moments decay
    np.testing.assert_allclose(st1.m[0], 0.9)
    np.testing.assert_allclose(st1.v[0], 0.999)
    assert st1.step == 5


def test_adam_zero_gradient_fresh_state_keeps_params(rng):
    p = [rng.normal(size=(3, 2))]
    new, st1 = adam_step(AdamState.zeros_like(p), p, [np.zeros((3, 2))])
    assert np.array_equal(new[0], p[0])
    assert st1.step == 1


def test_adam_first_step_is_lr_sign(rng):
    p = [rng.normal(size=10)]
    g = [rng.normal(size=10)]
    new, _ = adam_step(AdamState.zeros_like(p, lr=0.01), p, g)
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> lr * g / (|g| + eps)
    np.testing.assert_allclose(p[0] - new[0], 0.01 * np.sign(g[0]), rtol=1e-6)


def test_adam_deterministic_and_pure(rng):
    p = [rng.normal(size=4)]
    g = [rng.normal(size=4)]
    st0 = AdamState.zeros_like(p)
    keep = p[0].copy()
    a, sa = adam_step(st0, p, g)
    b, sb = adam_step(st0, p, g)
    assert np.array_equal(a[0], b[0]) and np.array_equal(sa.m[0], sb.m[0])
    assert np.array_equal(p[0], keep) and st0.step == 0


def test_adam_rejects_bad_input():
    p = [np.zeros(2)]
    with pytest.raises(FloatingPointError):
        adam_step(AdamState.zeros_like(p), p, [np.array([np.nan, 0.0])])
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros_like(p), p, [np.zeros(3)])


# ---------------------------------------------------------------- init and checkpoints

def test_init_shapes_and_determinism():
    a = init_params(10, 20, rng_seed=5)
    assert a.U.shape == (10, 32) and a.V.shape == (20, 32)
    assert [w.shape for w in a.weights] == [(64, 32), (32, 16), (16, 8)]
    assert a.h.shape == (8,)
    assert a.allclose(init_params(10, 20, rng_seed=5))
    assert not np.array_equal(a.U, init_params(10, 20, rng_seed=6).U)
    assert all(not b.any() for b in a.biases)
    assert abs(a.U.std() - 0.01) < 0.003


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_params(0, 3)
    with pytest.raises(ValueError):
        init_params(2, 3, activation="gelu")


def test_checkpoint_round_trip(tmp_path, rng):
    p = random_params(rng, activation="tanh")
    save_params(tmp_path / "ck.npz", p)
    q = load_params(tmp_path / "ck.npz")
    assert q.activation == "tanh"
    assert p.allclose(q)
