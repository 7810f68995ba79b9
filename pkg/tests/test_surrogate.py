import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from smsdkl import checks
from smsdkl import diffgraph as dg
from smsdkl import feature_net as fn
from smsdkl import surrogate as sg
from smsdkl.core import Dim, HyperparamSpace, RunConfig, SequenceDataset

# -(1/2) log(4π) - 1/4, the log density of N(1; 0, 2)
LML_UNIT = -1.5155121234846454


def random_blr(rng, N=None, D=None):
    N = N or int(rng.integers(1, 21))
    D = D or int(rng.integers(1, 21))
    G = rng.standard_normal((N, D))
    y = rng.standard_normal(N)
    return G, y, float(np.exp(rng.uniform(-2, 2))), float(np.exp(rng.uniform(-2, 2)))


def test_posterior_prior_case():
    post = sg.posterior(np.zeros((0, 3)), np.zeros(0), 2.0, 0.5)
    np.testing.assert_array_equal(post.m_w, 0.0)
    np.testing.assert_array_equal(post.K_w, np.eye(3))
    g = np.array([1.0, -2.0, 0.5])
    mu, s2 = sg.predict(post, g)
    assert mu == 0.0 and s2 == pytest.approx(g @ g / 0.5)


def test_unit_example():
    G, y = np.array([[1.0]]), np.array([1.0])
    post = sg.posterior(G, y, 1.0, 1.0)
    np.testing.assert_allclose(post.K_w, [[2.0]])
    np.testing.assert_allclose(post.m_w, [0.5])
    mu, s2 = sg.predict(post, np.array([1.0]))
    assert mu == pytest.approx(0.5) and s2 == pytest.approx(0.5)
    assert sg.predict(post, np.zeros(1)) == (0.0, 0.0)
    for f in (sg.log_marginal_primal, sg.log_marginal_dual, sg.log_marginal):
        assert f(G, y, 1.0, 1.0) == pytest.approx(LML_UNIT, rel=1e-12)
    assert LML_UNIT == pytest.approx(multivariate_normal(0.0, 2.0).logpdf(1.0), rel=1e-14)


def test_primal_quadratic_coefficient_is_halved():
    # without the 1/2 the primal value would differ from the dual by β²/(2λ)·quad
    G, y = np.array([[1.0]]), np.array([1.0])
    assert sg.log_marginal_primal(G, y, 1.0, 1.0) != pytest.approx(LML_UNIT + 0.25)


def test_zero_targets():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((6, 3))
    beta, lam = 2.0, 0.7
    K = np.eye(3) + beta / lam * G.T @ G
    expect = -3 * math.log(2 * math.pi / beta) - 0.5 * np.linalg.slogdet(K)[1]
    assert sg.log_marginal_primal(G, np.zeros(6), beta, lam) == pytest.approx(expect, rel=1e-12)
    assert sg.log_marginal_dual(G, np.zeros(6), beta, lam) == pytest.approx(expect, rel=1e-12)


def test_dual_with_zero_features():
    y = np.array([0.3, -1.0, 2.0])
    beta = 3.0
    expect = sum(multivariate_normal(0.0, 1 / beta).logpdf(v) for v in y)
    assert sg.log_marginal_dual(np.zeros((3, 2)), y, beta, 1.0) == pytest.approx(expect, rel=1e-12)


def test_dual_identical_rows():
    G = np.array([[1.0, 2.0], [1.0, 2.0]])
    y = np.array([0.5, 0.4])
    assert np.isfinite(sg.log_marginal_dual(G, y, 1.0, 1.0))


def test_primal_equals_dual():
    rng = np.random.default_rng(1)
    for _ in range(100):
        G, y, beta, lam = random_blr(rng)
        d = sg.log_marginal_dual(G, y, beta, lam)
        assert abs(sg.log_marginal_primal(G, y, beta, lam) - d) / max(1.0, abs(d)) < 1e-8


def test_dual_matches_density():
    rng = np.random.default_rng(2)
    for _ in range(50):
        G, y, beta, lam = random_blr(rng)
        cov = G @ G.T / lam + np.eye(len(y)) / beta
        ref = multivariate_normal(np.zeros(len(y)), cov).logpdf(y)
        assert sg.log_marginal(G, y, beta, lam) == pytest.approx(ref, rel=1e-8)


def test_posterior_matches_dense_inverse():
    rng = np.random.default_rng(3)
    for _ in range(100):
        G, y, beta, lam = random_blr(rng)
        D = G.shape[1]
        Sigma = np.linalg.inv(lam * np.eye(D) + beta * G.T @ G)
        m = beta * Sigma @ G.T @ y
        post = sg.posterior(G, y, beta, lam)
        np.testing.assert_allclose(post.m_w, m, atol=1e-8, rtol=1e-8)
        g = rng.standard_normal(D)
        mu, s2 = sg.predict(post, g)
        assert mu == pytest.approx(g @ m, abs=1e-8) and s2 == pytest.approx(g @ Sigma @ g, rel=1e-8)


@pytest.mark.parametrize("N,D,primal", [(5, 2, True), (2, 5, False), (3, 3, False)])
def test_dispatch_rule(monkeypatch, N, D, primal):
    called = []
    orig_p, orig_d = sg.lml_primal_node, sg.lml_dual_node
    monkeypatch.setattr(sg, "lml_primal_node", lambda *a: called.append("primal") or orig_p(*a))
    monkeypatch.setattr(sg, "lml_dual_node", lambda *a: called.append("dual") or orig_d(*a))
    G, y, beta, lam = random_blr(np.random.default_rng(N * 10 + D), N, D)
    sg.log_marginal(G, y, beta, lam)
    assert called == ["primal" if primal else "dual"]
    assert sg.uses_primal(N, D) is primal


def test_complexity_counts():
    tall, wide = checks.lml_flops(200, 32), checks.lml_flops(32, 200)
    assert 0.5 <= tall / (200 * 32**2) <= 2
    assert 0.5 <= wide / (200 * 32**2) <= 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_variance_shrinks_with_data(seed):
    rng = np.random.default_rng(seed)
    G, y, beta, lam = random_blr(rng, N=int(rng.integers(0, 8)) or None, D=int(rng.integers(1, 6)))
    g = rng.standard_normal(G.shape[1])
    _, before = sg.predict(sg.posterior(G, y, beta, lam), g)
    _, after = sg.predict(sg.posterior(np.vstack([G, g]), np.append(y, 0.0), beta, lam), g)
    assert after <= before * (1 + 1e-12)


def test_objective_singleton_and_full_sum():
    params, data = checks.tiny_problem(0)
    nodes = params.store.nodes()
    full = float(sg.multitask_objective(nodes, data, [1, 2, 3]).value)
    parts = [float(sg.multitask_objective(nodes, data, [t]).value) for t in (1, 2, 3)]
    assert full == pytest.approx(sum(parts), rel=1e-12)
    # one step by hand through the feature network
    z = fn.embeddings(params, data.steps, data.lengths, [2])
    G = fn.head(fn._consts(params), dg.constant(z), data.X_norm).value
    beta = math.exp(params.store["blr.log_beta"][1])
    lam = math.exp(params.store["blr.log_lambda"][1])
    assert parts[1] == pytest.approx(sg.log_marginal(G, data.Y_norm[:, 1], beta, lam), rel=1e-12)
    with pytest.raises(ValueError):
        sg.multitask_objective(nodes, data, [])


def test_objective_gradient():
    params, data = checks.tiny_problem(1, gain=2.0)
    errs = dg.grad_check_blocks(lambda q: sg.multitask_objective(q, data, [1, 2, 3]), params.store)
    assert max(errs.values()) < 1e-4


def test_fit_zero_iterations_leaves_params():
    params, data = checks.tiny_problem(2)
    before = params.store.copy()
    assert sg.fit(params, data, 0, np.random.default_rng(0)) == []
    for k in before.params:
        assert np.array_equal(before[k], params.store[k])


def test_fit_deterministic_and_logged(tmp_path):
    runs = []
    for _ in range(2):
        params, data = checks.tiny_problem(3)
        recs = sg.fit(params, data, 20, np.random.default_rng(5))
        runs.append((params, recs))
    for k in runs[0][0].store.names():
        assert np.array_equal(runs[0][0].store[k], runs[1][0].store[k])
    assert [r["iter"] for r in runs[0][1]] == list(range(20))
    path = tmp_path / "log.csv"
    sg.write_training_log(path, runs[0][1])
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,objective,beta_mean,lambda_mean" and len(lines) == 21


def test_fit_trailing_windows_increase():
    params, data = checks.tiny_problem(4, N=12, T=3)
    recs = sg.fit(params, data, 200, np.random.default_rng(0))
    obj = np.array([r["objective"] for r in recs])
    windows = obj.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(windows) >= 0), windows


def test_fit_keeps_noise_params_in_box():
    params, data = checks.tiny_problem(5)
    params.store["blr.log_beta"][:] = 9.999
    sg.fit(params, data, 30, np.random.default_rng(0), lr=0.5)
    assert np.all(params.store["blr.log_beta"] <= sg.LOG_BETA_BOUNDS[1])
    assert np.all(params.store["blr.log_lambda"] >= sg.LOG_LAMBDA_BOUNDS[0])


def test_step_subsampling():
    rng = np.random.default_rng(0)
    assert sg._pick_steps(5, 32, rng) == [1, 2, 3, 4, 5]
    S = sg._pick_steps(40, 32, rng)
    assert len(S) == 32 and len(set(S)) == 32 and 1 <= min(S) and max(S) <= 40


def _surrogate(share=False):
    rng = np.random.default_rng(0)
    ds = SequenceDataset(rng.standard_normal((6, 4, 2)), (rng.random((6, 4)) < 0.5).astype(float))
    space = HyperparamSpace([Dim("a", "float", 0, 1), Dim("b", "int", 1, 5)])
    cfg = RunConfig(hidden=3, set_width=4, head_width=4, feature_dim=4, m_train=10, share_noise=share)
    sur = sg.DklSurrogate(space, ds, cfg, np.random.default_rng(1))
    X = np.column_stack([rng.random(5), rng.integers(1, 6, 5)])
    sur.set_data(X, rng.standard_normal((5, 4)))
    return sur, space


def test_surrogate_predictions():
    sur, space = _surrogate()
    sur.fit(10, np.random.default_rng(2))
    assert len(sur.posteriors) == 4 and sur.Z.shape == (4, 1)
    Xn = np.random.default_rng(3).random((7, space.norm_width))
    mu, s2 = sur.predict_all(Xn)
    assert mu.shape == (4, 7) and np.all(s2 > 0)
    mu3, s23 = sur.predict(3, Xn)
    np.testing.assert_allclose(mu3, mu[2], atol=1e-12)
    raw_mu, raw_s2 = sur.to_raw(1, 0.0, 1.0)
    assert raw_mu == pytest.approx(sur.data.y_mean[0]) and raw_s2 == pytest.approx(sur.data.y_sd[0] ** 2)
    assert len(sur.train_log) == 10


def test_shared_noise_switch():
    sur, _ = _surrogate(share=True)
    assert sur.params.store["blr.log_beta"].shape == (1,)
    sur.fit(3, np.random.default_rng(0))
    assert len(sur.posteriors) == 4
