import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smsdkl import acquisition as aq
from smsdkl.bench.synth import QuadraticFamily
from smsdkl.core import Dim, HyperparamSpace, RunConfig, SequenceDataset, normalize, sample_many

SMALL = dict(m_train=5, candidate_pool=64, hidden=3, set_width=4, head_width=4, feature_dim=4)


def toy_dataset(T=2, I=4, seed=0):
    rng = np.random.default_rng(seed)
    return SequenceDataset(rng.standard_normal((I, T, 1)), (rng.random((I, T)) < 0.5).astype(float))


def test_ei_examples():
    assert aq.expected_improvement(1.3, 0.0, 1.0) == pytest.approx(0.3)
    assert aq.expected_improvement(0.7, 0.0, 1.0) == 0.0
    assert aq.expected_improvement(2.0, 1.0, 2.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
    with pytest.raises(ValueError):
        aq.expected_improvement(0.0, -1.0, 0.0)


def test_ei_monte_carlo():
    rng = np.random.default_rng(0)
    mu, sd, best = 0.0, 0.5, 1.0
    imp = np.maximum(mu + sd * rng.standard_normal(1_000_000) - best, 0.0)
    se = imp.std() / math.sqrt(imp.size)
    assert abs(aq.expected_improvement(mu, sd * sd, best) - imp.mean()) < 3 * se


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 4), st.floats(-5, 5))
def test_ei_non_negative_and_monotone_in_mu(mu, s2, best):
    ei = aq.expected_improvement(mu, s2, best)
    assert ei >= 0
    assert aq.expected_improvement(mu + 0.1, s2, best) >= ei - 1e-12


def test_ei_vectorized():
    ei = aq.expected_improvement(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.5)
    assert ei.shape == (2,) and ei[1] == pytest.approx(0.5)


def test_hedge_probabilities():
    np.testing.assert_allclose(aq.hedge_probabilities([1, 1, 1]), [1 / 3] * 3)
    np.testing.assert_allclose(aq.hedge_probabilities([3, 1]), [0.75, 0.25])
    np.testing.assert_allclose(aq.hedge_probabilities([0, 0]), [0.5, 0.5])
    with pytest.raises(ValueError):
        aq.hedge_probabilities([1.0, -0.1])
    with pytest.raises(ValueError):
        aq.StepProposal(1, np.zeros(1), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=10))
def test_hedge_probabilities_form_a_distribution(values):
    p = aq.hedge_probabilities(values)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)


def test_hedge_select_frequencies():
    props = [aq.StepProposal(t, np.zeros(1), v) for t, v in [(1, 3.0), (2, 1.0)]]
    rng = np.random.default_rng(0)
    n = 20_000
    hits = sum(aq.hedge_select(props, rng)[0].t == 1 for _ in range(n))
    assert abs(hits - 0.75 * n) < 5 * math.sqrt(n * 0.75 * 0.25)
    # deterministic given the generator
    a = [aq.hedge_select(props, np.random.default_rng(3))[0].t for _ in range(5)]
    assert len(set(a)) == 1


def test_hedge_zero_values_never_picked():
    props = [aq.StepProposal(t, np.zeros(1), v) for t, v in [(1, 0.0), (2, 2.0), (3, 0.0)]]
    rng = np.random.default_rng(1)
    assert {aq.hedge_select(props, rng)[0].t for _ in range(200)} == {2}


SPACE1 = HyperparamSpace([Dim("x", "float", 0, 1)])


def bump(Xn):
    return -(Xn[:, 0] - 0.4) ** 2, np.full(len(Xn), 0.01)


def test_maximize_single_candidate():
    cands = np.array([[0.9]])
    prop = aq.maximize_acquisition(bump, 0.0, SPACE1, cands)
    assert prop.index == 0 and prop.x_star[0] == 0.9


def test_maximize_tie_goes_to_first():
    cands = np.array([[0.1], [0.4], [0.4], [0.8]])
    prop = aq.maximize_acquisition(bump, 0.0, SPACE1, cands)
    assert prop.index == 1


def test_maximize_exhaustive_pool():
    rng = np.random.default_rng(0)
    prop = aq.maximize_acquisition(bump, -0.01, SPACE1, 512, rng)
    cands = sample_many(SPACE1, 512, np.random.default_rng(0))
    ei = aq.expected_improvement(*bump(normalize(SPACE1, cands)), -0.01)
    assert prop.acq_value >= ei.max()
    assert prop.x_star[0] == cands[int(np.argmax(ei)), 0]
    with pytest.raises(ValueError):
        aq.maximize_acquisition(bump, 0.0, SPACE1, 0, rng)


class ConstantSurrogate:
    """Stand-in whose every prediction is the same, so EI is flat."""

    def __init__(self, T):
        self.T = T
        self.Z = np.zeros((T, 1))
        self.train_log = []

    def set_data(self, X, Y):
        pass

    def fit(self, M, rng):
        return []

    def predict_all(self, Xn):
        return np.zeros((self.T, len(Xn))), np.ones((self.T, len(Xn)))

    def incumbent(self, t):
        return 0.0


def test_constant_surrogate_is_random_search():
    prob = QuadraticFamily()
    cfg = RunConfig(n_init=3, n_iters=6, seed=11, **SMALL)
    hist = aq.sms_dkl_run(prob, toy_dataset(), cfg, surrogate=ConstantSurrogate(2))
    rng = np.random.default_rng([11, 2])
    expected = []
    for _ in range(6):
        expected.append(sample_many(prob.space, cfg.candidate_pool, rng)[0])
        rng.random()
    np.testing.assert_array_equal(hist.X[3:], np.array(expected))
    for r in hist.records[3:]:
        np.testing.assert_allclose(r.probs, [0.5, 0.5])


def test_zero_iterations_is_initial_design():
    prob = QuadraticFamily()
    cfg = RunConfig(n_init=4, n_iters=0, seed=2, **SMALL)
    hist = aq.sms_dkl_run(prob, toy_dataset(), cfg)
    assert len(hist) == 4
    np.testing.assert_array_equal(hist.X, aq.initial_design(prob.space, 4, 2))
    assert all(r.iter == 0 for r in hist.records)


class OneStep:
    space = SPACE1
    T = 1

    def evaluate(self, x):
        return np.array([-(x[0] - 0.25) ** 2])


def test_single_step_always_chosen():
    cfg = RunConfig(n_init=3, n_iters=4, seed=0, **SMALL)
    hist = aq.sms_dkl_run(OneStep(), toy_dataset(T=1), cfg)
    for r in hist.records[3:]:
        assert r.chosen_t == 1 and r.probs.tolist() == [1.0]


def test_run_invariants_and_csv(tmp_path):
    prob = QuadraticFamily()
    cfg = RunConfig(n_init=3, n_iters=5, seed=4, **SMALL)
    hist = aq.sms_dkl_run(prob, toy_dataset(), cfg)
    assert len(hist) == 8 and hist.Y.shape == (8, 2)
    inc = hist.incumbents()
    assert np.all(np.diff(inc, axis=0) >= 0)
    for r in hist.records[3:]:
        assert r.probs.sum() == pytest.approx(1.0) and np.all(r.probs >= 0)
        assert prob.space.contains(r.x)
    assert hist.extras["embeddings"].shape == (2, 1)
    assert len(hist.extras["train_log"]) == 5 * cfg.m_train

    path = tmp_path / "h.csv"
    hist.to_csv(path)
    assert path.read_text().splitlines()[0] == "iter,chosen_t,x_json,y_1,y_2,inc_1,inc_2,p_1,p_2,seconds"
    back = aq.RunHistory.from_csv(path)
    np.testing.assert_array_equal(back.X, hist.X)
    np.testing.assert_array_equal(back.Y, hist.Y)
    assert [r.chosen_t for r in back.records] == [r.chosen_t for r in hist.records]


def test_run_is_deterministic():
    prob = QuadraticFamily()
    cfg = RunConfig(n_init=3, n_iters=3, seed=9, **SMALL)
    a = aq.sms_dkl_run(prob, toy_dataset(), cfg)
    b = aq.sms_dkl_run(prob, toy_dataset(), cfg)
    np.testing.assert_array_equal(a.X, b.X)


class Flaky:
    space = SPACE1
    T = 2

    def __init__(self):
        self.calls = 0

    def evaluate(self, x):
        self.calls += 1
        if self.calls == 5:
            raise RuntimeError("boom")
        return np.array([x[0], -x[0]])


def test_failed_evaluation_is_skipped():
    cfg = RunConfig(n_init=3, n_iters=4, seed=0, **SMALL)
    hist = aq.sms_dkl_run(Flaky(), toy_dataset(), cfg)
    assert len(hist) == 6 and len(hist.failures) == 1
    assert hist.failures[0]["iter"] == 2


def test_mismatched_steps_rejected():
    with pytest.raises(ValueError):
        aq.sms_dkl_run(QuadraticFamily(), toy_dataset(T=3), RunConfig(**SMALL))


def test_ask_tell_driver():
    opt = aq.SmsDkl(SPACE1, toy_dataset(T=1), RunConfig(n_init=2, **SMALL))
    with pytest.raises(RuntimeError):
        opt.suggest()
    for x in opt.initial_points():
        opt.observe(x, OneStep().evaluate(x))
    with pytest.raises(ValueError):
        opt.observe([0.5], [1.0, 2.0])
    x = opt.suggest()
    assert SPACE1.contains(x) and len(opt.last["proposals"]) == 1


def test_single_incumbents_follow_best_sum():
    h = aq.RunHistory("x", None, 2)
    for n, y in enumerate([[1.0, 0.0], [0.0, 2.0], [0.5, 0.4]]):
        h.add(aq.Record(n, np.array([float(n)]), y))
    np.testing.assert_array_equal(h.single_incumbents(), [[1, 0], [0, 2], [0, 2]])
    np.testing.assert_array_equal(h.incumbents(), [[1, 0], [1, 2], [1, 2]])
    pts = h.incumbent_points()
    assert pts[0][1] == 1.0 and pts[1][0][0] == 1.0
