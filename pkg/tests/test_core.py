import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smsdkl.core import (
    AcquisitionSet,
    Dim,
    Filtration,
    HyperparamSpace,
    HyperparamVector,
    RunConfig,
    SequenceDataset,
    filtration,
    normalize,
    sample_many,
    sample_uniform,
)


def mixed_space():
    return HyperparamSpace([
        Dim("units", "int", 10, 200),
        Dim("log_lr", "float", -8, -3),
        Dim("cell", "cat", 0, 3),
    ])


def test_dim_validation():
    with pytest.raises(ValueError):
        Dim("a", "float", 1.0, 0.0)
    with pytest.raises(ValueError):
        Dim("a", "cat", 0, 1)
    with pytest.raises(ValueError):
        Dim("a", "int", 0.5, 3)
    with pytest.raises(ValueError):
        Dim("a", "bogus", 0, 1)
    with pytest.raises(ValueError):
        HyperparamSpace([Dim("a", "float"), Dim("a", "int", 0, 3)])


def test_vector_membership():
    space = mixed_space()
    HyperparamVector(space, (10, -5.0, 2))
    for bad in [(9, -5.0, 2), (10.5, -5.0, 2), (10, -2.0, 2), (10, -5.0, 3), (10, -5.0)]:
        with pytest.raises(ValueError):
            HyperparamVector(space, bad)


def test_sample_uniform_is_deterministic_under_seed_reset():
    space = HyperparamSpace([Dim("x", "float", 0, 1)])
    a = sample_uniform(space, np.random.default_rng(7))
    b = sample_uniform(space, np.random.default_rng(7))
    assert a == b


def test_degenerate_integer_range():
    space = HyperparamSpace([Dim("k", "int", 3, 3)])
    assert sample_uniform(space, np.random.default_rng(0)).values == (3.0,)
    assert normalize(space, [3])[0] == 0.0


def test_integer_level_frequencies():
    space = HyperparamSpace([Dim("k", "int", 0, 9)])
    draws = sample_many(space, 100_000, np.random.default_rng(1))[:, 0]
    counts = np.bincount(draws.astype(int), minlength=10)
    # binomial sd: sqrt(1e5 * 0.1 * 0.9) = 94.87
    assert np.all(np.abs(counts - 10_000) <= 5 * 94.87)


def test_samples_lie_in_space():
    space = mixed_space()
    X = sample_many(space, 500, np.random.default_rng(2))
    assert all(space.contains(x) for x in X)


def test_normalize_examples():
    space = HyperparamSpace([Dim("u", "int", 10, 200)])
    assert normalize(space, [10])[0] == 0.0
    assert normalize(space, [200])[0] == 1.0
    space = HyperparamSpace([Dim("v", "float", -8, -3)])
    assert normalize(space, [-5.5])[0] == 0.5


def test_normalize_one_hot_and_width():
    space = mixed_space()
    z = normalize(space, [105, -5.5, 1])
    assert space.norm_width == 5
    np.testing.assert_allclose(z, [0.5, 0.5, 0.0, 1.0, 0.0])
    Z = normalize(space, np.array([[105, -5.5, 1], [10, -8, 0]]))
    assert Z.shape == (2, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_injective(seed):
    space = mixed_space()
    X = sample_many(space, 2, np.random.default_rng(seed))
    if not np.array_equal(X[0], X[1]):
        assert not np.array_equal(normalize(space, X[0]), normalize(space, X[1]))
    Z = normalize(space, X)
    assert np.all((Z >= 0) & (Z <= 1))


def small_dataset():
    obs = np.arange(2 * 5 * 2, dtype=float).reshape(2, 5, 2)
    labels = np.array([[0, 1, 0, 1, 1], [1, 1, 0, 0, 0]], dtype=float)
    return SequenceDataset(obs, labels, [3, 5])


def test_dataset_validation():
    with pytest.raises(ValueError):
        SequenceDataset(np.zeros((2, 3, 1)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        SequenceDataset(np.zeros((2, 3, 1)), np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        SequenceDataset(np.zeros((1, 2, 1)), np.array([[np.nan, 0.0]]))
    ds = small_dataset()
    assert ds.obs[0, 3:].sum() == 0 and ds.labels[0, 3:].sum() == 0
    with pytest.raises(ValueError):
        ds.obs[0, 0, 0] = 1.0


def test_filtration_examples():
    ds = small_dataset()
    full = filtration(ds, ds.T)
    assert [len(s) for s in full] == [3, 5]
    assert all(len(s) == 1 for s in filtration(ds, 1))
    np.testing.assert_array_equal(filtration(ds, 4).lengths, [3, 4])
    with pytest.raises(IndexError):
        filtration(ds, 0)
    with pytest.raises(IndexError):
        Filtration(ds, 6)


def test_filtration_monotone():
    ds = small_dataset()
    for t in range(1, ds.T):
        for short, long in zip(filtration(ds, t), filtration(ds, t + 1)):
            for (o1, e1), (o2, e2) in zip(short, long):
                assert np.array_equal(o1, o2) and e1 == e2
            assert len(long) >= len(short)


def test_dataset_csv_round_trip(tmp_path):
    ds = small_dataset()
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    back = SequenceDataset.from_csv(path)
    np.testing.assert_array_equal(back.obs, ds.obs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.lengths, ds.lengths)


def test_dataset_csv_rejects_gaps(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("instance_id,t,e,o1\n0,1,0,0.5\n0,3,1,0.1\n")
    with pytest.raises(ValueError, match="t=3"):
        SequenceDataset.from_csv(path)
    path.write_text("instance_id,t,e,o1\n0,1,0,0.5,9\n")
    with pytest.raises(ValueError):
        SequenceDataset.from_csv(path)


def test_steps_tensor_appends_label():
    ds = small_dataset()
    S = ds.steps_tensor()
    assert S.shape == (2, 5, 3)
    np.testing.assert_array_equal(S[..., -1], ds.labels)


def test_acquisition_set():
    a = AcquisitionSet(2)
    a.append([0.1], 0.3)
    a.append([0.2], 0.9)
    assert len(a) == 2 and a.best() == ([0.2], 0.9)


def test_run_config_validation():
    RunConfig(n_iters=0, m_train=0)
    with pytest.raises(ValueError):
        RunConfig(n_init=0)
    with pytest.raises(ValueError):
        RunConfig(feature_dim=0)
    with pytest.raises(ValueError):
        RunConfig(n_iters=-1)
