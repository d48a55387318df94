import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from releap.errors import ConfigError, DegenerateStratumError
from releap.synthcohort import (Cohort, CohortConfig, SurvivalConfig, generate_cohort,
                                load_cohort_csv, save_cohort_csv, split_cohort)


def test_default_cohort_shape():
    c = generate_cohort(CohortConfig(n=1000), np.random.default_rng(0))
    assert c.n == 1000
    assert c.x1.shape == (1000, 5) and c.x2.shape == (1000, 4)
    assert set(np.unique(c.s_true)) <= {0, 1}
    assert np.all((c.s_star > 0) & (c.s_star < 1))


def test_proxy_correlation_at_seed_42():
    c = generate_cohort(CohortConfig(), np.random.default_rng(42))
    r = np.corrcoef(c.s_star, c.s_true)[0, 1]
    assert 0.3 < r < 0.95


def test_noiseless_proxy_limit():
    c = generate_cohort(CohortConfig(n=200, sigma_proxy=0.0, proxy_scale=60.0),
                        np.random.default_rng(1))
    assert np.all(np.abs(c.s_star - c.s_true) < 1e-20)


def test_generation_is_bitwise_deterministic():
    a = generate_cohort(CohortConfig(n=300), np.random.default_rng(7))
    b = generate_cohort(CohortConfig(n=300), np.random.default_rng(7))
    assert a.digest() == b.digest()
    assert generate_cohort(CohortConfig(n=300, seed=3)).digest() == \
        generate_cohort(CohortConfig(n=300, seed=3)).digest()


def test_s_true_rate_matches_mean_link_probability():
    c = generate_cohort(CohortConfig(n=100_000, survival=None), np.random.default_rng(5))
    assert abs(c.s_true.mean() - c.p_true.mean()) < 0.01


def test_survival_sanity():
    c = generate_cohort(CohortConfig(), np.random.default_rng(11))
    horizon = SurvivalConfig().censor_horizon
    assert 0 < c.event.mean() < 1
    assert c.t[c.event == 1].mean() < horizon
    assert np.all(c.t[c.event == 0] == horizon)


def test_outcome_follows_linear_predictor():
    c = generate_cohort(CohortConfig(n=50_000, survival=None), np.random.default_rng(2))
    p = expit(3.0 * c.s_true + c.x2 @ c.beta2)
    assert abs(c.y.mean() - p.mean()) < 0.01


def test_threshold_variant():
    c = generate_cohort(CohortConfig(n=500, threshold_s_true=True), np.random.default_rng(0))
    assert np.array_equal(c.s_true, (c.p_true >= 0.5).astype(int))


def test_invalid_config_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        generate_cohort(CohortConfig(n=0, sigma_proxy=-1.0))
    assert len(err.value.problems) == 2


def _toy(y):
    y = np.asarray(y)
    n = len(y)
    z = np.zeros((n, 1))
    return Cohort(x1=z, x2=z, s_true=y, p_true=z[:, 0], s_star=z[:, 0], y=y,
                  t=z[:, 0], event=y)


def test_split_small_stratified_example():
    cohort = _toy([1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
    for seed in range(20):
        sp = split_cohort(cohort, 0.2, np.random.default_rng(seed))
        assert len(sp.valid_ids) == 2
        assert cohort.y[sp.valid_ids].sum() <= 1


def test_split_default_sizes_and_determinism():
    c = generate_cohort(CohortConfig(), np.random.default_rng(0))
    a = split_cohort(c, 0.2, np.random.default_rng(9))
    b = split_cohort(c, 0.2, np.random.default_rng(9))
    assert len(a.valid_ids) == 200
    assert np.array_equal(a.valid_ids, b.valid_ids) and np.array_equal(a.train_ids, b.train_ids)


def test_split_single_class_rejected():
    with pytest.raises(DegenerateStratumError):
        split_cohort(_toy([0, 0, 0, 0]), 0.5, np.random.default_rng(0))


@given(st.lists(st.integers(0, 1), min_size=2, max_size=80), st.floats(0.05, 0.95),
       st.integers(0, 2**32 - 1))
def test_split_partitions_and_rounds_per_stratum(y, frac, seed):
    y = np.array(y)
    if len(np.unique(y)) < 2:
        return
    cohort = _toy(y)
    sp = split_cohort(cohort, frac, np.random.default_rng(seed))
    both = np.concatenate([sp.train_ids, sp.valid_ids])
    assert sorted(both.tolist()) == list(range(len(y)))
    for cls in (0, 1):
        size = int((y == cls).sum())
        assert int((y[sp.valid_ids] == cls).sum()) == int(np.floor(frac * size + 0.5))


def test_csv_round_trip(tmp_path):
    c = generate_cohort(CohortConfig(n=40), np.random.default_rng(3))
    path = tmp_path / "cohort.csv"
    save_cohort_csv(c, path)
    back = load_cohort_csv(path)
    assert back.digest() == c.digest()
