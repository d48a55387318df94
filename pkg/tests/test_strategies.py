import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import diversity_reference, qbc_reference
from releap.errors import PreconditionError
from releap.models import LogisticModel, predict_proba
from releap.strategies import (CommitteeConfig, StrategyScoreTable, combine_and_rank,
                               combined_scores, committee_probabilities, diversity_scores,
                               entropy, normalize, qbc_from_probabilities, qbc_scores,
                               random_scores, uncertainty_scores)


def test_entropy_values():
    assert abs(entropy(0.5) - math.log(2)) <= 1e-12
    assert entropy(0.9) == pytest.approx(0.325083, abs=5e-7)
    assert entropy(0.0) < 1e-10 and entropy(1.0) < 1e-10


@given(st.floats(0, 1))
def test_entropy_symmetric(p):
    assert entropy(p) == pytest.approx(entropy(1 - p), abs=1e-12)


def test_uncertainty_uses_model_probabilities():
    m = LogisticModel(np.array([1.0]), 0.0, 0.0, True, 0)
    x = np.array([[0.0], [2.0]])
    assert np.allclose(uncertainty_scores(m, x), entropy(predict_proba(m, x)))


def test_diversity_examples():
    assert diversity_scores([[1.0, 2.0]], [[1.0, 2.0]])[0] == pytest.approx(0, abs=1e-15)
    ortho = diversity_scores([[0.0, 0.0, 1.0]], [[1.0, 0, 0], [0, 1.0, 0], [2.0, 3.0, 0]], k=10)
    assert ortho[0] == pytest.approx(1.0, abs=1e-15)
    # zero-norm row: distance 1 to everything
    assert diversity_scores([[0.0, 0.0]], [[1.0, 1.0]])[0] == 1.0
    labeled = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    pool = [[2.0, 0.5], [-1.0, 0.3], [0.2, 0.9]]
    got = diversity_scores(pool, labeled, k=2, lam=0.5)
    assert np.allclose(got, diversity_reference(pool, labeled, 2, 0.5), atol=1e-12, rtol=0)


def test_diversity_toy_table_k10():
    rng = np.random.default_rng(12)
    labeled = rng.standard_normal((25, 5))
    pool = rng.standard_normal((15, 5))
    got = diversity_scores(pool, labeled, k=10, lam=0.5)
    assert np.max(np.abs(got - diversity_reference(pool, labeled, 10, 0.5))) <= 1e-10


def test_diversity_empty_labeled():
    with pytest.raises(PreconditionError):
        diversity_scores([[1.0]], np.zeros((0, 1)))


def test_diversity_shrinks_as_duplicates_are_labeled():
    rng = np.random.default_rng(0)
    pool = rng.standard_normal((10, 3))
    labeled = rng.standard_normal((10, 3))
    before = diversity_scores(pool, labeled, k=3)
    covered = diversity_scores(pool, np.vstack([labeled] + [pool] * 3), k=3)
    assert np.all(before >= 0)
    assert np.allclose(covered, 0, atol=1e-12)


def test_qbc_formula_examples():
    assert qbc_from_probabilities(np.full((7, 1), 0.5))[0] == pytest.approx(0.1 * math.log(2), abs=1e-12)
    got = qbc_from_probabilities(np.array([[0.0], [1.0]]))[0]
    assert got == pytest.approx(0.25 + 0.1 * math.log(2), abs=1e-12)
    assert got == pytest.approx(0.319315, abs=5e-7)


def _toy_labeled(seed=5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((30, 4))
    y = (x[:, 0] + 0.5 * rng.standard_normal(30) > 0).astype(float)
    pool = rng.standard_normal((12, 4))
    return x, y, pool


def test_qbc_step_by_step_recomputation():
    x, y, pool = _toy_labeled()
    cfg = CommitteeConfig(m=7, dropout_p=0.1, l2_jitter=0.7, entropy_weight=0.1)
    got = qbc_scores(x, y, pool, cfg, np.random.default_rng(77))

    expected = qbc_reference(x, y, pool, 77)
    assert np.max(np.abs(got - np.array(expected))) <= 1e-10


def test_qbc_deterministic_and_keeps_a_column():
    x, y, pool = _toy_labeled()
    cfg = CommitteeConfig()
    a = qbc_scores(x, y, pool, cfg, np.random.default_rng(1))
    b = qbc_scores(x, y, pool, cfg, np.random.default_rng(1))
    assert np.array_equal(a, b)
    # dropout 0.99 nearly always drops everything; the fallback keeps one column
    probs = committee_probabilities(x, y, pool, CommitteeConfig(dropout_p=0.99),
                                    np.random.default_rng(2))
    assert probs.shape == (7, 12) and np.all(np.isfinite(probs))


def test_qbc_empty_labeled():
    with pytest.raises(PreconditionError):
        qbc_scores(np.zeros((0, 2)), np.zeros(0), np.ones((3, 2)), CommitteeConfig(),
                   np.random.default_rng(0))


def test_committee_config_problems():
    assert CommitteeConfig(m=0, dropout_p=1.0).problems()


def test_random_scores():
    assert random_scores(0, np.random.default_rng(0)).size == 0
    assert np.array_equal(random_scores(5, np.random.default_rng(3)),
                          random_scores(5, np.random.default_rng(3)))
    assert 0.49 <= random_scores(100_000, np.random.default_rng(4)).mean() <= 0.51


def test_normalize_examples():
    assert normalize([1, 2, 3]).tolist() == [0, 0.5, 1]
    assert normalize([4, 4]).tolist() == [0.5, 0.5]
    with pytest.raises(PreconditionError):
        normalize([])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20), st.floats(0.1, 10),
       st.floats(-100, 100))
def test_normalize_affine_invariant(v, a, b):
    v = np.array(v)
    if np.ptp(v) < 1e-3:
        return
    out = normalize(v)
    assert np.all((out >= 0) & (out <= 1))
    assert np.allclose(normalize(a * v + b), out, atol=1e-9)


def _table():
    t = StrategyScoreTable(pool_ids=np.array([10, 11, 12, 13, 14]))
    t.add("uncertainty", np.array([0.1, 0.5, 0.3, 0.9, 0.7]))
    t.add("diversity", np.array([4.0, 2.0, 0.0, 1.0, 3.0]))
    t.add("qbc", np.array([0.2, 0.3, 0.6, 0.4, 1.0]))
    return t


def test_combined_equal_weights_by_hand():
    t = _table()
    u = [0.0, 0.5, 0.25, 1.0, 0.75]
    d = [1.0, 0.5, 0.0, 0.25, 0.75]
    q = [0.0, 0.125, 0.5, 0.25, 1.0]
    w = np.array([1, 1, 1]) / 3
    expected = [(a + b + c) / 3 for a, b, c in zip(u, d, q)]
    assert np.allclose(combined_scores(t, w), expected, atol=1e-15)
    ids = combine_and_rank(t, w, 5, np.random.default_rng(0))
    assert ids.tolist() == [14, 13, 11, 10, 12]


def test_basis_weight_reproduces_single_ranking():
    t = _table()
    ids = combine_and_rank(t, [1, 0, 0], 3, np.random.default_rng(0))
    assert ids.tolist() == [13, 14, 11]


def test_jitter_breaks_ties_and_batch_truncates():
    t = StrategyScoreTable(pool_ids=np.array([0, 1]))
    t.add("uncertainty", np.array([0.3, 0.3]))
    t.add("diversity", np.array([0.3, 0.3]))
    t.add("qbc", np.array([0.3, 0.3]))
    firsts = {int(combine_and_rank(t, [1, 0, 0], 1, np.random.default_rng(s))[0]) for s in range(20)}
    assert firsts == {0, 1}
    assert len(combine_and_rank(t, [0, 1, 0], 10, np.random.default_rng(0))) == 2
    empty = StrategyScoreTable(pool_ids=np.zeros(0, dtype=int))
    assert len(combine_and_rank(empty, [1, 0, 0], 3, np.random.default_rng(0))) == 0


def test_off_simplex_weights_rejected():
    with pytest.raises(PreconditionError):
        combined_scores(_table(), [0.5, 0.6, 0.0])
