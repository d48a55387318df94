"""Query-scoring strategies and their weighted combination.

Uncertainty, diversity and query-by-committee form the action basis of the
agent; random scoring is a baseline only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .models import PROB_CLIP, LogisticModel, fit_logistic, predict_proba

BASIS = ("uncertainty", "diversity", "qbc")


@dataclass(frozen=True)
class CommitteeConfig:
    m: int = 7
    dropout_p: float = 0.1
    l2_jitter: float = 0.7
    entropy_weight: float = 0.1

    def problems(self) -> list[str]:
        out = []
        if self.m < 2:
            out.append("committee size must be >= 2")
        if not 0 <= self.dropout_p < 1:
            out.append("dropout_p must lie in [0, 1)")
        if self.l2_jitter < 0:
            out.append("l2_jitter must be >= 0")
        if self.entropy_weight < 0:
            out.append("entropy_weight must be >= 0")
        return out


@dataclass
class StrategyScoreTable:
    pool_ids: np.ndarray
    raw: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    iteration: int = 0

    def add(self, name: str, raw: np.ndarray) -> None:
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (len(self.pool_ids),):
            raise PreconditionError(f"{name} scores misaligned with the pool")
        self.raw[name] = raw
        self.normalized[name] = normalize(raw) if len(raw) else raw


def entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    return -p * np.log(p) - (1 - p) * np.log1p(-p)


def uncertainty_scores(model: LogisticModel, pool) -> np.ndarray:
    return entropy(predict_proba(model, pool))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None]


def diversity_scores(pool_feats, labeled_feats, k: int = 10, lam: float = 0.5) -> np.ndarray:
    """mean + lam * std of cosine distances to the k nearest labeled rows.

    Zero-norm rows have cosine similarity 0 with everything (distance 1).
    """
    pool_feats = np.asarray(pool_feats, dtype=float)
    labeled_feats = np.asarray(labeled_feats, dtype=float)
    if len(labeled_feats) == 0:
        raise PreconditionError("diversity needs a nonempty labeled set")
    if len(pool_feats) == 0:
        return np.zeros(0)
    dist = 1.0 - _unit_rows(pool_feats) @ _unit_rows(labeled_feats).T
    k_eff = min(k, dist.shape[1])
    if k_eff < dist.shape[1]:
        dist = np.partition(dist, k_eff - 1, axis=1)[:, :k_eff]
    return dist.mean(axis=1) + lam * dist.std(axis=1)


def committee_probabilities(labeled_x, labeled_y, pool, cfg: CommitteeConfig,
                            rng: np.random.Generator, base_l2: float | None = None) -> np.ndarray:
    """Member-by-pool matrix of predicted probabilities.

    Member m draws from its own child stream: a bootstrap resample, an L2
    multiplier exp(U(-j, j)), and an independent keep/drop mask per column.
    """
    labeled_x = np.asarray(labeled_x, dtype=float)
    labeled_y = np.asarray(labeled_y)
    pool = np.asarray(pool, dtype=float)
    n, d = labeled_x.shape
    if n == 0:
        raise PreconditionError("QBC needs a nonempty labeled set")
    if base_l2 is None:
        base_l2 = 1.0 / n
    probs = np.empty((cfg.m, len(pool)))
    for m, member_rng in enumerate(rng.spawn(cfg.m)):
        boot = member_rng.integers(0, n, size=n)
        l2 = base_l2 * np.exp(member_rng.uniform(-cfg.l2_jitter, cfg.l2_jitter))
        keep = member_rng.random(d) >= cfg.dropout_p
        if not keep.any():
            keep[member_rng.integers(d)] = True
        model = fit_logistic(labeled_x[boot][:, keep], labeled_y[boot], l2=l2)
        probs[m] = predict_proba(model, pool[:, keep])
    return probs


def qbc_from_probabilities(probs, entropy_weight: float = 0.1) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return probs.var(axis=0) + entropy_weight * entropy(probs.mean(axis=0))


def qbc_scores(labeled_x, labeled_y, pool, cfg: CommitteeConfig, rng,
               base_l2: float | None = None) -> np.ndarray:
    probs = committee_probabilities(labeled_x, labeled_y, pool, cfg, rng, base_l2)
    return qbc_from_probabilities(probs, cfg.entropy_weight)


def random_scores(pool_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(pool_size)


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise PreconditionError("cannot normalize an empty score vector")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def check_simplex(weights, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise PreconditionError(f"weights {w} are not on the simplex")
    return w


def combined_scores(table: StrategyScoreTable, weights, names=BASIS) -> np.ndarray:
    w = check_simplex(weights)
    total = np.zeros(len(table.pool_ids))
    for name, wa in zip(names, w):
        if wa != 0:
            total += wa * table.normalized[name]
    return total


def combine_and_rank(table: StrategyScoreTable, weights, batch: int,
                     rng: np.random.Generator, names=BASIS, jitter: float = 1e-6) -> np.ndarray:
    """Patient ids of the ``batch`` highest combined scores, best first."""
    n = len(table.pool_ids)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    combined = combined_scores(table, weights, names) + rng.uniform(0.0, jitter, n)
    order = np.argsort(-combined, kind="stable")[: min(batch, n)]
    return np.asarray(table.pool_ids)[order]
