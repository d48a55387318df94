"""The budgeted label-replacement environment and the per-episode iteration cycle."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import (PolicyNet, PPOConfig, RewardTracker, Transition, build_state,
                    compute_lookahead_return, metric_trend, ppo_update, sample_action,
                    shaped_reward)
from .errors import ConfigError, InvariantViolation
from .metrics import MetricsReport, logistic_report, stratified_report, survival_report
from .models import (Standardizer, cox_risk_score, design_matrix, fit_cox, fit_logistic,
                     predict_proba)
from .strategies import (BASIS, CommitteeConfig, StrategyScoreTable, combine_and_rank,
                         committee_probabilities, diversity_scores, entropy,
                         qbc_from_probabilities, random_scores)
from .synthcohort import Cohort, SplitIndex

STRATEGIES = ("releap", "uncertainty", "diversity", "qbc", "random", "proxy_only", "oracle")
FIXED_WEIGHTS = {
    "uncertainty": (1.0, 0.0, 0.0),
    "diversity": (0.0, 1.0, 0.0),
    "qbc": (0.0, 0.0, 1.0),
}
MODES = ("logistic", "survival")
REWARD_MODES = ("shaped", "lookahead")


@dataclass(frozen=True)
class LoopConfig:
    mode: str = "logistic"
    seed_size: int = 40
    batch_size: int = 40
    n_iterations: int = 10
    strategy: str = "releap"
    reward_mode: str = "shaped"
    mirror_validation: bool = True
    k_neighbors: int = 10
    diversity_lambda: float = 0.5
    committee: CommitteeConfig = field(default_factory=CommitteeConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    window: int = 5
    lookahead_alpha: float = 0.5
    lookahead_gamma: float = 0.9
    lookahead_k: int = 2
    target_fpr: float = 0.1
    l2: float | None = None
    keep_max: int | None = None

    def problems(self, pool_size: int | None = None) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}")
        if self.strategy not in STRATEGIES:
            out.append(f"strategy must be one of {STRATEGIES}")
        if self.reward_mode not in REWARD_MODES:
            out.append(f"reward_mode must be one of {REWARD_MODES}")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.n_iterations < 0:
            out.append("n_iterations must be >= 0")
        if self.seed_size < 0:
            out.append("seed_size must be >= 0")
        if self.seed_size < 1 and self.strategy in ("releap", "uncertainty", "diversity", "qbc"):
            out.append(f"seed_size must be >= 1 for strategy {self.strategy}")
        if pool_size is not None and self.seed_size + self.batch_size * self.n_iterations > pool_size:
            out.append(f"seed_size + batch_size * n_iterations exceeds the training pool ({pool_size})")
        if self.k_neighbors < 1:
            out.append("k_neighbors must be >= 1")
        if self.window < 1:
            out.append("window must be >= 1")
        if not 0 <= self.lookahead_alpha <= 1:
            out.append("lookahead_alpha must lie in [0, 1]")
        if self.lookahead_k < 1:
            out.append("lookahead_k must be >= 1")
        if not 0 < self.target_fpr < 1:
            out.append("target_fpr must lie in (0, 1)")
        if self.l2 is not None and self.l2 < 0:
            out.append("l2 must be >= 0")
        if self.keep_max is not None and self.keep_max < 1:
            out.append("keep_max must be >= 1")
        out += self.committee.problems() + self.ppo.problems()
        return out

    def validate(self, pool_size: int | None = None) -> None:
        problems = self.problems(pool_size)
        if problems:
            raise ConfigError(problems)


# -- ledger ---------------------------------------------------------------------

@dataclass
class LabelLedger:
    ids: np.ndarray
    s_current: np.ndarray
    labeled: np.ndarray
    seed_size: int
    budget_total: int
    budget_used: int = 0
    seed_imbalance: int = 0
    queried: list = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return int(self.labeled[self.ids].sum())

    @property
    def budget_remaining(self) -> int:
        return self.budget_total - self.budget_used

    def labeled_ids(self) -> np.ndarray:
        return self.ids[self.labeled[self.ids]]

    def unlabeled_ids(self) -> np.ndarray:
        return self.ids[~self.labeled[self.ids]]

    def copy(self) -> "LabelLedger":
        return replace(self, s_current=self.s_current.copy(), labeled=self.labeled.copy(),
                       queried=list(self.queried))

    def check(self, cohort: Cohort) -> None:
        lab = self.labeled_ids()
        if not np.array_equal(self.s_current[lab], cohort.s_true[lab].astype(float)):
            raise InvariantViolation("a labeled patient's S differs from S_true")
        if len(lab) != self.seed_size + self.budget_used:
            raise InvariantViolation(
                f"{len(lab)} labeled but seed {self.seed_size} + used {self.budget_used}")
        if len(set(self.queried)) != len(self.queried):
            raise InvariantViolation("a patient was queried twice")
        if self.budget_used > self.budget_total:
            raise InvariantViolation("budget overspent")


def init_seed(cohort: Cohort, ids, seed_size: int, rng: np.random.Generator,
              budget_total: int | None = None) -> LabelLedger:
    """Label a seed set balanced on S_true; a short class is topped up from the other."""
    ids = np.asarray(ids, dtype=np.int64)
    if seed_size > len(ids):
        raise ConfigError(f"seed_size {seed_size} exceeds the pool of {len(ids)}")
    s_current = np.asarray(cohort.s_star, dtype=float).copy()
    labeled = np.zeros(cohort.n, dtype=bool)
    pos = ids[cohort.s_true[ids] == 1]
    neg = ids[cohort.s_true[ids] == 0]
    want_pos = seed_size // 2
    want_neg = seed_size - want_pos
    take_pos = min(want_pos, len(pos))
    take_neg = min(want_neg, len(neg))
    deficit = seed_size - take_pos - take_neg
    if deficit:
        if take_pos < want_pos:
            take_neg += deficit
        else:
            take_pos += deficit
    chosen = np.concatenate([rng.permutation(pos)[:take_pos], rng.permutation(neg)[:take_neg]])
    labeled[chosen] = True
    s_current[chosen] = cohort.s_true[chosen]
    if budget_total is None:
        budget_total = len(ids) - seed_size
    return LabelLedger(ids=ids, s_current=s_current, labeled=labeled, seed_size=seed_size,
                       budget_total=budget_total, seed_imbalance=deficit)


def acquire_batch(ledger: LabelLedger, selected, cohort: Cohort) -> LabelLedger:
    selected = np.asarray(selected, dtype=np.int64)[: max(ledger.budget_remaining, 0)]
    if len(selected) == 0:
        return ledger
    if len(np.unique(selected)) != len(selected):
        raise InvariantViolation("duplicate patients in one batch")
    if np.any(ledger.labeled[selected]):
        raise InvariantViolation("re-query of an already labeled patient")
    if not np.all(np.isin(selected, ledger.ids)):
        raise InvariantViolation("selected patient outside the ledger's partition")
    ledger.s_current[selected] = cohort.s_true[selected]
    ledger.labeled[selected] = True
    ledger.budget_used += len(selected)
    ledger.queried.extend(int(i) for i in selected)
    return ledger


def mirror_count(train_batch: int, pool_ratio: float) -> int:
    return int(math.ceil(train_batch * pool_ratio - 1e-9))


def mirror_validation(valid_ledger: LabelLedger, weights, valid_table: StrategyScoreTable,
                      n_replace: int, rng: np.random.Generator, cohort: Cohort,
                      names=BASIS) -> LabelLedger:
    """Overwrite S for the top-ranked validation patients; uses no training budget."""
    if n_replace <= 0 or len(valid_table.pool_ids) == 0:
        return valid_ledger
    chosen = combine_and_rank(valid_table, weights, n_replace, rng, names)
    return acquire_batch(valid_ledger, chosen, cohort)


# -- scoring ----------------------------------------------------------------------

def _strategy_target(cohort: Cohort, mode: str) -> np.ndarray:
    return cohort.y if mode == "logistic" else cohort.event


def score_pools(cohort: Cohort, train: LabelLedger, valid: LabelLedger | None, names,
                cfg: LoopConfig, rng: np.random.Generator, iteration: int = 0):
    """Strategy tables for the training pool and (optionally) the validation pool.

    Features are [S, X2] standardized on the current labeled training rows;
    the uncertainty model and the committee are fit on those rows only.
    """
    train_pool = train.unlabeled_ids()
    valid_pool = valid.unlabeled_ids() if valid is not None else np.zeros(0, dtype=np.int64)
    t_table = StrategyScoreTable(pool_ids=train_pool, iteration=iteration)
    v_table = StrategyScoreTable(pool_ids=valid_pool, iteration=iteration)
    lab = train.labeled_ids()
    target = _strategy_target(cohort, cfg.mode)
    cut = len(train_pool)

    needs_feats = any(n in names for n in BASIS)
    if needs_feats:
        raw_t = design_matrix(train.s_current[train_pool], cohort.x2[train_pool])
        raw_l = design_matrix(train.s_current[lab], cohort.x2[lab])
        scaler = Standardizer.fit(raw_l)
        z_t = scaler.transform(raw_t)
        z_l = scaler.transform(raw_l)
        if valid is not None:
            z_v = scaler.transform(design_matrix(valid.s_current[valid_pool], cohort.x2[valid_pool]))
        else:
            z_v = np.zeros((0, z_t.shape[1]))
        z_pools = np.vstack([z_t, z_v])

    def put(name, scores):
        if len(train_pool):
            t_table.add(name, scores[:cut])
        if len(valid_pool):
            v_table.add(name, scores[cut:])

    for name in names:
        if name == "uncertainty":
            model = fit_logistic(z_l, target[lab], l2=cfg.l2)
            put(name, entropy(predict_proba(model, z_pools)))
        elif name == "diversity":
            d_t = diversity_scores(z_t, z_l, cfg.k_neighbors, cfg.diversity_lambda)
            d_v = np.zeros(0)
            if len(valid_pool):
                v_lab = valid.labeled_ids()
                ref = (scaler.transform(design_matrix(valid.s_current[v_lab], cohort.x2[v_lab]))
                       if len(v_lab) else z_l)
                d_v = diversity_scores(z_v, ref, cfg.k_neighbors, cfg.diversity_lambda)
            put(name, np.concatenate([d_t, d_v]))
        elif name == "qbc":
            probs = committee_probabilities(z_l, target[lab], z_pools, cfg.committee, rng, cfg.l2)
            put(name, qbc_from_probabilities(probs, cfg.committee.entropy_weight))
        elif name == "random":
            put(name, random_scores(len(train_pool) + len(valid_pool), rng))
        else:
            raise ConfigError(f"unknown strategy {name}")
    return t_table, (v_table if valid is not None else None)


# -- downstream -------------------------------------------------------------------

@dataclass
class DownstreamResult:
    report: MetricsReport
    coefficients: np.ndarray | None
    subgroups: dict | None = None
    error: str | None = None


def retrain_downstream(cohort: Cohort, train: LabelLedger, valid: LabelLedger,
                       split: SplitIndex, cfg: LoopConfig, subgroup=None) -> DownstreamResult:
    """Fit on the whole mixed-label training partition, evaluate on validation.

    ``subgroup`` is an optional boolean vector over the cohort used for
    stratified reports.
    """
    tr, va = split.train_ids, split.valid_ids
    x_tr = design_matrix(train.s_current[tr], cohort.x2[tr])
    x_va = design_matrix(valid.s_current[va], cohort.x2[va])
    scaler = Standardizer.fit(x_tr)
    z_tr, z_va = scaler.transform(x_tr), scaler.transform(x_va)
    subgroups = None
    try:
        if cfg.mode == "logistic":
            model = fit_logistic(z_tr, cohort.y[tr], l2=cfg.l2)
            scores = predict_proba(model, z_va)
            report = logistic_report(scores, cohort.y[va], cfg.target_fpr)
            coef = np.append(model.weights, model.intercept)
        else:
            model = fit_cox(z_tr, cohort.t[tr], cohort.event[tr], l2=cfg.l2, keep_max=cfg.keep_max)
            scores = cox_risk_score(model, z_va)
            report = survival_report(scores, cohort.t[va], cohort.event[va])
            coef = model.weights.copy()
    except (ValueError, ArithmeticError) as exc:
        return DownstreamResult(report=MetricsReport(n_eval=len(va)), coefficients=None,
                                error=f"{type(exc).__name__}: {exc}")
    if subgroup is not None:
        subgroups = stratified_report(cfg.mode, scores, np.asarray(subgroup)[va],
                                      labels=cohort.y[va], t=cohort.t[va],
                                      event=cohort.event[va], target_fpr=cfg.target_fpr)
    return DownstreamResult(report=report, coefficients=coef, subgroups=subgroups)


# -- episode ----------------------------------------------------------------------

@dataclass
class IterationLog:
    iteration: int
    n_labeled: int
    n_valid_labeled: int
    weights: tuple | None
    reward_raw: float | None
    reward_norm: float | None
    report: MetricsReport
    subgroups: dict | None = None
    coefficients: np.ndarray | None = None
    wall_time: float = 0.0
    error: str | None = None


@dataclass
class RunResult:
    strategy: str
    logs: list
    queried_ids: list = field(default_factory=list)
    ppo_stats: list = field(default_factory=list)
    train_ledger: LabelLedger | None = None
    valid_ledger: LabelLedger | None = None


def seed_ledgers(cohort: Cohort, split: SplitIndex, cfg: LoopConfig, rng: np.random.Generator):
    """Balanced training seed plus an all-proxy validation ledger."""
    budget = cfg.batch_size * cfg.n_iterations
    budget = min(budget, len(split.train_ids) - cfg.seed_size)
    train = init_seed(cohort, split.train_ids, cfg.seed_size, rng, budget_total=budget)
    valid = init_seed(cohort, split.valid_ids, 0, rng, budget_total=len(split.valid_ids))
    return train, valid


def pool_ratio(train: LabelLedger, valid: LabelLedger) -> float:
    """Unlabeled validation pool over unlabeled training pool, before acquisition."""
    n_train = len(train.unlabeled_ids())
    return len(valid.unlabeled_ids()) / n_train if n_train else 0.0


def _fixed_ledger(cohort: Cohort, ids, use_truth: bool) -> LabelLedger:
    s = (cohort.s_true if use_truth else cohort.s_star).astype(float).copy()
    labeled = np.zeros(cohort.n, dtype=bool)
    if use_truth:
        labeled[ids] = True
    ids = np.asarray(ids, dtype=np.int64)
    return LabelLedger(ids=ids, s_current=s, labeled=labeled,
                       seed_size=len(ids) if use_truth else 0, budget_total=0)


def _log_from(it, train, valid, res: DownstreamResult, weights=None, raw=None, norm=None,
              started=None):
    return IterationLog(iteration=it, n_labeled=train.n_labeled, n_valid_labeled=valid.n_labeled,
                        weights=None if weights is None else tuple(float(w) for w in weights),
                        reward_raw=raw, reward_norm=norm, report=res.report,
                        subgroups=res.subgroups, coefficients=res.coefficients,
                        wall_time=0.0 if started is None else time.perf_counter() - started,
                        error=res.error)


def run_episode(cohort: Cohort, split: SplitIndex, cfg: LoopConfig, rng: np.random.Generator,
                policy: PolicyNet | None = None, seeds: tuple | None = None,
                subgroup=None) -> RunResult:
    """One full acquisition episode for ``cfg.strategy``.

    Iteration 0 is the seed-stage evaluation. ``seeds`` optionally supplies
    (train, valid) seed ledgers so several strategies can share one seed set.
    """
    cfg.validate(len(split.train_ids))
    strategy = cfg.strategy
    started = time.perf_counter()

    if strategy in ("proxy_only", "oracle"):
        truth = strategy == "oracle"
        train = _fixed_ledger(cohort, split.train_ids, truth)
        valid = _fixed_ledger(cohort, split.valid_ids, truth)
        res = retrain_downstream(cohort, train, valid, split, cfg, subgroup)
        logs = [_log_from(it, train, valid, res, started=started)
                for it in range(cfg.n_iterations + 1)]
        return RunResult(strategy=strategy, logs=logs, train_ledger=train, valid_ledger=valid)

    if seeds is None:
        train, valid = seed_ledgers(cohort, split, cfg, rng)
    else:
        train, valid = seeds[0].copy(), seeds[1].copy()
    mirror_on = cfg.mirror_validation
    if strategy == "releap" and policy is None:
        policy = PolicyNet(rng, hidden=cfg.ppo.hidden)

    names = BASIS if strategy == "releap" else (strategy,)
    rank_names = BASIS if strategy != "random" else ("random",)
    target = _strategy_target(cohort, cfg.mode)
    tracker = RewardTracker(h=cfg.window)

    res = retrain_downstream(cohort, train, valid, split, cfg, subgroup)
    logs = [_log_from(0, train, valid, res, started=started)]
    metric = res.report.primary(cfg.mode)
    history = [metric if metric is not None else 0.5]
    tracker.window.append(history[-1])
    buffer: list[Transition] = []

    for it in range(1, cfg.n_iterations + 1):
        if train.budget_remaining <= 0 or len(train.unlabeled_ids()) == 0:
            break
        t0 = time.perf_counter()
        t_table, v_table = score_pools(cohort, train, valid if mirror_on else None, names,
                                       cfg, rng, iteration=it)
        state = None
        if strategy == "releap":
            lab = train.labeled_ids()
            state = build_state(history, t_table, train.s_current[lab], target[lab],
                                train.budget_remaining / max(train.budget_total, 1), cfg.window)
            weights, log_prob, value = sample_action(policy, state, rng)
        elif strategy == "random":
            weights, log_prob, value = np.array([1.0]), 0.0, 0.0
        else:
            weights, log_prob, value = np.array(FIXED_WEIGHTS[strategy]), 0.0, 0.0

        ratio = pool_ratio(train, valid)
        batch = min(cfg.batch_size, train.budget_remaining)
        chosen = combine_and_rank(t_table, weights, batch, rng, rank_names)
        acquire_batch(train, chosen, cohort)
        if mirror_on and v_table is not None:
            mirror_validation(valid, weights, v_table, mirror_count(len(chosen), ratio), rng,
                              cohort, rank_names)
        train.check(cohort)
        valid.check(cohort)

        res = retrain_downstream(cohort, train, valid, split, cfg, subgroup)
        metric = res.report.primary(cfg.mode)
        m_t = metric if metric is not None else history[-1]
        history.append(m_t)
        slope, _ = metric_trend(history[-cfg.window:])
        progress = train.budget_used / max(train.budget_total, 1)
        raw, norm = shaped_reward(tracker, m_t, progress, slope > 0)
        done = (it == cfg.n_iterations or train.budget_remaining <= 0
                or len(train.unlabeled_ids()) == 0)
        if strategy == "releap":
            buffer.append(Transition(state=state, action=weights, log_prob=log_prob, value=value,
                                     reward=norm, next_state=None, done=done))
            if len(buffer) > 1:
                buffer[-2].next_state = state
        log_w = weights if strategy != "random" else None
        logs.append(_log_from(it, train, valid, res, log_w, raw, norm, started=t0))

    if strategy == "releap" and buffer:
        if cfg.reward_mode == "lookahead":
            for i, tr in enumerate(buffer):
                tr.reward = compute_lookahead_return(history, i + 1, cfg.lookahead_alpha,
                                                     cfg.lookahead_gamma, cfg.lookahead_k)
                logs[i + 1].reward_raw = logs[i + 1].reward_norm = tr.reward
        buffer[-1].done = True
        stats = ppo_update(policy, buffer, cfg.ppo)
        ppo_stats = [stats]
    else:
        ppo_stats = []

    return RunResult(strategy=strategy, logs=logs, queried_ids=list(train.queried),
                     ppo_stats=ppo_stats, train_ledger=train, valid_ledger=valid)
