"""Synthetic cohorts with a noisy proxy phenotype.

Causal structure: ``X1 -> S_true -> S*`` and ``(S_true, X2) -> Y``, with an
optional exponential-hazard event time driven by the same outcome predictor.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DegenerateStratumError


@dataclass(frozen=True)
class SurvivalConfig:
    baseline_rate: float = 0.02
    censor_horizon: float = 5.0


@dataclass(frozen=True)
class CohortConfig:
    n: int = 1000
    d_x1: int = 5
    d_x2: int = 4
    beta_s: float = 3.0
    sigma_link: float = 1.0
    sigma_proxy: float = 1.5
    proxy_scale: float = 2.0
    survival: SurvivalConfig | None = field(default_factory=SurvivalConfig)
    threshold_s_true: bool = False
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append("n must be >= 1")
        if self.d_x1 < 1:
            out.append("d_x1 must be >= 1")
        if self.d_x2 < 1:
            out.append("d_x2 must be >= 1")
        if self.sigma_link < 0:
            out.append("sigma_link must be >= 0")
        if self.sigma_proxy < 0:
            out.append("sigma_proxy must be >= 0")
        if self.proxy_scale < 0:
            out.append("proxy_scale must be >= 0")
        if self.survival is not None:
            if not self.survival.baseline_rate > 0:
                out.append("baseline_rate must be > 0")
            if not self.survival.censor_horizon > 0:
                out.append("censor_horizon must be > 0")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)


@dataclass
class Cohort:
    x1: np.ndarray
    x2: np.ndarray
    s_true: np.ndarray
    p_true: np.ndarray
    s_star: np.ndarray
    y: np.ndarray
    t: np.ndarray
    event: np.ndarray
    beta1: np.ndarray | None = None
    beta2: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.y)

    def digest(self) -> str:
        """SHA-256 over the array bytes; equal digests mean identical cohorts."""
        h = hashlib.sha256()
        for arr in (self.x1, self.x2, self.s_true, self.p_true, self.s_star,
                    self.y, self.t, self.event):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitIndex:
    train_ids: np.ndarray
    valid_ids: np.ndarray


def generate_cohort(cfg: CohortConfig, rng: np.random.Generator | None = None) -> Cohort:
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    beta1 = rng.standard_normal(cfg.d_x1)
    beta2 = rng.standard_normal(cfg.d_x2)
    x1 = rng.standard_normal((n, cfg.d_x1))
    x2 = rng.standard_normal((n, cfg.d_x2))

    eta = x1 @ beta1 + cfg.sigma_link * rng.standard_normal(n)
    p_true = expit(eta)
    u = rng.random(n)
    if cfg.threshold_s_true:
        s_true = (p_true >= 0.5).astype(np.int64)
    else:
        s_true = (u < p_true).astype(np.int64)

    proxy_noise = cfg.sigma_proxy * rng.standard_normal(n)
    s_star = expit(cfg.proxy_scale * (2 * s_true - 1) + proxy_noise)

    outcome_lp = cfg.beta_s * s_true + x2 @ beta2
    y = (rng.random(n) < expit(outcome_lp)).astype(np.int64)

    if cfg.survival is not None:
        rate = cfg.survival.baseline_rate * np.exp(outcome_lp)
        t_raw = rng.exponential(1.0, n) / rate
        horizon = cfg.survival.censor_horizon
        event = (t_raw < horizon).astype(np.int64)
        t = np.minimum(t_raw, horizon)
    else:
        t = np.zeros(n)
        event = np.zeros(n, dtype=np.int64)

    return Cohort(x1=x1, x2=x2, s_true=s_true, p_true=p_true, s_star=s_star,
                  y=y, t=t, event=event, beta1=beta1, beta2=beta2)


def split_cohort(cohort: Cohort, valid_frac: float, rng: np.random.Generator) -> SplitIndex:
    """Stratified split on ``y``; each stratum contributes round(frac * size) to validation."""
    if not 0 < valid_frac < 1:
        raise ConfigError(f"valid_frac must lie in (0, 1), got {valid_frac}")
    y = np.asarray(cohort.y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateStratumError("cannot stratify on a single-class outcome")
    train, valid = [], []
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(np.floor(valid_frac * len(idx) + 0.5))
        valid.append(idx[:k])
        train.append(idx[k:])
    return SplitIndex(train_ids=np.sort(np.concatenate(train)),
                      valid_ids=np.sort(np.concatenate(valid)))


def save_cohort_csv(cohort: Cohort, path: str | Path) -> None:
    d1, d2 = cohort.x1.shape[1], cohort.x2.shape[1]
    header = (["patient_id"] + [f"x1_{j}" for j in range(d1)] + [f"x2_{j}" for j in range(d2)]
              + ["s_true", "p_true", "s_star", "y", "t", "event"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(cohort.n):
            row = [str(i)]
            row += [repr(float(v)) for v in cohort.x1[i]]
            row += [repr(float(v)) for v in cohort.x2[i]]
            row += [str(int(cohort.s_true[i])), repr(float(cohort.p_true[i])),
                    repr(float(cohort.s_star[i])), str(int(cohort.y[i])),
                    repr(float(cohort.t[i])), str(int(cohort.event[i]))]
            w.writerow(row)


def load_cohort_csv(path: str | Path) -> Cohort:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    cols = {name: j for j, name in enumerate(header)}
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    x1_cols = [j for name, j in cols.items() if name.startswith("x1_")]
    x2_cols = [j for name, j in cols.items() if name.startswith("x2_")]
    return Cohort(
        x1=data[:, x1_cols], x2=data[:, x2_cols],
        s_true=data[:, cols["s_true"]].astype(np.int64),
        p_true=data[:, cols["p_true"]],
        s_star=data[:, cols["s_star"]],
        y=data[:, cols["y"]].astype(np.int64),
        t=data[:, cols["t"]],
        event=data[:, cols["event"]].astype(np.int64),
    )
