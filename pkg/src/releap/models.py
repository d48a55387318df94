"""Downstream models: L2-penalized logistic regression and Breslow Cox regression.

Both are fit by damped Newton steps with step halving, so the penalized
objective never increases between iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .errors import NoEventsError, ShapeError

PROB_CLIP = 1e-12


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        # constant columns map to 0 instead of dividing by zero
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean=mean, scale=scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale


def design_matrix(s: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Column 0 is the phenotype estimate S, the rest are the outcome covariates."""
    return np.column_stack([np.asarray(s, dtype=float), np.asarray(x2, dtype=float)])


def design_columns(d_x2: int) -> list[str]:
    return ["S"] + [f"x2_{j}" for j in range(d_x2)]


def _newton_step(hess, grad):
    try:
        step = np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        step = None
    if step is None or not np.all(np.isfinite(step)):
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
    return step


def _halve_until_descent(theta, step, current, objective):
    """Backtrack along -step until the objective does not increase; None if it never does."""
    t = 1.0
    while t >= 1e-10:
        cand = theta - t * step
        val = objective(cand)
        if val <= current:
            return cand, val
        t *= 0.5
    return None, current


# -- logistic -----------------------------------------------------------------

@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    l2: float
    converged: bool
    n_iter: int
    degenerate: bool = False
    loss_history: list = field(default_factory=list, repr=False)


def logistic_loss(x, y, w, b, l2):
    """Mean negative log-likelihood plus (l2/2)||w||^2; the intercept is not penalized."""
    z = x @ w + b
    nll = -np.mean(y * log_expit(z) + (1 - y) * log_expit(-z))
    return nll + 0.5 * l2 * float(w @ w)


def logistic_grad(x, y, w, b, l2):
    """Gradient of :func:`logistic_loss`, intercept component last."""
    n = len(y)
    r = expit(x @ w + b) - y
    return np.append(x.T @ r / n + l2 * w, r.mean())


def fit_logistic(x, y, l2=None, tol=1e-8, max_iter=100) -> LogisticModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ShapeError(f"x has shape {x.shape} but y has length {len(y)}")
    n, d = x.shape
    if l2 is None:
        l2 = 1.0 / max(n, 1)

    rate = y.mean() if n else 0.5
    if n == 0 or rate in (0.0, 1.0):
        rate = min(max(rate, PROB_CLIP), 1 - PROB_CLIP)
        return LogisticModel(weights=np.zeros(d), intercept=float(np.log(rate / (1 - rate))),
                             l2=l2, converged=False, n_iter=0, degenerate=True)

    xa = np.column_stack([x, np.ones(n)])
    theta = np.zeros(d + 1)
    theta[-1] = np.log(rate / (1 - rate))
    penalty = np.append(np.full(d, l2), 0.0)

    loss = logistic_loss(x, y, theta[:-1], theta[-1], l2)
    history = [loss]
    converged = False
    steps = 0
    while True:
        p = expit(xa @ theta)
        grad = xa.T @ (p - y) / n + penalty * theta
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        if steps >= max_iter:
            break
        wts = p * (1 - p)
        hess = (xa.T * wts) @ xa / n + np.diag(penalty)
        step = _newton_step(hess, grad)
        cand, new_loss = _halve_until_descent(
            theta, step, loss, lambda th: logistic_loss(x, y, th[:-1], th[-1], l2))
        if cand is None:
            break
        theta, loss = cand, new_loss
        history.append(loss)
        steps += 1

    return LogisticModel(weights=theta[:-1].copy(), intercept=float(theta[-1]), l2=l2,
                         converged=converged, n_iter=steps, loss_history=history)


def predict_proba(model: LogisticModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(model.weights):
        raise ShapeError(f"expected {len(model.weights)} columns, got shape {x.shape}")
    return np.clip(expit(x @ model.weights + model.intercept), PROB_CLIP, 1 - PROB_CLIP)


# -- Cox ------------------------------------------------------------------------

@dataclass
class CoxModel:
    weights: np.ndarray
    l2: float
    converged: bool
    screened_columns: list
    n_iter: int = 0


class _RiskSets:
    """Sorted bookkeeping for Breslow sums over risk sets {j : t_j >= t_i}."""

    def __init__(self, t, event):
        t = np.asarray(t, dtype=float)
        self.order = np.argsort(-t, kind="stable")
        ts = -t[self.order]
        # last sorted position sharing each subject's time: covers all tied subjects
        self.last = np.searchsorted(ts, ts, side="right") - 1
        self.ev = np.asarray(event)[self.order] == 1
        self.n = len(t)


def _cox_pieces(x, rs: _RiskSets, w, need_hess=True):
    xs = x[rs.order]
    eta = xs @ w
    shift = eta.max() if len(eta) else 0.0
    r = np.exp(eta - shift)
    s0 = np.cumsum(r)[rs.last][rs.ev]
    s1 = np.cumsum(r[:, None] * xs, axis=0)[rs.last][rs.ev]
    loglik = float(np.sum(eta[rs.ev] - shift - np.log(s0)))
    xbar = s1 / s0[:, None]
    score = np.sum(xs[rs.ev] - xbar, axis=0)
    info = None
    if need_hess:
        s2 = np.cumsum(r[:, None, None] * xs[:, :, None] * xs[:, None, :], axis=0)[rs.last][rs.ev]
        info = np.sum(s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :], axis=0)
    return loglik, score, info


def cox_objective(x, t, event, w, l2):
    """Per-subject negative Breslow partial log-likelihood plus (l2/2)||w||^2."""
    x = np.asarray(x, dtype=float)
    rs = _RiskSets(t, event)
    loglik, _, _ = _cox_pieces(x, rs, np.asarray(w, dtype=float), need_hess=False)
    return -loglik / rs.n + 0.5 * l2 * float(np.dot(w, w))


def cox_grad(x, t, event, w, l2):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    rs = _RiskSets(t, event)
    _, score, _ = _cox_pieces(x, rs, w, need_hess=False)
    return -score / rs.n + l2 * w


def feature_screen(x, t, event, keep_max, always_keep=(0,)) -> list[int]:
    """Rank columns by the absolute standardized univariate Cox score test at w=0.

    Zero-variance columns are dropped; columns in ``always_keep`` survive
    regardless and count toward ``keep_max``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    keep_max = max(int(keep_max), 1)
    variable = [j for j in range(d) if np.ptp(x[:, j]) > 0]
    forced = [j for j in always_keep if j < d]
    if len(set(variable) | set(forced)) <= keep_max:
        return sorted(set(variable) | set(forced))

    rs = _RiskSets(t, event)
    xs = x[rs.order]
    cnt = np.arange(1, rs.n + 1)[rs.last][rs.ev]
    m1 = np.cumsum(xs, axis=0)[rs.last][rs.ev] / cnt[:, None]
    m2 = np.cumsum(xs ** 2, axis=0)[rs.last][rs.ev] / cnt[:, None]
    u = np.sum(xs[rs.ev] - m1, axis=0)
    info = np.sum(m2 - m1 ** 2, axis=0)
    stat = np.where(info > 1e-15, np.abs(u) / np.sqrt(np.maximum(info, 1e-300)), 0.0)

    chosen = list(dict.fromkeys(forced))
    ranked = sorted((j for j in variable if j not in chosen), key=lambda j: (-stat[j], j))
    chosen += ranked[: max(keep_max - len(chosen), 0)]
    return sorted(chosen)


def fit_cox(x, t, event, l2=None, tol=1e-8, max_iter=100, keep_max=None,
            always_keep=(0,)) -> CoxModel:
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    event = np.asarray(event)
    n, d = x.shape
    if len(t) != n or len(event) != n:
        raise ShapeError("x, t and event must share their first dimension")
    if not np.any(event == 1):
        raise NoEventsError("Cox model needs at least one event")
    if l2 is None:
        l2 = 1.0 / n
    cols = feature_screen(x, t, event, d if keep_max is None else keep_max, always_keep)
    xk = x[:, cols]
    rs = _RiskSets(t, event)
    k = len(cols)

    w = np.zeros(k)
    ll, score, info = _cox_pieces(xk, rs, w)
    obj = -ll / n
    converged = False
    steps = 0
    while True:
        grad = -score / n + l2 * w
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        if steps >= max_iter:
            break
        step = _newton_step(info / n + l2 * np.eye(k), grad)
        cand, c_obj = _halve_until_descent(
            w, step, obj, lambda v: -_cox_pieces(xk, rs, v, need_hess=False)[0] / n
            + 0.5 * l2 * v @ v)
        if cand is None:
            break
        w, obj = cand, c_obj
        _, score, info = _cox_pieces(xk, rs, w)
        steps += 1

    full = np.zeros(d)
    full[cols] = w
    return CoxModel(weights=full, l2=l2, converged=converged, screened_columns=cols, n_iter=steps)


def cox_risk_score(model: CoxModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(model.weights):
        raise ShapeError(f"expected {len(model.weights)} columns, got shape {x.shape}")
    return x @ model.weights
