"""Policy over strategy weights: state features, Dirichlet actor-critic, rewards, PPO.

The network is a single tanh hidden layer shared by two heads: Dirichlet
concentrations ``alpha = softplus(o) + 1`` over the three basis strategies
and a scalar state value. Gradients are written out by hand.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import NumericFault, PreconditionError
from .strategies import BASIS, StrategyScoreTable

STATE_NAMES = (
    "m_t",
    "unc_median", "unc_p80", "div_median", "div_p80", "qbc_median", "qbc_p80",
    "mu_s", "sigma_s", "p_pos_lab", "slope_m", "var_m", "b_t",
)
STATE_DIM = len(STATE_NAMES)
N_ACTIONS = len(BASIS)
EPS = 1e-8


# -- state ----------------------------------------------------------------------

def metric_trend(window) -> tuple[float, float]:
    """Least-squares slope against index, and population variance."""
    m = np.asarray(window, dtype=float)
    if len(m) < 2:
        return 0.0, 0.0
    idx = np.arange(len(m), dtype=float)
    idx -= idx.mean()
    slope = float(idx @ (m - m.mean()) / (idx @ idx))
    return slope, float(m.var())


def _nearest_rank(v, q):
    return float(np.percentile(v, q, method="inverted_cdf"))


def build_state(metric_history, table: StrategyScoreTable, labeled_s, labeled_outcome,
                budget_remaining_frac: float, h: int = 5) -> np.ndarray:
    labeled_s = np.asarray(labeled_s, dtype=float)
    if len(labeled_s) == 0:
        raise PreconditionError("state needs at least one labeled patient")
    window = list(metric_history)[-h:]
    slope, var = metric_trend(window)
    summary = []
    for name in BASIS:
        v = table.normalized.get(name)
        if v is None or len(v) == 0:
            summary += [0.0, 0.0]
        else:
            summary += [_nearest_rank(v, 50), _nearest_rank(v, 80)]
    state = np.array([
        float(window[-1]) if window else 0.0,
        *summary,
        labeled_s.mean(), labeled_s.std(),
        float(np.mean(labeled_outcome)),
        slope, var,
        float(budget_remaining_frac),
    ])
    if not np.all(np.isfinite(state)):
        raise NumericFault(f"non-finite state {state}")
    return state


# -- Dirichlet --------------------------------------------------------------------

def dirichlet_log_prob(alpha, w) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    w = np.asarray(w, dtype=float)
    return (gammaln(alpha.sum(-1)) - gammaln(alpha).sum(-1)
            + ((alpha - 1) * np.log(w)).sum(-1))


def dirichlet_entropy(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    a0 = alpha.sum(-1)
    k = alpha.shape[-1]
    log_b = gammaln(alpha).sum(-1) - gammaln(a0)
    return log_b + (a0 - k) * digamma(a0) - ((alpha - 1) * digamma(alpha)).sum(-1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- network ----------------------------------------------------------------------

@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    hidden: int = 32

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.clip < 1:
            out.append("ppo clip must lie in (0, 1)")
        if not 0 <= self.gamma <= 1:
            out.append("ppo gamma must lie in [0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            out.append("gae_lambda must lie in [0, 1]")
        if self.epochs < 1:
            out.append("ppo epochs must be >= 1")
        if not self.lr > 0:
            out.append("ppo lr must be > 0")
        if self.hidden < 1:
            out.append("hidden width must be >= 1")
        return out


class PolicyNet:
    """Parameters live in one flat vector; the named arrays are views into it."""

    def __init__(self, rng: np.random.Generator, state_dim: int = STATE_DIM,
                 hidden: int = 32, n_actions: int = N_ACTIONS):
        self.shapes = {
            "w1": (hidden, state_dim), "b1": (hidden,),
            "wa": (n_actions, hidden), "ba": (n_actions,),
            "wv": (1, hidden), "bv": (1,),
        }
        self.params = np.zeros(sum(int(np.prod(s)) for s in self.shapes.values()))
        self._bind()
        self.w1[:] = rng.standard_normal(self.w1.shape) / np.sqrt(state_dim)
        self.wa[:] = 0.01 * rng.standard_normal(self.wa.shape)
        self.wv[:] = rng.standard_normal(self.wv.shape) / np.sqrt(hidden)
        self.adam_m = np.zeros_like(self.params)
        self.adam_v = np.zeros_like(self.params)
        self.adam_t = 0

    def _bind(self):
        pos = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            setattr(self, name, self.params[pos:pos + size].reshape(shape))
            pos += size

    def set_params(self, flat) -> None:
        self.params[:] = flat

    def forward(self, states):
        """Return (alpha, value, cache) for a batch of states."""
        s = np.atleast_2d(np.asarray(states, dtype=float))
        if not np.all(np.isfinite(s)):
            raise NumericFault("non-finite policy input")
        pre = s @ self.w1.T + self.b1
        hid = np.tanh(pre)
        o = hid @ self.wa.T + self.ba
        alpha = _softplus(o) + 1.0
        value = (hid @ self.wv.T + self.bv)[:, 0]
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(value))):
            raise NumericFault("policy network produced non-finite output")
        return alpha, value, (s, hid, o)

    def backward(self, cache, d_alpha, d_value) -> np.ndarray:
        """Flat gradient given dLoss/dalpha (batch x actions) and dLoss/dvalue (batch)."""
        s, hid, o = cache
        d_o = d_alpha * _sigmoid(o)
        d_v = np.asarray(d_value, dtype=float)[:, None]
        grads = {
            "wa": d_o.T @ hid, "ba": d_o.sum(0),
            "wv": d_v.T @ hid, "bv": d_v.sum(0),
        }
        d_pre = (d_o @ self.wa + d_v @ self.wv) * (1 - hid ** 2)
        grads["w1"] = d_pre.T @ s
        grads["b1"] = d_pre.sum(0)
        return np.concatenate([grads[k].ravel() for k in self.shapes])

    def adam_step(self, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        self.adam_t += 1
        self.adam_m = beta1 * self.adam_m + (1 - beta1) * grad
        self.adam_v = beta2 * self.adam_v + (1 - beta2) * grad ** 2
        m_hat = self.adam_m / (1 - beta1 ** self.adam_t)
        v_hat = self.adam_v / (1 - beta2 ** self.adam_t)
        self.params -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def save(self, path: str | Path) -> None:
        np.savetxt(path, self.params, fmt="%.17g")

    def load(self, path: str | Path) -> None:
        flat = np.loadtxt(path, ndmin=1)
        if flat.shape != self.params.shape:
            raise PreconditionError(f"checkpoint has {flat.size} values, expected {self.params.size}")
        self.params[:] = flat


def sample_action(policy: PolicyNet, state, rng: np.random.Generator | None = None,
                  deterministic: bool = False):
    """Draw simplex weights; ``deterministic`` returns the Dirichlet mean instead."""
    alpha, value, _ = policy.forward(state)
    alpha = alpha[0]
    if deterministic or rng is None:
        w = alpha / alpha.sum()
    else:
        w = rng.dirichlet(alpha)
        w = np.maximum(w, 1e-300)
        w = w / w.sum()
    log_prob = float(dirichlet_log_prob(alpha, w))
    if not np.isfinite(log_prob):
        raise NumericFault(f"non-finite log-density for action {w}")
    return w, log_prob, float(value[0])


# -- rewards ------------------------------------------------------------------------

@dataclass
class RewardTracker:
    h: int = 5
    epsilon: float = EPS
    window: deque = field(default=None)
    run_mean: float = 0.0
    run_m2: float = 0.0
    run_count: int = 0

    def __post_init__(self):
        if self.window is None:
            self.window = deque(maxlen=self.h)

    @property
    def run_var(self) -> float:
        return self.run_m2 / self.run_count if self.run_count else 0.0

    def push_moment(self, x: float) -> None:
        self.run_count += 1
        delta = x - self.run_mean
        self.run_mean += delta / self.run_count
        self.run_m2 += delta * (x - self.run_mean)


def trajectory_factor(improving: bool) -> float:
    return 1.2 if improving else 1.0


def shaped_reward(tracker: RewardTracker, m_t: float, progress_frac: float,
                  improving: bool) -> tuple[float, float]:
    """Relative gain over the moving baseline, scaled by progress and trend, then standardized online."""
    if not np.isfinite(m_t):
        raise PreconditionError("metric must be finite")
    m_bar = float(np.mean(tracker.window)) if tracker.window else float(m_t)
    # floor on the headroom only guards m_bar -> 1; an additive epsilon would bias every gain
    gain = (m_t - m_bar) / max(1.0 - m_bar, tracker.epsilon)
    raw = gain * (1.0 + 2.0 * progress_frac) * trajectory_factor(improving)
    tracker.push_moment(raw)
    normalized = (raw - tracker.run_mean) / (np.sqrt(tracker.run_var) + tracker.epsilon)
    tracker.window.append(float(m_t))
    return float(raw), float(normalized)


def compute_lookahead_return(metric_seq, t: int, alpha: float = 0.5, gamma: float = 0.9,
                             K: int = 2) -> float:
    """alpha * one-step gain + (1 - alpha) * discounted gains over the next K steps.

    ``metric_seq[0]`` is the pre-acquisition metric; the sum stops at the end
    of the sequence.
    """
    m = np.asarray(metric_seq, dtype=float)
    if len(m) < 2 or not 1 <= t < len(m):
        raise PreconditionError("lookahead return needs m[t-1] and m[t]")
    if not 0 <= alpha <= 1:
        raise PreconditionError("alpha must lie in [0, 1]")
    future = 0.0
    for k in range(1, K + 1):
        j = t + k - 1
        if j >= len(m):
            break
        future += gamma ** (k - 1) * (m[j] - m[j - 1])
    return float(alpha * (m[t] - m[t - 1]) + (1 - alpha) * future)


# -- PPO ----------------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    log_prob: float
    value: float
    reward: float
    next_state: np.ndarray | None
    done: bool


def compute_gae(rewards, values, dones, gamma, lam, last_value=0.0):
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    adv = np.zeros_like(rewards)
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if dones[i]:
            next_v, running = 0.0, 0.0
        else:
            next_v = values[i + 1] if i + 1 < len(values) else last_value
        delta = rewards[i] + gamma * next_v - values[i]
        running = delta + gamma * lam * running
        adv[i] = running
    return adv, adv + values


def ppo_loss_and_grad(policy: PolicyNet, states, actions, old_log_probs, advantages,
                      returns, cfg: PPOConfig):
    """Clipped-surrogate loss (to minimize) and its exact gradient."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    n = len(states)
    alpha, value, cache = policy.forward(states)
    log_prob = dirichlet_log_prob(alpha, actions)
    ratio = np.exp(log_prob - old_log_probs)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surr = np.minimum(ratio * advantages, clipped * advantages)
    ent = dirichlet_entropy(alpha)
    loss = (-surr.mean() + cfg.value_coef * np.mean((value - returns) ** 2)
            - cfg.entropy_coef * ent.mean())
    if not np.isfinite(loss):
        raise NumericFault("non-finite PPO loss")

    # the unclipped branch carries gradient unless clipping is active and binding
    active = ~((clipped != ratio) & (clipped * advantages < ratio * advantages))
    d_logp = -(advantages * ratio * active) / n
    a0 = alpha.sum(-1, keepdims=True)
    dlogp_dalpha = digamma(a0) - digamma(alpha) + np.log(actions)
    k = alpha.shape[-1]
    dent_dalpha = (a0 - k) * polygamma(1, a0) - (alpha - 1) * polygamma(1, alpha)
    d_alpha = d_logp[:, None] * dlogp_dalpha - (cfg.entropy_coef / n) * dent_dalpha
    d_value = 2 * cfg.value_coef * (value - returns) / n
    grad = policy.backward(cache, d_alpha, d_value)
    return float(loss), grad, ratio


def ppo_update(policy: PolicyNet, buffer: list[Transition], cfg: PPOConfig = PPOConfig()) -> dict:
    if not buffer:
        raise PreconditionError("PPO update needs a nonempty buffer")
    states = np.array([tr.state for tr in buffer])
    actions = np.array([tr.action for tr in buffer])
    old_lp = np.array([tr.log_prob for tr in buffer])
    values = np.array([tr.value for tr in buffer])
    rewards = np.array([tr.reward for tr in buffer])
    dones = [tr.done for tr in buffer]

    adv, returns = compute_gae(rewards, values, dones, cfg.gamma, cfg.gae_lambda)
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + EPS)
    else:
        adv = np.zeros_like(adv)

    before = policy.params.copy()
    losses = []
    first_ratio_dev = None
    for _ in range(cfg.epochs):
        try:
            loss, grad, ratio = ppo_loss_and_grad(policy, states, actions, old_lp, adv, returns, cfg)
        except NumericFault:
            policy.params[:] = before
            raise
        if first_ratio_dev is None:
            first_ratio_dev = float(np.max(np.abs(ratio - 1.0)))
        if not np.all(np.isfinite(grad)):
            policy.params[:] = before
            raise NumericFault("non-finite PPO gradient")
        policy.adam_step(grad, cfg.lr)
        losses.append(loss)
    return {"losses": losses, "initial_ratio_deviation": first_ratio_dev,
            "n_transitions": len(buffer)}
