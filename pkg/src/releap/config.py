"""Experiment configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Every key is optional; unknown
keys are rejected. ``releap run`` writes the fully resolved configuration
next to its outputs (``config.txt``), which loads back to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .agent import PPOConfig
from .errors import ConfigError
from .loop import STRATEGIES, LoopConfig
from .strategies import CommitteeConfig
from .synthcohort import CohortConfig, SurvivalConfig

DEFAULT_MASTER_SEED = 2024


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    strategies: tuple = STRATEGIES
    n_replications: int = 100
    master_seed: int = DEFAULT_MASTER_SEED
    output_dir: str = "releap_out"
    valid_frac: float = 0.2
    subgroup_column: int | None = None
    warm_start: bool = False
    verbose: bool = False

    @property
    def train_size(self) -> int:
        # stratified rounding can shift this by one patient per outcome class
        return self.cohort.n - round(self.valid_frac * self.cohort.n)

    def problems(self) -> list[str]:
        out = list(self.cohort.problems())
        out += self.loop.problems(self.train_size)
        if not self.strategies:
            out.append("strategies must be nonempty")
        for s in self.strategies:
            if s not in STRATEGIES:
                out.append(f"unknown strategy {s!r}")
        if self.n_replications < 1:
            out.append("n_replications must be >= 1")
        if not 0 < self.valid_frac < 1:
            out.append("valid_frac must lie in (0, 1)")
        if self.subgroup_column is not None and not 0 <= self.subgroup_column < self.cohort.d_x2:
            out.append(f"subgroup_column must index an X2 column (0..{self.cohort.d_x2 - 1})")
        if self.loop.mode == "survival" and self.cohort.survival is None:
            out.append("survival mode needs survival = true")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


# -- value codecs -----------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt(parse, none_word):
    def inner(text):
        return None if text.lower() == none_word else parse(text)
    return inner


def _strategies(text: str) -> tuple:
    items = tuple(s.strip() for s in text.split(",") if s.strip())
    if not items:
        raise ValueError("expected a comma-separated strategy list")
    return items


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (owner, attribute, parser, description); owners name nested config objects
KEYS = {
    "mode": ("loop", "mode", str, "logistic | survival"),
    "n": ("cohort", "n", int, "patients per synthetic cohort"),
    "d_x1": ("cohort", "d_x1", int, "phenotype feature dimension"),
    "d_x2": ("cohort", "d_x2", int, "outcome covariate dimension"),
    "beta_s": ("cohort", "beta_s", float, "outcome coefficient on S_true"),
    "sigma_link": ("cohort", "sigma_link", float, "noise sd on the S_true linear predictor"),
    "sigma_proxy": ("cohort", "sigma_proxy", float, "noise sd producing the proxy S*"),
    "proxy_scale": ("cohort", "proxy_scale", float, "S_true is mapped to +/- this before noise"),
    "threshold_s_true": ("cohort", "threshold_s_true", _bool, "threshold p_true at 0.5 instead of sampling"),
    "survival": ("cohort", "survival", _bool, "generate event times"),
    "baseline_rate": ("survival", "baseline_rate", float, "exponential baseline hazard"),
    "censor_horizon": ("survival", "censor_horizon", float, "administrative censoring time"),
    "valid_frac": ("experiment", "valid_frac", float, "validation fraction, stratified by Y"),
    "seed_size": ("loop", "seed_size", int, "balanced seed set size"),
    "batch_size": ("loop", "batch_size", int, "labels acquired per iteration"),
    "n_iterations": ("loop", "n_iterations", int, "acquisition iterations per episode"),
    "reward_mode": ("loop", "reward_mode", str, "shaped | lookahead"),
    "mirror_validation": ("loop", "mirror_validation", _bool, "mirror replacements on validation"),
    "k_neighbors": ("loop", "k_neighbors", int, "diversity neighbours"),
    "diversity_lambda": ("loop", "diversity_lambda", float, "diversity std weight"),
    "target_fpr": ("loop", "target_fpr", float, "FPR of the threshold-metric operating point"),
    "l2": ("loop", "l2", _opt(float, "auto"), "model L2 penalty; auto = 1/n"),
    "keep_max": ("loop", "keep_max", _opt(int, "all"), "Cox screening width; all = no screening"),
    "window": ("loop", "window", int, "metric window for baseline, slope, variance"),
    "lookahead_alpha": ("loop", "lookahead_alpha", float, "lookahead reward immediate weight"),
    "lookahead_gamma": ("loop", "lookahead_gamma", float, "lookahead reward discount"),
    "lookahead_k": ("loop", "lookahead_k", int, "lookahead horizon"),
    "committee_size": ("committee", "m", int, "QBC committee size"),
    "dropout_p": ("committee", "dropout_p", float, "QBC per-feature dropout"),
    "l2_jitter": ("committee", "l2_jitter", float, "QBC L2 multiplier exp(U(-j, j))"),
    "entropy_weight": ("committee", "entropy_weight", float, "QBC entropy stabilizer"),
    "ppo_clip": ("ppo", "clip", float, "PPO clip range"),
    "ppo_gamma": ("ppo", "gamma", float, "PPO discount"),
    "gae_lambda": ("ppo", "gae_lambda", float, "GAE lambda"),
    "ppo_epochs": ("ppo", "epochs", int, "PPO epochs per update"),
    "ppo_lr": ("ppo", "lr", float, "Adam learning rate"),
    "value_coef": ("ppo", "value_coef", float, "value loss weight"),
    "entropy_coef": ("ppo", "entropy_coef", float, "entropy bonus weight"),
    "hidden": ("ppo", "hidden", int, "policy hidden width"),
    "strategies": ("experiment", "strategies", _strategies, "comma-separated sweep"),
    "n_replications": ("experiment", "n_replications", int, "replications per strategy"),
    "master_seed": ("experiment", "master_seed", int, "root of all random streams"),
    "output_dir": ("experiment", "output_dir", str, "where outputs are written"),
    "subgroup_column": ("experiment", "subgroup_column", _opt(int, "none"),
                        "X2 column whose sign defines subgroups; none = off"),
    "warm_start": ("experiment", "warm_start", _bool, "carry the policy across replications"),
    "verbose": ("experiment", "verbose", _bool, "also write model coefficients"),
}


def _get(cfg: ExperimentConfig, owner: str, attr: str):
    if owner == "experiment":
        return getattr(cfg, attr)
    if owner == "cohort":
        value = getattr(cfg.cohort, attr)
        return value is not None if attr == "survival" else value
    if owner == "survival":
        return getattr(cfg.cohort.survival or SurvivalConfig(), attr)
    if owner == "loop":
        return getattr(cfg.loop, attr)
    return getattr(getattr(cfg.loop, owner), attr)


def from_values(values: dict) -> ExperimentConfig:
    """Build a config from parsed key values; missing keys take defaults."""
    groups = {"experiment": {}, "cohort": {}, "survival": {}, "loop": {}, "committee": {}, "ppo": {}}
    for key, value in values.items():
        owner, attr, _, _ = KEYS[key]
        groups[owner][attr] = value
    survival_on = groups["cohort"].pop("survival", True)
    survival = replace(SurvivalConfig(), **groups["survival"]) if survival_on else None
    cohort = replace(CohortConfig(), survival=survival, **groups["cohort"])
    loop = replace(LoopConfig(), committee=replace(CommitteeConfig(), **groups["committee"]),
                   ppo=replace(PPOConfig(), **groups["ppo"]), **groups["loop"])
    return ExperimentConfig(cohort=cohort, loop=loop, **groups["experiment"])


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values, errors, seen = {}, [], {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {body!r}")
            continue
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in KEYS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
            continue
        seen[key] = lineno
        try:
            values[key] = KEYS[key][2](raw)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    if errors:
        raise ConfigError(errors)
    return from_values(values).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, (owner, attr, _, doc) in KEYS.items():
        value = _get(cfg, owner, attr)
        if value is None:
            value = {"l2": "auto", "keep_max": "all", "subgroup_column": "none"}[key]
        lines.append(f"# {doc}")
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"
