"""Experiment configuration: a flat ``key = value`` text format with a typed schema.

Lines starting with ``#`` are comments. Every key must belong to the schema;
omitted keys take the values in ``configs/defaults.cfg`` (which mirror the
dataclass defaults below). Tuples are written comma-separated.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

from .envs import make_env
from .errors import InvalidInputError
from .mdgps import MDGPSConfig, StepClamps
from .policy import SGDConfig


class ConfigError(InvalidInputError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "pointmass"
    n_conditions: int = 5
    n_samples: int = 5
    iterations: int = 12
    sampling: str = "off_policy"
    step_rule: str = "classic"
    epsilon: float = 1.0
    clamp_factor: float = 5.0
    epsilon_min: float = 1e-4
    epsilon_max: float = 10.0
    kl_tol: float = 0.05
    policy_arch: str = "mlp"
    hidden: tuple = (40, 40)
    sgd_batch_size: int = 32
    sgd_steps: int = 2000
    sgd_learning_rate: float = 1e-3
    sgd_momentum: float = 0.9
    gmm_components: int = 4
    gmm_restarts: int = 2
    gmm_iters: int = 50
    dynamics_prior_strength: float = 1.0
    policy_prior_strength: float = 1.0
    n_eval: int = 5
    seed: int = 0
    output: str = "runs/default"

    def __post_init__(self):
        enums = {"sampling": ("off_policy", "on_policy"), "step_rule": ("classic", "global"),
                 "policy_arch": ("affine", "mlp")}
        for key, allowed in enums.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {', '.join(allowed)}")
        # strengths may be zero (plain least squares); SGD steps may be zero (no-op S-step)
        nonneg = {"dynamics_prior_strength", "policy_prior_strength", "sgd_steps", "seed",
                  "sgd_momentum"}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not (v >= 0 if f.name in nonneg else v > 0):
                raise ConfigError(f.name, f"must be {'nonnegative' if f.name in nonneg else 'positive'}")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden", "layer sizes must be positive")
        if self.epsilon_min > self.epsilon_max:
            raise ConfigError("epsilon_min", "exceeds epsilon_max")
        if not self.epsilon_min <= self.epsilon <= self.epsilon_max:
            raise ConfigError("epsilon", "outside [epsilon_min, epsilon_max]")

    def algorithm_config(self):
        return MDGPSConfig(
            n_samples=self.n_samples, sampling=self.sampling, step_rule=self.step_rule,
            epsilon=self.epsilon,
            clamps=StepClamps(self.clamp_factor, self.epsilon_min, self.epsilon_max),
            kl_tol=self.kl_tol, policy_arch=self.policy_arch, hidden=tuple(self.hidden),
            sgd=SGDConfig(self.sgd_batch_size, self.sgd_steps, self.sgd_learning_rate,
                          self.sgd_momentum),
            gmm_components=self.gmm_components, gmm_restarts=self.gmm_restarts,
            gmm_iters=self.gmm_iters, dynamics_prior_strength=self.dynamics_prior_strength,
            policy_prior_strength=self.policy_prior_strength, n_eval=self.n_eval,
            seed=self.seed)

    def make_env(self):
        spec = make_env(self.env)
        return spec.with_conditions(self.n_conditions)


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key, text):
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot read {text!r} as {kind}") from None
    return text


def parse_config(text, base=None):
    """Parse config text; keys not present keep their value in ``base``."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, value)
    return replace(base if base is not None else default_config(), **values)


def format_config(cfg):
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"


def packaged_config(name):
    return resources.files("mdgps").joinpath("configs", name)


def default_config():
    return parse_config(packaged_config("defaults.cfg").read_text(), base=ExperimentConfig())


def load_config(path):
    """Read a config file; a bare name such as ``pointmass.cfg`` also resolves to the bundled copy."""
    p = Path(path)
    if not p.exists():
        bundled = packaged_config(p.name)
        if p.parent != Path(".") or not bundled.is_file():
            raise ConfigError("config", f"no such file {path}")
        return parse_config(bundled.read_text())
    return parse_config(p.read_text())
