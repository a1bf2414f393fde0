"""Experiment configuration: a flat dataclass with presets and a key = value file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

ENVS = ("digit", "treasure")
BIASES = ("no-comm", "no-bias", "ps", "pl", "both", "si")
CIC_MODES = ("all-messages-zeroed", "final-message-zeroed")
GOOD_RUN_THRESHOLD = {"digit": 0.2, "treasure": 13.0}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "digit"
    bias: str = "no-bias"
    seed: int = 0
    # digit game
    symbolic: bool = True
    n_messages: int = 20
    mnist_dir: str = ""
    digit_hidden: int = 1024
    reinforce_baseline: bool = True
    # treasure hunt
    env_copies: int = 32
    unroll: int = 20
    gamma: float = 0.99
    lstm: int = 128
    mlp: str = "64,64"
    scripted_finder: bool = False
    cic_mode: str = "all-messages-zeroed"
    value_weight: float = 0.5
    # shared optimisation
    batch_size: int = 32
    lr: float = 3e-4
    total_updates: int = 2000
    grad_clip: float = 0.0
    # bias weights
    action_entropy: float = 0.03
    message_entropy: float = 0.03
    h_target: float = 1.0
    ps_weight: float = 0.0
    ps_lambda: float = 3.0
    pl_weight: float = 0.0
    ce_weight: float = 0.0
    si_weight: float = 0.0
    # bookkeeping
    log_every: int = 50
    checkpoint_every: int = 0
    eval_rounds: int = 1000

    def __post_init__(self):
        self.validate()

    # ---------------------------------------------------------------- checks
    def validate(self) -> None:
        if self.env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {self.env!r}")
        if self.bias not in BIASES:
            raise ConfigError(f"bias must be one of {BIASES}, got {self.bias!r}")
        if self.cic_mode not in CIC_MODES:
            raise ConfigError(f"cic_mode must be one of {CIC_MODES}")
        for name in ("batch_size", "total_updates", "env_copies", "unroll", "n_messages", "lstm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.env == "treasure" and self.env_copies % self.batch_size:
            raise ConfigError("env_copies must be a multiple of batch_size")
        uses_ps = self.bias in ("ps", "both")
        uses_pl = self.bias in ("pl", "both")
        if uses_ps != (self.ps_weight > 0):
            raise ConfigError(f"bias {self.bias!r} {'needs' if uses_ps else 'forbids'} ps_weight > 0")
        if uses_pl != (self.pl_weight > 0):
            raise ConfigError(f"bias {self.bias!r} {'needs' if uses_pl else 'forbids'} pl_weight > 0")
        if (self.bias == "si") != (self.si_weight > 0):
            raise ConfigError(f"bias {self.bias!r} {'needs' if self.bias == 'si' else 'forbids'} si_weight > 0")
        if self.bias in ("no-comm", "no-bias") and self.ce_weight:
            raise ConfigError(f"bias {self.bias!r} forbids ce_weight")
        if uses_ps and not 0 <= self.h_target <= math.log(self.message_alphabet):
            raise ConfigError(f"h_target {self.h_target} outside [0, ln {self.message_alphabet}]")
        self.mlp_sizes  # parses

    @property
    def message_alphabet(self) -> int:
        return self.n_messages if self.env == "digit" else 5

    @property
    def mlp_sizes(self) -> tuple[int, ...]:
        try:
            sizes = tuple(int(s) for s in str(self.mlp).split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"mlp must be comma-separated ints, got {self.mlp!r}") from exc
        if not sizes or min(sizes) <= 0:
            raise ConfigError("mlp needs at least one positive layer size")
        return sizes

    @property
    def communicates(self) -> bool:
        return self.bias != "no-comm"

    @property
    def lambda_marginal(self) -> float:
        return self.ps_weight

    @property
    def lambda_conditional(self) -> float:
        return self.ps_weight * self.ps_lambda

    # ---------------------------------------------------------------- io
    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            v = str(v).lower() if isinstance(v, bool) else v
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {name} ({kind})") from exc
    return raw


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (if given), starting from the preset named by its
    ``env`` and ``bias`` keys, then apply ``key=value`` overrides."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(parse_overrides(overrides))
    base = preset(values.get("env", "digit"), values.get("bias", "no-bias"))
    try:
        return base.replace(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ presets

def preset(env: str, bias: str, **changes) -> ExperimentConfig:
    """Published final hyperparameters for ``env`` and ``bias``.

    Both combines the signalling and listening settings. The published Treasure
    Hunt table lists the L_ps and L_pl weights under swapped columns; here PS
    carries L_ps and PL carries L_pl + L_ce. The digit game never states its
    social-influence weight, so 0.1 from the middle of its sweep is used.
    """
    if env not in ENVS:
        raise ConfigError(f"env must be one of {ENVS}, got {env!r}")
    if bias not in BIASES:
        raise ConfigError(f"bias must be one of {BIASES}, got {bias!r}")
    ps = bias in ("ps", "both")
    pl = bias in ("pl", "both")
    if env == "digit":
        v = dict(env=env, bias=bias, batch_size=32, lr=3e-4, action_entropy=0.03,
                 message_entropy=0.03, h_target=1.0)
        if ps:
            v.update(message_entropy=0.0, ps_weight=0.1, ps_lambda=3.0)
        if pl:
            v.update(pl_weight=0.01, ce_weight=0.001)
        if bias == "si":
            v.update(action_entropy=0.01, message_entropy=0.01, ce_weight=0.001, si_weight=0.1)
        if bias == "no-comm":
            v.update(message_entropy=0.0)
    else:
        v = dict(env=env, bias=bias, batch_size=16, env_copies=32, unroll=20, lr=1e-3,
                 action_entropy=0.006, message_entropy=0.0, h_target=0.8, gamma=0.99)
        if ps:
            v.update(ps_weight=0.001, ps_lambda=3.0)
        if pl:
            v.update(pl_weight=0.003, ce_weight=0.01)
        if bias == "si":
            v.update(ce_weight=0.01, si_weight=0.01)
    v.update(changes)
    return ExperimentConfig(**v)


def classify_good_run(env: str, final_mean_reward: float) -> bool:
    if env not in GOOD_RUN_THRESHOLD:
        raise ConfigError(f"unknown env {env!r}")
    return bool(final_mean_reward > GOOD_RUN_THRESHOLD[env])
