"""Run configuration: per-scenario default tables, a flat key=value file
format, override merging, validation, and an audit hash.

Every knob lives in one flat RunConfig so a run is fully described by its
resolved snapshot (sorted key=value lines).  Defaults are baked in per
scenario; anything else must be stated explicitly, which keeps experiment
records diff-able.
"""

import hashlib
from dataclasses import dataclass, fields

from .envs import SCENARIO_NAMES

EXPERT_VARIANTS = ("ddpg", "dqn_exp", "dqn_vdn")
LOSS_KINDS = ("cross_entropy", "mse")
DATASET_MODES = ("shared", "per_agent")


@dataclass
class RunConfig:
    """Everything a training or evaluation run depends on."""

    scenario: str
    seed: int = 0
    variant: str = "ddpg"
    gamma: float = 0.9
    # centralized expert
    expert_episodes: int = 5000
    expert_hidden: int = 64
    expert_batch: int = 32
    expert_lr: float = 1e-4
    tau: float = 1e-3
    expert_clip: float = 0.1
    buffer_capacity: int = 1_000_000
    warmup: int = 1024
    # decentralized imitators
    decent_episodes: int = 5000
    agent_hidden: int = 64
    agent_batch: int = 32
    agent_lr: float = 1e-3
    agent_clip: float = 0.0
    loss_kind: str = "cross_entropy"
    dataset_mode: str = "shared"
    min_dataset: int = 1024
    comm_loss_enabled: bool = True
    # evaluation and stopping
    eval_every: int = 250
    eval_episodes: int = 200
    stop_tolerance: float = 5.0
    out_dir: str = "runs"


# Per-scenario tables for the centralized expert and its imitators.  The
# network width, batch size, learning rate and target-update rate follow
# the training recipes the scenarios were tuned with; episode caps and the
# stopping band are desk-scale run control.
_SCENARIO_DEFAULTS = {
    "coop_nav_3": dict(
        expert_hidden=225, expert_batch=64, expert_lr=1e-3, tau=1e-3,
        agent_hidden=128, expert_episodes=15000, decent_episodes=15000,
        stop_tolerance=5.0,
    ),
    "coop_nav_3_het": dict(
        expert_hidden=225, expert_batch=64, expert_lr=1e-3, tau=1e-3,
        agent_hidden=128, expert_episodes=15000, decent_episodes=15000,
        stop_tolerance=5.0,
    ),
    "coop_nav_6": dict(
        expert_hidden=240, expert_batch=32, expert_lr=1e-4, tau=1e-4,
        agent_hidden=128, expert_episodes=15000, decent_episodes=15000,
        stop_tolerance=5.0,
    ),
    "coop_nav_6_het": dict(
        expert_hidden=240, expert_batch=32, expert_lr=1e-4, tau=1e-4,
        agent_hidden=128, expert_episodes=15000, decent_episodes=15000,
        stop_tolerance=5.0,
    ),
    "speaker_listener": dict(
        expert_hidden=64, expert_batch=32, expert_lr=1e-4, tau=1e-3,
        agent_hidden=64, expert_episodes=5000, decent_episodes=5000,
        stop_tolerance=2.0,
    ),
    "coop_nav_comm_2x3": dict(
        expert_hidden=95, expert_batch=32, expert_lr=1e-4, tau=1e-4,
        agent_hidden=64, expert_episodes=5000, decent_episodes=5000,
        stop_tolerance=5.0,
    ),
    "coop_nav_comm_3x5": dict(
        expert_hidden=95, expert_batch=32, expert_lr=1e-4, tau=1e-4,
        agent_hidden=64, expert_episodes=5000, decent_episodes=5000,
        stop_tolerance=5.0,
    ),
}

# Value-based experts were tuned with their own width, batch and rates.
_VARIANT_DEFAULTS = {
    "dqn_exp": dict(expert_hidden=200, expert_batch=64, expert_lr=5e-4, tau=5e-4),
    "dqn_vdn": dict(expert_hidden=200, expert_batch=64, expert_lr=1e-3, tau=1e-3),
}

_FIELDS = {
    f.name: (f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type)))
    for f in fields(RunConfig)
}


def _coerce(name: str, raw):
    """Parse one raw override into the field's declared type."""
    if name not in _FIELDS:
        raise ValueError(f"unknown config field: {name}")
    kind = _FIELDS[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if kind == "int":
        return int(float(text)) if ("e" in text or "." in text) else int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"field {name} wants a boolean, got {text!r}")
    return text


def make_config(scenario=None, variant="ddpg", overrides=None) -> RunConfig:
    """Scenario defaults layered under explicit overrides, then validated.

    Overrides may also carry `scenario` and `variant`; explicit arguments
    lose to them so a config file fully describes its run.
    """
    overrides = dict(overrides or {})
    scenario = overrides.pop("scenario", scenario)
    variant = overrides.pop("variant", variant)
    if scenario is None:
        raise ValueError("missing required field: scenario")
    if scenario not in SCENARIO_NAMES:
        raise ValueError(
            f"unknown scenario {scenario!r}; pick one of {', '.join(SCENARIO_NAMES)}"
        )
    if variant not in EXPERT_VARIANTS:
        raise ValueError(
            f"unknown expert variant {variant!r}; pick one of {', '.join(EXPERT_VARIANTS)}"
        )
    values = dict(scenario=scenario, variant=variant)
    values.update(_SCENARIO_DEFAULTS[scenario])
    values.update(_VARIANT_DEFAULTS.get(variant, {}))
    for key, raw in overrides.items():
        values[key] = _coerce(key, raw)
    config = RunConfig(**values)
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> None:
    if config.scenario not in SCENARIO_NAMES:
        raise ValueError(f"unknown scenario {config.scenario!r}")
    if config.variant not in EXPERT_VARIANTS:
        raise ValueError(f"unknown expert variant {config.variant!r}")
    if not (0.0 < config.gamma <= 1.0):
        raise ValueError(f"gamma must be in (0, 1], got {config.gamma}")
    for name in ("expert_lr", "agent_lr", "tau"):
        if getattr(config, name) <= 0.0:
            raise ValueError(f"{name} must be positive")
    for name in (
        "expert_episodes", "decent_episodes", "expert_hidden", "agent_hidden",
        "expert_batch", "agent_batch", "eval_every", "eval_episodes",
        "buffer_capacity", "warmup", "min_dataset",
    ):
        if getattr(config, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if config.loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {config.loss_kind!r}")
    if config.dataset_mode not in DATASET_MODES:
        raise ValueError(f"unknown dataset mode {config.dataset_mode!r}")
    for name in ("expert_clip", "agent_clip"):
        if getattr(config, name) < 0.0:
            raise ValueError(f"{name} must be non-negative")


def parse_kv_text(text: str) -> dict:
    """Flat `key=value` lines; blank lines and #-comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected key=value, got {body!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path: str) -> dict:
    with open(path, "r") as fh:
        return parse_kv_text(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(config: RunConfig) -> str:
    """The audit snapshot: every field, sorted, one key=value per line."""
    lines = [
        f"{f.name}={_format_value(getattr(config, f.name))}"
        for f in sorted(fields(RunConfig), key=lambda f: f.name)
    ]
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    """Short digest of the resolved snapshot, for tagging artifacts."""
    return hashlib.sha256(resolved_text(config).encode()).hexdigest()[:16]
