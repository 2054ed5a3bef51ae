"""Run configuration: flat dotted-key files with typed, validated fields.

A config file is plain text, one ``section.key = value`` pair per line;
``#`` starts a comment and blank lines are ignored.  Unknown keys are
rejected rather than silently dropped, so a typo in a sweep script fails
loudly instead of running the defaults.  Values are converted according to
the declared field type (int, float, bool, str, or a comma-separated list
of names).

Precedence, lowest to highest: built-in defaults, the config file, the
``RFMPOSE_SEED`` environment variable (seed only), then ``--set key=value``
overrides from the command line.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from . import flowmatch as fm
from . import rlrefine as rl
from . import synthdata as sd


class ConfigError(Exception):
    """A configuration problem the caller can fix: bad key, value, or path."""


@dataclass
class DatasetSection:
    n_train: int = 500
    n_test: int = 100
    n_points: int = 128
    categories: tuple = ("box", "cylinder")
    jitter_sigma: float = 0.002
    dense_factor: int = 8
    # applied to the train split only; test instances stay independent
    poses_per_crop: int = 1
    max_rotation_deg: float = 180.0


@dataclass
class FlowSection:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    feat_dim: int = fm.DEFAULT_FEAT_DIM
    time_dim: int = fm.DEFAULT_TIME_DIM
    hidden: int = fm.DEFAULT_HIDDEN
    augment_rotations: bool = False
    augment_max_deg: float = 180.0


@dataclass
class RlSection:
    iterations: int = 50
    trajectories: int = 64
    horizon: int = 20
    # comma-separated rollout horizons cycled across iterations ("20,10,5");
    # "off" keeps every iteration on rl.horizon
    horizon_mix: str = "off"
    # pull of the refined policy mean toward the pretrained field (0 = off)
    anchor: float = 0.0
    sigma: float = 0.2
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    policy_lr: float = 3e-5
    critic_lr: float = 3e-4
    lam: float = 0.95
    tau_rot_deg: float = 5.0
    tau_trans: float = 0.05
    bonus: float = 1.0
    value_target: str = "lambda-return"
    critic_encoder_init: str = "flow"
    finetune_encoder: bool = False


@dataclass
class InferSection:
    k: int = 50
    h_steps: int = 20
    rho: float = 0.6
    # -1 scores candidates at the last pre-terminal step; any other value is
    # an explicit step index into the sampling trajectory.
    score_step: int = -1


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    rl: RlSection = field(default_factory=RlSection)
    infer: InferSection = field(default_factory=InferSection)
    seed: int = 0


_SECTIONS = ("dataset", "flow", "rl", "infer")


def default_config() -> RunConfig:
    return RunConfig()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_pairs(text: str, source: str = "<config>") -> list:
    """Split config text into ordered (key, value) string pairs."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(
                f"{source}:{lineno}: empty key or value in {raw.strip()!r}")
        pairs.append((key, value))
    return pairs


def _convert(key: str, text: str, like) -> object:
    """Convert a value string to the type of an existing field value."""
    kind = type(like)
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind is tuple:
            items = tuple(s.strip() for s in text.split(",") if s.strip())
            if not items:
                raise ValueError("expected a non-empty comma-separated list")
            return items
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None
    raise ConfigError(f"unsupported field type for {key!r}")


def apply_pair(cfg: RunConfig, key: str, value: str) -> None:
    """Set one dotted key on the config, rejecting anything not declared."""
    if key == "seed":
        cfg.seed = _convert(key, value, cfg.seed)
        return
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    section_name, sub = key.split(".", 1)
    if section_name not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, section_name)
    names = {f.name for f in dataclasses.fields(section)}
    if sub not in names:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, sub, _convert(key, value, getattr(section, sub)))


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Assemble the effective config from file, environment, and overrides."""
    env = os.environ if env is None else env
    cfg = default_config()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        for key, value in parse_pairs(text, str(path)):
            apply_pair(cfg, key, value)
    seed_env = env.get("RFMPOSE_SEED")
    if seed_env is not None:
        cfg.seed = _convert("RFMPOSE_SEED", seed_env.strip(), cfg.seed)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_pair(cfg, key.strip(), value.strip())
    validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# validation and downstream config objects
# ---------------------------------------------------------------------------

def validate(cfg: RunConfig) -> None:
    """Check every field range; raises ConfigError on the first violation.

    Sections that feed a pipeline-stage config reuse that stage's own
    constructor checks, so a range cannot drift between the two layers.
    """
    try:
        dataset_config(cfg, "train")
        dataset_config(cfg, "test")
        ppo_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    f = cfg.flow
    if f.epochs < 1 or f.batch_size < 1:
        raise ConfigError("flow.epochs and flow.batch_size must be positive")
    if f.lr <= 0.0:
        raise ConfigError("flow.lr must be positive")
    if min(f.feat_dim, f.time_dim, f.hidden) < 1:
        raise ConfigError("flow network dims must be positive")
    if not 0.0 < f.augment_max_deg <= 180.0:
        raise ConfigError("flow.augment_max_deg must be in (0, 180]")
    inf = cfg.infer
    if inf.k < 1:
        raise ConfigError("infer.k must be at least 1")
    if inf.h_steps < 1:
        raise ConfigError("infer.h_steps must be at least 1")
    if not 0.0 < inf.rho <= 1.0:
        raise ConfigError(f"infer.rho must be in (0, 1], got {inf.rho}")
    if inf.score_step != -1 and not 0 <= inf.score_step < inf.h_steps:
        raise ConfigError(
            f"infer.score_step must be -1 or in [0, {inf.h_steps}), "
            f"got {inf.score_step}")


def dataset_config(cfg: RunConfig, split: str) -> sd.DatasetConfig:
    d = cfg.dataset
    n = d.n_train if split == "train" else d.n_test
    ppc = d.poses_per_crop if split == "train" else 1
    return sd.DatasetConfig(n_instances=n, n_points=d.n_points,
                            categories=d.categories,
                            jitter_sigma=d.jitter_sigma, split=split,
                            dense_factor=d.dense_factor, poses_per_crop=ppc,
                            max_rotation_deg=d.max_rotation_deg)


def flow_config(cfg: RunConfig) -> fm.FlowTrainConfig:
    f = cfg.flow
    return fm.FlowTrainConfig(epochs=f.epochs, batch_size=f.batch_size,
                              lr=f.lr, seed=cfg.seed, feat_dim=f.feat_dim,
                              time_dim=f.time_dim, hidden=f.hidden,
                              augment_rotations=f.augment_rotations,
                              augment_max_deg=f.augment_max_deg)


def ppo_config(cfg: RunConfig) -> rl.PpoConfig:
    r = cfg.rl
    try:
        mix = () if r.horizon_mix == "off" else tuple(
            int(s) for s in r.horizon_mix.split(",") if s.strip())
    except ValueError:
        raise ValueError(
            f"rl.horizon_mix must be comma-separated integers or 'off', got "
            f"{r.horizon_mix!r}") from None
    return rl.PpoConfig(iterations=r.iterations, trajectories=r.trajectories,
                        horizon=r.horizon, horizon_mix=mix, anchor=r.anchor,
                        sigma=r.sigma, clip_eps=r.clip_eps,
                        epochs=r.epochs, minibatch=r.minibatch,
                        policy_lr=r.policy_lr, critic_lr=r.critic_lr,
                        lam=r.lam, tau_rot_deg=r.tau_rot_deg,
                        tau_trans=r.tau_trans, bonus=r.bonus,
                        value_target=r.value_target,
                        critic_encoder_init=r.critic_encoder_init,
                        finetune_encoder=r.finetune_encoder, seed=cfg.seed)


def score_step(cfg: RunConfig):
    """The candidate-scoring step index, or None for the default (last)."""
    return None if cfg.infer.score_step == -1 else cfg.infer.score_step


# ---------------------------------------------------------------------------
# canonical echo
# ---------------------------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def echo_lines(cfg: RunConfig) -> list:
    """The effective config as canonical dotted lines; reloads to itself."""
    lines = [f"seed = {cfg.seed}"]
    for section_name in _SECTIONS:
        section = getattr(cfg, section_name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            lines.append(f"{section_name}.{f.name} = {_format_value(value)}")
    return lines


def write_echo(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in echo_lines(cfg):
            fh.write(line + "\n")
