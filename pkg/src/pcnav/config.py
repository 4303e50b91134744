"""Run configuration: a strict YAML document with documented defaults.

A run config is a small YAML file with one section per subsystem::

    worlds:         # train/heldout corpus: builtin split name or .map directory
    camera:         # intrinsics and mounting
    randomization:  # training-time conditions flag (none | A | B | AB)
    reward:         # shaped point-goal reward constants
    encoder:        # policy encoder variant and recurrent width
    env:            # episode limits and observation pipeline sizes
    ppo:            # optimization schedule
    seeds:          # train / eval seeds
    output_dir:     # where checkpoints and metrics land

Every key has a default, so ``{}`` is a valid document and any subset of
keys may be given.  Unknown keys are rejected with the offending line
number.  :func:`dump_config` emits a canonical form that parses back to an
identical :class:`RunConfig`.
"""

import dataclasses
import json
import math
import os
import re
from dataclasses import dataclass, field, fields

import yaml

from . import builtin_worlds_dir
from .cloud import DownsampleConfig
from .geom import CameraModel, ContractViolationError, camera_extrinsic
from .nn import VARIANTS, EncoderConfig, PolicyConfig
from .rl import PpoConfig
from .sim import load_worlds
from .task import NavEnv, RandomizationConfig, RewardConfig

CONFIG_DIR_ENV = "PCNAV_CONFIG_DIR"


class ConfigError(ValueError):
    """A problem with a config document, annotated with file and line."""

    def __init__(self, message, source=None, line=None):
        prefix = ""
        if source is not None:
            prefix = source if line is None else f"{source}:{line}"
            prefix += ": "
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# sections


@dataclass(frozen=True)
class WorldsSection:
    """Corpus names: a builtin split ("simple"/"complex") or a directory
    containing ``*.map`` files."""

    train: str = "simple"
    heldout: str = "simple"


@dataclass(frozen=True)
class CameraSection:
    width: int = 64
    height: int = 64
    hfov_deg: float = 70.0
    min_depth: float = 0.1
    max_depth: float = 10.0
    mount_height: float = 1.0
    pitch_deg: float = -20.0
    yaw_deg: float = 0.0


@dataclass(frozen=True)
class RandomizationSection:
    """Training-time randomization: none, A (camera), B (motion), or AB."""

    conditions: str = "none"


@dataclass(frozen=True)
class RewardSection:
    slack: float = 0.01
    success_reward: float = 10.0
    success_distance: float = 0.2
    terminate_on_collision: bool = True


@dataclass(frozen=True)
class EncoderSection:
    variant: str = "pointnet"
    recurrent_width: int = 128


@dataclass(frozen=True)
class EnvSection:
    max_steps: int = 500
    keyframes: int = 8
    goal_min: float = 1.0
    goal_max: float = 3.0
    crop_half_extent: float = 5.0
    voxel_size: float = 0.05
    target_points: int = 256


@dataclass(frozen=True)
class PpoSection:
    rollout_length: int = 128
    num_workers: int = 4
    updates: int = 2000
    epochs: int = 4
    minibatches: int = 2
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    value_weight: float = 0.5
    entropy_weight: float = 0.01
    learning_rate: float = 2.5e-4
    lr_decay: bool = True
    max_grad_norm: float = 0.5
    checkpoint_every: int = 100


@dataclass(frozen=True)
class SeedsSection:
    train: int = 0
    eval: int = 0


@dataclass(frozen=True)
class RunConfig:
    worlds: WorldsSection = field(default_factory=WorldsSection)
    camera: CameraSection = field(default_factory=CameraSection)
    randomization: RandomizationSection = field(
        default_factory=RandomizationSection)
    reward: RewardSection = field(default_factory=RewardSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output_dir: str = "runs/latest"


_SECTION_ORDER = [f.name for f in fields(RunConfig)]

_CONDITIONS = ("none", "A", "B", "AB")


def normalize_variant(value: str) -> str:
    """Map the operator spelling (hyphenated) onto the internal constant."""
    v = value.replace("-", "_")
    if v not in VARIANTS:
        options = ", ".join(v.replace("_", "-") for v in VARIANTS)
        raise ConfigError(f"unknown encoder variant {value!r} (use {options})")
    return v


# ---------------------------------------------------------------------------
# parsing


def _node_line(node) -> int:
    return node.start_mark.line + 1


def _parse_scalar(node, typ, key, source):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{key} must be a single value", source,
                          _node_line(node))
    raw = node.value
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be true or false, got {raw!r}",
                          source, _node_line(node))
    if typ is int:
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}",
                              source, _node_line(node)) from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}",
                              source, _node_line(node)) from None
    return raw


def _parse_section(node, cls, section, source):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"section {section!r} must be a mapping", source,
                          _node_line(node))
    # Field types come from the default values, not the annotations, so
    # string annotations cannot break the scalar conversion.
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key_node, value_node in node.value:
        key = key_node.value
        if key in values:
            raise ConfigError(f"duplicate key {key!r} in section {section!r}",
                              source, _node_line(key_node))
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {section!r}",
                              source, _node_line(key_node))
        typ = type(getattr(defaults, key))
        values[key] = _parse_scalar(value_node, typ, f"{section}.{key}",
                                    source)
    if cls is EncoderSection and "variant" in values:
        try:
            values["variant"] = normalize_variant(values["variant"])
        except ConfigError as err:
            raise ConfigError(str(err), source) from None
    if cls is RandomizationSection and "conditions" in values:
        if values["conditions"] not in _CONDITIONS:
            raise ConfigError(
                f"randomization.conditions must be one of "
                f"{', '.join(_CONDITIONS)}, got {values['conditions']!r}",
                source)
    return cls(**values)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a YAML run config, rejecting unknown keys with line numbers."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        raise ConfigError(f"not valid YAML: {err}", source, line) from None
    if root is None:  # empty document: all defaults
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping of sections", source,
                          _node_line(root))
    defaults = RunConfig()
    values = {}
    for key_node, value_node in root.value:
        key = key_node.value
        if key in values:
            raise ConfigError(f"duplicate section {key!r}", source,
                              _node_line(key_node))
        if key == "output_dir":
            values[key] = _parse_scalar(value_node, str, key, source)
            continue
        if key not in _SECTION_ORDER:
            raise ConfigError(f"unknown section {key!r}", source,
                              _node_line(key_node))
        cls = type(getattr(defaults, key))
        values[key] = _parse_section(value_node, cls, key, source)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    """Read and parse a config file."""
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, source=path)


def find_config(path) -> str:
    """Resolve a config path, falling back to ``$PCNAV_CONFIG_DIR``."""
    path = str(path)
    if os.path.exists(path):
        return path
    search = os.environ.get(CONFIG_DIR_ENV)
    if search and not os.path.isabs(path):
        candidate = os.path.join(search, path)
        if os.path.exists(candidate):
            return candidate
        raise ConfigError(
            f"config file not found: {path} (also tried {candidate})")
    raise ConfigError(f"config file not found: {path}")


# ---------------------------------------------------------------------------
# canonical emission

_PLAIN = re.compile(r"^[A-Za-z0-9._/-]+$")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if _PLAIN.match(value):
        return value
    return json.dumps(value)  # double-quoted, valid YAML


def dump_config(config: RunConfig) -> str:
    """Emit the canonical form: fixed section and key order, plain scalars."""
    lines = []
    for name in _SECTION_ORDER:
        value = getattr(config, name)
        if dataclasses.is_dataclass(value):
            lines.append(f"{name}:")
            for f in fields(value):
                lines.append(f"  {f.name}: "
                             f"{_format_value(getattr(value, f.name))}")
        else:
            lines.append(f"{name}: {_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_config(config))


# ---------------------------------------------------------------------------
# builders: config sections -> live objects


def resolve_worlds(name: str) -> list:
    """A builtin split name or a directory of .map files -> world list."""
    if name in ("simple", "complex"):
        return load_worlds(builtin_worlds_dir(name))
    return load_worlds(name)


def build_camera(config: RunConfig) -> CameraModel:
    cam = config.camera
    extrinsic = camera_extrinsic(cam.mount_height,
                                 pitch=math.radians(cam.pitch_deg),
                                 yaw=math.radians(cam.yaw_deg))
    return CameraModel.from_hfov(cam.width, cam.height,
                                 math.radians(cam.hfov_deg),
                                 min_depth=cam.min_depth,
                                 max_depth=cam.max_depth,
                                 extrinsic=extrinsic)


def build_env_kwargs(config: RunConfig) -> dict:
    """Keyword arguments for :class:`NavEnv` (everything but the worlds)."""
    r = config.reward
    e = config.env
    return dict(
        camera=build_camera(config),
        reward=RewardConfig(slack=r.slack, success_reward=r.success_reward,
                            success_distance=r.success_distance,
                            terminate_on_collision=r.terminate_on_collision),
        randomization=RandomizationConfig.for_conditions(
            config.randomization.conditions),
        downsample=DownsampleConfig(crop_half_extent=e.crop_half_extent,
                                    voxel_size=e.voxel_size,
                                    target_points=e.target_points),
        max_steps=e.max_steps,
        keyframes=e.keyframes,
        goal_distance=(e.goal_min, e.goal_max),
    )


def make_envs(config: RunConfig, worlds, count: int) -> list:
    kwargs = build_env_kwargs(config)
    return [NavEnv(worlds, **kwargs) for _ in range(count)]


def build_policy_config(config: RunConfig,
                        variant: str | None = None) -> PolicyConfig:
    v = normalize_variant(variant or config.encoder.variant)
    encoder = EncoderConfig(
        variant=v, resolution=(config.camera.height, config.camera.width))
    return PolicyConfig(encoder=encoder,
                        recurrent_width=config.encoder.recurrent_width,
                        input_scale=config.env.crop_half_extent,
                        max_depth=config.camera.max_depth)


def build_ppo(config: RunConfig) -> PpoConfig:
    return PpoConfig(**dataclasses.asdict(config.ppo))
