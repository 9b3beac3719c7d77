"""Experiment configuration: YAML file < DESKNAV__SECTION__KEY env vars < CLI flags.

Every section maps onto a dataclass; unknown sections or keys are rejected
with the offending path and, when it came from a file, the line number.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

import yaml

from .env import EnvConfig, RobotConfig, WorldSpec
from .nn.policy import PolicyConfig
from .ppo import PpoConfig
from .reward import RewardWeights
from .shield import ShieldConfig
from .state import EncoderConfig
from .tracker import TrackerConfig
from .voxelmap import RayConfig

ENV_PREFIX = "DESKNAV__"


class ConfigError(ValueError):
    def __init__(self, msg, path=None, line=None):
        where = ""
        if path:
            where += f"{path}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + msg)
        self.path, self.line = path, line


@dataclass(frozen=True)
class EnvSection:
    resolution: float = 0.25
    detect_range: float = 6.0
    detect_noise: float = 0.05
    collision_debounce: float = 1.0
    n_d: int = 5


@dataclass(frozen=True)
class CurriculumSection:
    schedule: tuple = (10, 13, 16, 19)
    window: int = 100
    threshold: float = 0.8


@dataclass(frozen=True)
class ShieldSection:
    enabled: bool = False
    tau: float = 2.0
    margin: float = 0.1
    k_static: int = 15
    refine_rounds: int = 2

    def shield_config(self):
        return ShieldConfig(self.tau, self.margin, self.k_static, self.refine_rounds)


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    deterministic: bool = False
    max_updates: typing.Optional[int] = None
    max_steps: typing.Optional[int] = 5_000_000
    max_seconds: typing.Optional[float] = None
    checkpoint_every: int = 10
    bench_runs: int = 20


SECTIONS = {
    "world": WorldSpec,
    "robot": RobotConfig,
    "rays": RayConfig,
    "env": EnvSection,
    "reward": RewardWeights,
    "tracker": TrackerConfig,
    "curriculum": CurriculumSection,
    "policy": PolicyConfig,
    "ppo": PpoConfig,
    "shield": ShieldSection,
    "run": RunSection,
}
# fields owned elsewhere (world seeds are derived per episode; widths follow the encoder)
HIDDEN = {"world": {"seed"}, "policy": {"n_h", "n_v", "n_d", "dyn_width", "int_width", "action_dim"}}


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    robot: RobotConfig = field(default_factory=RobotConfig)
    rays: RayConfig = field(default_factory=RayConfig)
    env: EnvSection = field(default_factory=EnvSection)
    reward: RewardWeights = field(default_factory=RewardWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    shield: ShieldSection = field(default_factory=ShieldSection)
    run: RunSection = field(default_factory=RunSection)

    def env_config(self, terminate_on_collision=True, world=None) -> EnvConfig:
        e = self.env
        return EnvConfig(world=world or self.world, robot=self.robot,
                         encoder=EncoderConfig(n_d=e.n_d, ray=self.rays), reward=self.reward,
                         tracker=self.tracker, resolution=e.resolution, detect_range=e.detect_range,
                         detect_noise=e.detect_noise, dynamic_schedule=tuple(self.curriculum.schedule),
                         success_window=self.curriculum.window, success_threshold=self.curriculum.threshold,
                         terminate_on_collision=terminate_on_collision, collision_debounce=e.collision_debounce)

    def policy_config(self) -> PolicyConfig:
        return dataclasses.replace(self.policy, n_h=self.rays.n_h, n_v=self.rays.n_v, n_d=self.env.n_d)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            hidden = HIDDEN.get(name, set())
            out[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec) if f.name not in hidden}
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


# ------------------------------------------------------------------ coercion

def _coerce(value, hint, default, path, line):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path, line)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path, line)
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path, line)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path, line)
        return value
    if hint is tuple or isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path, line)
        return tuple(_coerce_item(x, path, line) for x in value)
    return value


def _coerce_item(x, path, line):
    if isinstance(x, (list, tuple)):
        return tuple(_coerce_item(y, path, line) for y in x)
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"list items must be numbers, got {x!r}", path, line)
    return x


def build(data: dict, lines: dict | None = None) -> ExperimentConfig:
    """Construct a config from nested plain data, validating everything."""
    lines = lines or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", None, lines.get(()))
    kwargs = {}
    for name, sec in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section (allowed: {', '.join(SECTIONS)})", name, lines.get((name,)))
        cls = SECTIONS[name]
        if sec is None:
            sec = {}
        if not isinstance(sec, dict):
            raise ConfigError("section must be a mapping", name, lines.get((name,)))
        hints = typing.get_type_hints(cls)
        defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                    for f in fields(cls)}
        allowed = [k for k in defaults if k not in HIDDEN.get(name, set())]
        vals = {}
        for k, v in sec.items():
            path = f"{name}.{k}"
            line = lines.get((name, k))
            if k not in allowed:
                raise ConfigError(f"unknown key (allowed: {', '.join(allowed)})", path, line)
            vals[k] = _coerce(v, hints.get(k, type(defaults[k])), defaults[k], path, line)
        try:
            kwargs[name] = cls(**vals)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e), name, lines.get((name,))) from None
    cfg = ExperimentConfig(**kwargs)
    try:
        cfg.env_config()
        cfg.policy_config()
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def _node_to_data(node, path, lines):
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError("duplicate key", ".".join(path + (key,)), k.start_mark.line + 1)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _node_to_data(v, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_data(v, path, lines) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def parse_text(text: str):
    """YAML text -> (nested data, {path tuple: line})."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise ConfigError(f"YAML syntax error: {e.problem}", None, line) from None
    lines = {}
    if node is None:
        return {}, lines
    return _node_to_data(node, (), lines), lines


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def env_overrides(environ=None):
    """DESKNAV__SECTION__KEY=<yaml scalar> -> nested dict."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError("environment override must look like DESKNAV__SECTION__KEY", name)
        try:
            val = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"cannot parse value {raw!r}", name) from None
        out.setdefault(parts[0], {})[parts[1]] = val
    return out


def load(path=None, environ=None, flags: dict | None = None) -> ExperimentConfig:
    """Layered load: file, then environment, then explicit flag overrides."""
    data, lines = {}, {}
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
        data, lines = parse_text(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", None, 1)
    data = _merge(data, env_overrides(environ))
    if flags:
        data = _merge(data, flags)
    return build(data, lines)


def loads(text: str) -> ExperimentConfig:
    data, lines = parse_text(text)
    return build(data, lines)
