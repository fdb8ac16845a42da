"""Flat ``section.key = value`` run configuration.

Every tunable lives under one section prefix (``world.size``, ``rft.gamma``,
...). Files hold one assignment per line; ``#`` starts a comment. Unknown keys
are errors. The hash covers the fully resolved key set, so two configs that
resolve to the same values share a hash whatever their spelling on disk.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .dataengine import DatasetConfig, EpisodeParams
from .memory import ConfigError, MemoryConfig
from .oracle import MAX_EPISODE_STEPS, SUCCESS_THRESHOLD
from .policy import PolicyConfig
from .rft import RftConfig
from .sft import SftConfig
from .world import WorldParams


@dataclass(frozen=True)
class EvalConfig:
    execute_k: int = 1
    max_steps: int = MAX_EPISODE_STEPS
    episodes: int = 0          # 0 = every episode of the split
    batch: int = 512

    def __post_init__(self):
        if self.execute_k < 1:
            raise ConfigError("eval.execute_k must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("eval.max_steps must be >= 1")


@dataclass(frozen=True)
class DataKeys:
    worlds: int = 200
    seed_base: int = 0
    episodes_per_world: int = 10
    n: int = 6


# section -> dataclass; seeds are driven by the top-level ``seed`` key instead
SECTIONS = {
    "world": WorldParams,
    "episode": EpisodeParams,
    "data": DataKeys,
    "memory": MemoryConfig,
    "policy": PolicyConfig,
    "sft": SftConfig,
    "rft": RftConfig,
    "eval": EvalConfig,
}
_SKIP = {("sft", "seed"), ("rft", "seed"), ("episode", "threshold")}
TOP_LEVEL = {"seed": 0, "oracle.threshold": SUCCESS_THRESHOLD}


def _defaults() -> dict[str, object]:
    out = dict(TOP_LEVEL)
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            if (sec, f.name) not in _SKIP:
                out[f"{sec}.{f.name}"] = f.default
    return out


DEFAULTS = _defaults()

# Benchmark world used by the end-to-end checks: 1 m cells, so the 11x11 view
# spans +-5 m and the goal landmark is in sight by the time a stop is due.
BENCHMARK = {
    "world.cell_size": 1.0,
    "episode.min_dist": 4.0,
    "episode.max_dist": 8.0,
    "sft.lr": 3e-3,
}


def _coerce(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text.strip()


def parse_config_text(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{no}: expected key = value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def build(cls, overrides: dict | None = None, base: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        for layer in (base or {}), (overrides or {}):
            for key, v in layer.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key {key!r}")
                like = DEFAULTS[key]
                values[key] = _coerce(key, v, like) if isinstance(v, str) and not isinstance(like, str) else v
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        base = parse_config_text(Path(path).read_text(), str(path)) if path else {}
        return cls.build(overrides, base)

    def with_values(self, **kw) -> "RunConfig":
        return RunConfig.build({k.replace("__", "."): v for k, v in kw.items()}, self.values)

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def validate(self) -> None:
        try:
            self.dataset(), self.policy(), self.sft(), self.rft(), self.eval()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def threshold(self) -> float:
        return float(self.values["oracle.threshold"])

    def world(self) -> WorldParams:
        return WorldParams(**self.section("world"))

    def dataset(self) -> DatasetConfig:
        episode = EpisodeParams(**self.section("episode"), threshold=self.threshold)
        return DatasetConfig(**self.section("data"), world=self.world(), episode=episode,
                             memory=MemoryConfig(**self.section("memory")))

    def policy(self) -> PolicyConfig:
        return PolicyConfig(**self.section("policy"))

    def sft(self) -> SftConfig:
        try:
            return SftConfig(**self.section("sft"), seed=self.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def rft(self) -> RftConfig:
        return RftConfig(**self.section("rft"), seed=self.seed)

    def eval(self) -> EvalConfig:
        return EvalConfig(**self.section("eval"))

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def hash(self, keys: tuple[str, ...] | None = None) -> str:
        """sha256 over the resolved values (optionally only the listed sections)."""
        items = sorted(self.values.items())
        if keys is not None:
            items = [(k, v) for k, v in items if k.split(".")[0] in keys or k in keys]
        return hashlib.sha256(repr(items).encode()).hexdigest()[:16]


DATA_SECTIONS = ("world", "episode", "data", "memory", "oracle.threshold")
