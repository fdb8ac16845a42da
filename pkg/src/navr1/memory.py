"""History-frame selection: long-short memory sampling and its ablation baselines."""
from __future__ import annotations

from dataclasses import dataclass

STRATEGIES = ("long-short", "average-k", "exponential-decay")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    strategy: str = "long-short"
    M: int = 8
    delta1: int = 1
    delta2: int = 4
    k: int = 8
    max_frames: int = 16

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown memory strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.max_frames < 1:
            raise ConfigError("memory.max_frames must be >= 1")
        if self.strategy == "long-short":
            if not self.delta2 > self.delta1 >= 1:
                raise ConfigError(f"need delta2 > delta1 >= 1, got delta1={self.delta1} delta2={self.delta2}")
            if self.M < self.delta1:
                raise ConfigError(f"need M >= delta1, got M={self.M} delta1={self.delta1}")
        if self.strategy == "average-k" and self.k < 1:
            raise ConfigError(f"need k >= 1, got k={self.k}")


def _long_short(t: int, M: int, d1: int, d2: int) -> list[int]:
    floor = max(0, t - M)
    short = range(t - d1, floor - 1, -d1)
    long_ = range(t - M - d2, -1, -d2)
    return sorted(set(short) | set(long_))


def _average(t: int, k: int) -> list[int]:
    if t <= k:
        return list(range(t))
    return [i * t // k for i in range(k)]


def _exponential(t: int) -> list[int]:
    out, back = set(), 1
    while t - back >= 0:
        out.add(t - back)
        back *= 2
    return sorted(out)


def select_history(t: int, cfg: MemoryConfig) -> list[int]:
    """Strictly increasing frame indices below ``t``, capped at ``cfg.max_frames``.

    The cap drops the oldest indices first.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if cfg.strategy == "long-short":
        idx = _long_short(t, cfg.M, cfg.delta1, cfg.delta2)
    elif cfg.strategy == "average-k":
        idx = _average(t, cfg.k)
    else:
        idx = _exponential(t)
    return idx[-cfg.max_frames:]
