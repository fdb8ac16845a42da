"""End-to-end stages wired from a :class:`RunConfig`: data, SFT, RFT, evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .config import RunConfig
from .dataengine import EpisodeSpec, generate_records, world_episodes
from .evaluation import (EpisodeResult, MetricsSummary, OracleNavigator, PolicyNavigator,
                         RandomNavigator, compute_metrics, rollout_many)
from .memory import ConfigError
from .rft import RftResult, train_rft
from .sft import SftResult, train_sft
from .world import SPLITS

Log = Callable[[dict], None] | None


def eval_specs(cfg: RunConfig, split: str) -> list[EpisodeSpec]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    data = cfg.dataset()
    seeds = data.seeds(split)
    if not seeds:
        raise ConfigError(f"split {split!r} has no worlds with data.worlds={data.worlds}")
    specs = [s for seed in seeds for s in world_episodes(data, seed)[0]]
    limit = cfg.eval().episodes
    return specs[:limit] if limit else specs


def make_navigator(kind: str, cfg: RunConfig, params=None):
    if kind == "oracle":
        return OracleNavigator(cfg.dataset().n, cfg.threshold)
    if kind == "random":
        return RandomNavigator(cfg.seed)
    if params is None:
        raise ConfigError("policy evaluation needs a checkpoint")
    return PolicyNavigator(params, cfg.dataset().n, cfg.eval().batch)


def evaluate(cfg: RunConfig, navigator, split: str = "val-unseen",
             specs: list[EpisodeSpec] | None = None) -> tuple[list[EpisodeResult], MetricsSummary]:
    ev = cfg.eval()
    specs = specs if specs is not None else eval_specs(cfg, split)
    results = rollout_many(navigator, specs, cfg.dataset().memory, ev.max_steps, ev.execute_k, cfg.threshold)
    return results, compute_metrics(results, cfg.threshold)


def run_sft(cfg: RunConfig, records: dict, log: Log = None) -> SftResult:
    return train_sft(records["train"], cfg.sft(), val=records.get("val-seen"), policy=cfg.policy(), log=log)


def run_rft(cfg: RunConfig, sft_params, records: dict, log: Log = None) -> RftResult:
    return train_rft(sft_params, records["train"], cfg.rft(), log=log)


@dataclass
class Benchmark:
    """SR/OS/SPL of random, SFT and RFT (one entry per reward type) on one config."""
    random: MetricsSummary
    sft: MetricsSummary
    rft: dict[str, MetricsSummary] = field(default_factory=dict)


def run_benchmark(cfg: RunConfig, rewards=("tdr",), split: str = "val-unseen", log: Log = None) -> Benchmark:
    records, _ = generate_records(cfg.dataset())
    specs = eval_specs(cfg, split)
    _, random = evaluate(cfg, make_navigator("random", cfg), specs=specs)
    sft = run_sft(cfg, records, log)
    _, sft_m = evaluate(cfg, make_navigator("policy", cfg, sft.params), specs=specs)
    out = Benchmark(random, sft_m)
    for reward in rewards:
        rft = run_rft(cfg.with_values(rft__reward=reward), sft.params, records, log)
        out.rft[reward] = evaluate(cfg, make_navigator("policy", cfg, rft.params), specs=specs)[1]
    return out
