"""Stage 2: GRPO over sampled action texts with verifiable, label-matching rewards."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_ad as ad
from .memory import ConfigError
from .policy import choice_mask, copy_params, decode, sequence_reduce, token_log_probs
from .world import Action

REWARD_TYPES = ("hard", "uniform", "linear", "tdr")


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class RftConfig:
    G: int = 8
    beta: float = 0.04
    eps: float = 0.2
    gamma: float = 0.9
    lr: float = 1e-4
    weight_decay: float = 0.01
    reward: str = "tdr"
    adv_eps: float = 1e-8
    batch_prompts: int = 8
    steps: int = 500
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.G < 2:
            raise ConfigError(f"G must be >= 2, got {self.G}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"eps must be in (0, 1), got {self.eps}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.reward not in REWARD_TYPES:
            raise ConfigError(f"unknown reward type {self.reward!r}; expected one of {REWARD_TYPES}")


# ---------------------------------------------------------------- rewards


def _matches(pred: Sequence[Action | None], gt: Sequence[Action]) -> list[bool]:
    if len(pred) != len(gt):
        raise ContractError(f"prediction has {len(pred)} actions, ground truth {len(gt)}")
    return [p is not None and p == g for p, g in zip(pred, gt)]


def reward_tdr(pred, gt, gamma: float) -> float:
    """Time-decayed match reward: sum of gamma**k over matching steps k."""
    return float(sum(gamma ** k for k, m in enumerate(_matches(pred, gt)) if m))


def reward_variant(pred, gt, kind: str, gamma: float = 0.9) -> float:
    if kind == "tdr":
        return reward_tdr(pred, gt, gamma)
    if kind not in REWARD_TYPES:
        raise ConfigError(f"unknown reward type {kind!r}")
    m = _matches(pred, gt)
    n = len(m)
    if kind == "hard":
        return float(all(m))
    if kind == "uniform":
        return sum(m) / n
    return float(sum((n - k) / n for k, hit in enumerate(m) if hit))


def group_advantages(rewards, eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractError("a group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    # eps only guards the division; adding it to std would bias the variance for small spreads
    return (r - r.mean()) / max(r.std(), eps)


def kl_estimate(logp_theta, logp_ref):
    """exp(d) - d - 1 with d = logp_ref - logp_theta; works on floats and tensors."""
    if isinstance(logp_theta, ad.Tensor) or isinstance(logp_ref, ad.Tensor):
        delta = ad.sub(logp_ref, logp_theta)
        return ad.sub(ad.sub(ad.exp(delta), delta), 1.0)
    delta = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    out = np.expm1(delta) - delta
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- objective


@dataclass
class GroupRollout:
    """One prompt's G responses; log-probs are per sequence, length-normalised."""
    record_id: str
    tokens: list[list[int]]
    actions: list[list[Action]]
    logp_old: np.ndarray
    logp_ref: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    logp_theta: np.ndarray | None = None
    token_logp_old: list[np.ndarray] = field(default_factory=list)


def grpo_objective(logp_theta, logp_old, logp_ref, advantages, eps: float, beta: float) -> ad.Tensor:
    """Mean clipped surrogate minus beta times the KL estimate; to be maximised."""
    lt = logp_theta if isinstance(logp_theta, ad.Tensor) else ad.Tensor(np.atleast_1d(logp_theta))
    adv = np.atleast_1d(np.asarray(advantages, dtype=np.float64))
    ratio = ad.exp(ad.sub(lt, np.atleast_1d(np.asarray(logp_old, dtype=np.float64))))
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv))
    kl = kl_estimate(lt, ad.Tensor(np.atleast_1d(np.asarray(logp_ref, dtype=np.float64))))
    return ad.mean(ad.sub(surr, ad.mul(kl, beta)))


def group_objective(group: GroupRollout, eps: float, beta: float) -> float:
    lt = group.logp_theta if group.logp_theta is not None else group.logp_old
    return grpo_objective(lt, group.logp_old, group.logp_ref, group.advantages, eps, beta).item()


# ---------------------------------------------------------------- training


def score(actions: list[Action], gt: list[Action], cfg: RftConfig) -> float:
    return reward_variant(actions, gt, cfg.reward, cfg.gamma)


def rft_step(params, ref_params, prompts, cfg: RftConfig, state: ad.AdamState,
             rng: np.random.Generator) -> tuple[dict, list[GroupRollout]]:
    """Sample G responses per prompt, score them, take one Adam step on the GRPO objective."""
    expanded = [p for p in prompts for _ in range(cfg.G)]
    n = len(prompts[0].gt)
    responses = decode(params, expanded, n, rng=rng, temperature=cfg.temperature)
    tokens = [r.tokens for r in responses]
    ref_tok, seq_of = token_log_probs(ref_params, expanded, tokens, constrained=True)
    old_tok = ad.Tensor(np.concatenate([r.log_probs for r in responses]))
    # description tokens are forced, so only identifiers carry sampling log-prob;
    # same reduction as the live pass below, so the first-pass ratio is exactly 1
    keep = choice_mask(tokens)
    logp_old = sequence_reduce(old_tok, seq_of, len(expanded), True, keep).data
    logp_ref = sequence_reduce(ref_tok, seq_of, len(expanded), True, keep).data

    groups, adv = [], np.zeros(len(expanded))
    for j, p in enumerate(prompts):
        sl = slice(j * cfg.G, (j + 1) * cfg.G)
        gt = p.gt_actions
        rewards = np.array([score(r.actions, gt, cfg) for r in responses[sl]])
        a = group_advantages(rewards, cfg.adv_eps)
        adv[sl] = a
        groups.append(GroupRollout(p.record_id, tokens[sl], [r.actions for r in responses[sl]],
                                   logp_old[sl], logp_ref[sl], rewards, a,
                                   token_logp_old=[r.log_probs for r in responses[sl]]))

    for p in params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        tok, seq_of = token_log_probs(params, expanded, tokens, constrained=True)
        lt = sequence_reduce(tok, seq_of, len(expanded), True, keep)
        obj = grpo_objective(lt, logp_old, logp_ref, adv, cfg.eps, cfg.beta)
        if not np.isfinite(obj.item()):
            raise ArithmeticError(f"non-finite GRPO objective on prompts {[p.record_id for p in prompts]}")
        ad.backward(ad.mul(obj, -1.0), tape)
    for g, j in zip(groups, range(len(prompts))):
        g.logp_theta = lt.data[j * cfg.G:(j + 1) * cfg.G].copy()
    ad.adam_step(params, {k: p.grad for k, p in params.items()}, cfg.lr, cfg.weight_decay, state)

    ratio = np.exp(lt.data - logp_old)
    stats = {
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "mean_kl": float(np.mean(kl_estimate(lt.data, logp_ref))),
        "clip_frac": float(np.mean((ratio < 1 - cfg.eps) | (ratio > 1 + cfg.eps))),
        "objective": obj.item(),
        "reward_type": cfg.reward,
    }
    return stats, groups


@dataclass
class RftResult:
    params: dict
    stats: list[dict]


def train_rft(sft_params, records, cfg: RftConfig,
              log: Callable[[dict], None] | None = None) -> RftResult:
    """GRPO from an SFT checkpoint; the checkpoint itself is frozen as the KL reference."""
    if not records:
        raise ContractError("no RFT prompts")
    params = copy_params(sft_params)
    ref = copy_params(sft_params, requires_grad=False)
    rng = np.random.default_rng([cfg.seed, 23])
    state = ad.AdamState()
    stats = []
    for step in range(1, cfg.steps + 1):
        pick = rng.choice(len(records), size=min(cfg.batch_prompts, len(records)), replace=False)
        row, _ = rft_step(params, ref, [records[i] for i in pick], cfg, state, rng)
        row = {"step": step, **row}
        stats.append(row)
        if log:
            log(row)
    return RftResult(params, stats)


def mean_reward(params, records, cfg: RftConfig, rng: np.random.Generator, samples: int = 1) -> float:
    """Average sampled reward over ``records`` (diagnostic)."""
    total, count = 0.0, 0
    n = len(records[0].gt)
    for _ in range(samples):
        for i in range(0, len(records), 256):
            chunk = records[i:i + 256]
            for r, rec in zip(decode(params, chunk, n, rng=rng, temperature=cfg.temperature,
                                     with_log_probs=False), chunk):
                total += score(r.actions, rec.gt_actions, cfg)
                count += 1
    return total / max(1, count)
