"""Closed-loop roll-outs in held-out worlds and VLN-CE style metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataengine import EpisodeSpec
from .memory import MemoryConfig, select_history
from .oracle import SUCCESS_THRESHOLD, expert_next_actions
from .policy import greedy_actions
from .world import ACTIONS, Action, Frame, Pose, World, apply_action, distance_field, render_frame


@dataclass
class EpisodeResult:
    episode_id: str
    poses: list[Pose]
    actions: list[Action]
    stop_step: int | None
    ne: float
    min_dist: float
    tl: float
    shortest: float
    success: bool
    collisions: int = 0

    def row(self) -> dict:
        return {"episode": self.episode_id, "success": self.success, "stop_step": self.stop_step,
                "steps": len(self.actions), "ne": self.ne, "min_dist": self.min_dist,
                "tl": self.tl, "shortest": self.shortest, "collisions": self.collisions}


@dataclass
class MetricsSummary:
    sr: float
    os: float
    spl: float
    ne: float
    tl: float
    episodes: int

    def as_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.__dict__.items())


@dataclass
class LiveEpisode:
    """Mutable roll-out state; doubles as a prompt (``instruction``/``frames``) for the policy."""
    spec: EpisodeSpec
    pose: Pose
    history: list[Frame] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)
    actions: list[Action] = field(default_factory=list)
    queue: list[Action] = field(default_factory=list)
    stopped: bool = False
    collisions: int = 0
    memory: MemoryConfig | None = None

    @property
    def world(self) -> World:
        return self.spec.world

    @property
    def t(self) -> int:
        return len(self.history) - 1

    @property
    def instruction(self):
        return self.spec.instruction

    @property
    def frames(self) -> list[Frame]:
        idx = select_history(self.t, self.memory or MemoryConfig())
        return [self.history[i] for i in idx] + [self.history[-1]]


class OracleNavigator:
    def __init__(self, n: int = 6, threshold: float = SUCCESS_THRESHOLD):
        self.n, self.threshold = n, threshold

    def decide(self, states: list[LiveEpisode], k: int) -> list[list[Action]]:
        return [expert_next_actions(s.world, s.pose, s.spec.goal, self.n, self.threshold)[:k] for s in states]


class RandomNavigator:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng([seed, 31])

    def decide(self, states, k: int) -> list[list[Action]]:
        return [[ACTIONS[int(i)] for i in self.rng.integers(4, size=k)] for _ in states]


class PolicyNavigator:
    """Greedy decoding. Only the first ``k`` blocks are decoded: greedy decoding is
    prefix-stable, so they equal the first ``k`` of a full ``n``-block decode."""

    def __init__(self, params, n: int = 6, batch: int = 512):
        self.params, self.n, self.batch = params, n, batch

    def decide(self, states, k: int) -> list[list[Action]]:
        k = min(k, self.n)
        out = []
        for i in range(0, len(states), self.batch):
            out.extend(greedy_actions(self.params, states[i:i + self.batch], k))
        return out


def rollout_many(navigator, specs: list[EpisodeSpec], memory: MemoryConfig | None = None,
                 max_steps: int = 200, execute_k: int = 1,
                 threshold: float = SUCCESS_THRESHOLD) -> list[EpisodeResult]:
    """Run all episodes in lock-step so policy calls are batched."""
    if execute_k < 1:
        raise ValueError("execute_k must be >= 1")
    live = []
    for s in specs:
        e = LiveEpisode(s, s.start, memory=memory)
        e.history.append(render_frame(s.world, s.start, 0))
        e.poses.append(s.start)
        live.append(e)
    active = list(live)
    while active:
        need = [e for e in active if not e.queue]
        if need:
            for e, plan in zip(need, navigator.decide(need, execute_k)):
                e.queue = list(plan[:execute_k])
        still = []
        for e in active:
            a = e.queue.pop(0)
            e.actions.append(a)
            pose, collided, stopped = apply_action(e.world, e.pose, a)
            e.collisions += collided
            if stopped:
                e.stopped = True
                continue
            e.pose = pose
            e.poses.append(pose)
            if len(e.actions) >= max_steps:
                continue
            e.history.append(render_frame(e.world, pose, len(e.history)))
            still.append(e)
        active = still
    return [_result(e, threshold) for e in live]


def rollout(navigator, spec: EpisodeSpec, memory: MemoryConfig | None = None, max_steps: int = 200,
            execute_k: int = 1, threshold: float = SUCCESS_THRESHOLD) -> EpisodeResult:
    return rollout_many(navigator, [spec], memory, max_steps, execute_k, threshold)[0]


def _result(e: LiveEpisode, threshold: float) -> EpisodeResult:
    world, cs = e.world, e.world.cell_size
    field_ = distance_field(world, e.spec.goal)
    dists = [float(field_[p.cell(cs)]) for p in e.poses]
    tl = float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(e.poses, e.poses[1:])))
    ne = dists[-1]
    return EpisodeResult(
        episode_id=f"{world.seed}/{e.spec.index}",
        poses=list(e.poses), actions=list(e.actions),
        stop_step=len(e.actions) - 1 if e.stopped else None,
        ne=ne, min_dist=min(dists), tl=tl, shortest=dists[0],
        success=bool(e.stopped and ne < threshold), collisions=e.collisions,
    )


def compute_metrics(results: list[EpisodeResult], threshold: float = SUCCESS_THRESHOLD) -> MetricsSummary:
    if not results:
        raise ValueError("compute_metrics needs at least one episode")
    spl = [r.success * (r.shortest / max(r.shortest, r.tl)) if r.success and r.shortest > 0 else float(r.success)
           for r in results]
    return MetricsSummary(
        sr=float(np.mean([r.success for r in results])),
        os=float(np.mean([r.min_dist < threshold for r in results])),
        spl=float(np.mean(spl)),
        ne=float(np.mean([r.ne for r in results])),
        tl=float(np.mean([r.tl for r in results])),
        episodes=len(results),
    )


def render_trajectory(world: World, result: EpisodeResult, goal: tuple[int, int], path: str | Path,
                      scale: int = 8) -> None:
    """Top-down PNG: walls dark, landmarks blue, trajectory red, goal green."""
    from PIL import Image

    h, w = world.grid.shape
    img = np.where(world.grid[..., None], 40, 235).astype(np.uint8).repeat(3, axis=2)
    for _, (r, c) in world.landmarks:
        img[r, c] = (60, 90, 220)
    img[goal] = (40, 180, 60)
    for p in result.poses:
        r, c = p.cell(world.cell_size)
        img[r, c] = (220, 40, 40)
    img = img[::-1].repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img).save(path)
