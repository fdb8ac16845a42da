"""Expert planner: shortest paths and the greedy follower that labels every step."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .world import (
    NEIGHBORS, Action, Frame, Pose, World, apply_action, can_step, distance_field,
    render_frame, step_cost,
)

SUCCESS_THRESHOLD = 3.0
ALIGN_TOLERANCE = 15.0
MAX_EPISODE_STEPS = 200


class EpisodeRejected(RuntimeError):
    pass


@dataclass
class ExpertPath:
    waypoints: list[tuple[int, int]]
    length: float


@dataclass
class Episode:
    world: World
    start: Pose
    goal: tuple[int, int]
    actions: list[Action] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)     # pose before each action
    frames: list[Frame] = field(default_factory=list)   # frame before each action

    def __len__(self) -> int:
        return len(self.actions)


def shortest_path(world: World, start: tuple[int, int], goal: tuple[int, int]) -> ExpertPath:
    """Dijkstra over 8-connected free cells, expanding neighbours in (dy, dx) order."""
    start, goal = tuple(start), tuple(goal)
    cs = world.cell_size
    dist = {start: 0.0}
    prev: dict[tuple[int, int], tuple[int, int]] = {}
    heap = [(0.0, 0, start)]
    counter = 1
    done = set()
    while heap:
        d, _, cell = heapq.heappop(heap)
        if cell in done:
            continue
        done.add(cell)
        if cell == goal:
            break
        for dy, dx in NEIGHBORS:
            if not can_step(world, cell, dy, dx):
                continue
            nxt = (cell[0] + dy, cell[1] + dx)
            nd = d + step_cost(dy, dx, cs)
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                prev[nxt] = cell
                heapq.heappush(heap, (nd, counter, nxt))
                counter += 1
    if goal not in dist:
        return ExpertPath([start], math.inf)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    path.reverse()
    return ExpertPath(path, dist[goal])


def next_waypoint(world: World, cell: tuple[int, int], goal: tuple[int, int]) -> tuple[int, int]:
    if cell == goal:
        return goal
    field_ = distance_field(world, goal)
    cs = world.cell_size
    best, best_cost = cell, math.inf
    for dy, dx in NEIGHBORS:
        if can_step(world, cell, dy, dx):
            cost = step_cost(dy, dx, cs) + field_[cell[0] + dy, cell[1] + dx]
            if cost < best_cost:
                best, best_cost = (cell[0] + dy, cell[1] + dx), cost
    return best


def heading_error(pose: Pose, target_xy: tuple[float, float]) -> float:
    """Signed degrees to turn left (positive) to face ``target_xy``."""
    dx, dy = target_xy[0] - pose.x, target_xy[1] - pose.y
    bearing = math.degrees(math.atan2(-dx, dy))
    return (bearing - pose.heading + 180.0) % 360.0 - 180.0


def expert_action(world: World, pose: Pose, goal: tuple[int, int],
                  threshold: float = SUCCESS_THRESHOLD) -> Action:
    cell = pose.cell(world.cell_size)
    if distance_field(world, goal)[cell] < threshold:
        return Action.STOP
    err = heading_error(pose, world.center(next_waypoint(world, cell, goal)))
    if abs(err) > ALIGN_TOLERANCE:
        # |err| == 180 falls through to the left turn
        return Action.TURN_RIGHT if err < 0 and err != -180.0 else Action.TURN_LEFT
    return Action.FORWARD


def expert_next_actions(world: World, pose: Pose, goal: tuple[int, int], n: int,
                        threshold: float = SUCCESS_THRESHOLD) -> list[Action]:
    """Simulate the follower ``n`` steps ahead; everything after STOP is STOP."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out: list[Action] = []
    while len(out) < n:
        a = expert_action(world, pose, goal, threshold)
        if a is Action.STOP:
            out.extend([Action.STOP] * (n - len(out)))
            break
        out.append(a)
        pose, _, _ = apply_action(world, pose, a)
    return out


def build_episode(world: World, start: Pose, goal: tuple[int, int],
                  threshold: float = SUCCESS_THRESHOLD,
                  max_steps: int = MAX_EPISODE_STEPS) -> Episode:
    """Roll the follower out to STOP, recording a frame before every action."""
    if not np.isfinite(distance_field(world, goal)[start.cell(world.cell_size)]):
        raise EpisodeRejected("goal unreachable from start")
    ep = Episode(world, start, tuple(goal))
    pose = start
    for t in range(max_steps):
        a = expert_action(world, pose, goal, threshold)
        ep.poses.append(pose)
        ep.frames.append(render_frame(world, pose, t))
        ep.actions.append(a)
        if a is Action.STOP:
            return ep
        pose, _, _ = apply_action(world, pose, a)
    raise EpisodeRejected(f"follower did not stop within {max_steps} steps")
