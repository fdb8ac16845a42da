import math

import numpy as np
import pytest

from navr1.oracle import (EpisodeRejected, SUCCESS_THRESHOLD, build_episode, expert_action, expert_next_actions,
                          heading_error, shortest_path)
from navr1.world import (FORWARD_STEP, NEIGHBORS, Action, Pose, World, WorldParams, apply_action, generate_world,
                         geodesic_distance, step_cost)


def corridor(length=40):
    """A one-cell-wide north/south corridor."""
    grid = np.ones((length + 2, 3), dtype=bool)
    grid[1:-1, 1] = False
    return World(grid=grid, landmarks=[], seed=-1, params=WorldParams())


def test_start_equals_goal():
    w = generate_world(0)
    cell = tuple(np.argwhere(~w.grid)[0])
    p = shortest_path(w, cell, cell)
    assert p.waypoints == [cell] and p.length == 0.0


def test_ten_cell_corridor_is_two_and_a_half_metres():
    p = shortest_path(corridor(), (1, 1), (11, 1))
    assert p.length == pytest.approx(2.5) and len(p.waypoints) == 11


def test_path_matches_geodesic_on_500_pairs():
    rng = np.random.default_rng(1)
    for i in range(500):
        w = generate_world(i % 10)
        free = np.argwhere(~w.grid)
        a, b = (tuple(int(v) for v in free[j]) for j in rng.integers(len(free), size=2))
        p = shortest_path(w, a, b)
        assert p.length == pytest.approx(geodesic_distance(w, a, b), abs=1e-9)
        steps = list(zip(p.waypoints, p.waypoints[1:]))
        assert all((c[0] - b_[0], c[1] - b_[1]) in NEIGHBORS for b_, c in steps)
        total = sum(step_cost(c[0] - b_[0], c[1] - b_[1], w.cell_size) for b_, c in steps)
        assert abs(total - p.length) < 1e-9


def test_shortest_path_is_deterministic():
    w = generate_world(5)
    free = np.argwhere(~w.grid)
    a, b = tuple(free[3]), tuple(free[-3])
    assert shortest_path(w, a, b).waypoints == shortest_path(w, a, b).waypoints


def test_expert_examples():
    w = corridor()
    start = Pose(*w.center((1, 1)), 0)
    assert expert_next_actions(w, start, (5, 1), 6) == [Action.STOP] * 6        # 1 m ahead
    assert expert_next_actions(w, start, (21, 1), 6) == [Action.FORWARD] * 6   # 5 m ahead
    # 3.5 m ahead: two forward steps bring the goal inside the threshold
    assert expert_next_actions(w, start, (15, 1), 6) == [Action.FORWARD] * 3 + [Action.STOP] * 3
    with pytest.raises(ValueError):
        expert_next_actions(w, start, (21, 1), 0)


def test_expert_turns_toward_goal_and_breaks_ties_left():
    w = corridor()
    behind = Pose(*w.center((20, 1)), 0)            # goal is 180 degrees behind
    assert expert_action(w, behind, (1, 1)) is Action.TURN_LEFT
    assert heading_error(Pose(0.0, 0.0, 0), (-1.0, 0.0)) == pytest.approx(90.0)
    assert heading_error(Pose(0.0, 0.0, 0), (1.0, 0.0)) == pytest.approx(-90.0)
    assert expert_action(w, Pose(*w.center((30, 1)), 60), (1, 1)) is Action.TURN_LEFT
    assert expert_action(w, Pose(*w.center((30, 1)), 300), (1, 1)) is Action.TURN_RIGHT


def test_prefix_property_and_label_consistency():
    rng = np.random.default_rng(2)
    for seed in range(8):
        w = generate_world(seed)
        free = np.argwhere(~w.grid)
        for _ in range(10):
            cell, goal = (tuple(int(v) for v in free[j]) for j in rng.integers(len(free), size=2))
            pose = Pose(*w.center(cell), int(rng.integers(12)) * 30)
            for n in (1, 3, 6):
                assert expert_next_actions(w, pose, goal, n) == expert_next_actions(w, pose, goal, n + 1)[:n]


def test_hundred_episodes_replay_to_success():
    rng = np.random.default_rng(3)
    done = 0
    seed = 0
    while done < 100:
        w = generate_world(seed)
        seed += 1
        free = np.argwhere(~w.grid)
        for _ in range(10):
            s, g = (tuple(int(v) for v in free[j]) for j in rng.integers(len(free), size=2))
            start = Pose(*w.center(s), int(rng.integers(12)) * 30)
            ep = build_episode(w, start, g)
            pose = start
            for t, a in enumerate(ep.actions):
                assert ep.poses[t] == pose
                assert expert_next_actions(w, pose, g, 1) == [a]
                pose = apply_action(w, pose, a)[0]
            assert ep.actions[-1] is Action.STOP and Action.STOP not in ep.actions[:-1]
            assert geodesic_distance(w, pose.cell(w.cell_size), g) < SUCCESS_THRESHOLD
            assert len(ep.frames) == len(ep.actions)
            forward = sum(a is Action.FORWARD for a in ep.actions)
            gap = geodesic_distance(w, s, g) - SUCCESS_THRESHOLD
            assert forward >= math.ceil(gap / FORWARD_STEP) - 1 or gap <= 0
            done += 1


def test_unreachable_goal_is_rejected():
    grid = np.ones((5, 7), dtype=bool)
    grid[1:4, 1:3] = False
    grid[1:4, 4:6] = False
    w = World(grid=grid, landmarks=[], seed=-1, params=WorldParams())
    with pytest.raises(EpisodeRejected):
        build_episode(w, Pose(*w.center((2, 1)), 0), (2, 5))


def test_livelock_cap():
    w = corridor(60)
    with pytest.raises(EpisodeRejected, match="did not stop"):
        build_episode(w, Pose(*w.center((1, 1)), 0), (60, 1), max_steps=5)
