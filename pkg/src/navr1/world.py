"""Continuous 2-D navigation worlds on an occupancy grid.

Coordinates: cell ``(row, col)`` covers ``y in [row*cs, (row+1)*cs)`` and
``x in [col*cs, (col+1)*cs)``. Heading 0 points along +y; TURN-LEFT adds 30
degrees (counter-clockwise).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

FORWARD_STEP = 0.25
TURN_DEG = 30
VIEW = 11
WORLD_FORMAT = "NAVR1-WORLD v1"
SPLITS = ("train", "val-seen", "val-unseen")

LANDMARK_NAMES = (
    "sofa", "table", "lamp", "door", "plant", "bed", "sink", "chair",
    "piano", "stairs", "fridge", "oven", "desk", "shelf", "mirror", "rug",
    "clock", "vase", "bench", "window", "fireplace", "toilet", "bathtub", "closet",
    "painting", "tv", "couch", "dresser", "stool", "cabinet", "counter", "washer",
    "dryer", "fountain", "statue", "pillar", "railing", "archway", "curtain", "radiator",
)
LANDMARK_VOCAB = len(LANDMARK_NAMES) + 1  # id 0 = no landmark

# 8-neighbourhood in lexicographic (dy, dx) order; this order is the tie-break everywhere
NEIGHBORS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


class GenerationError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


class Action(enum.Enum):
    FORWARD = "A"
    TURN_LEFT = "B"
    TURN_RIGHT = "C"
    STOP = "D"

    @property
    def letter(self) -> str:
        return self.value

    @classmethod
    def from_letter(cls, letter: str) -> "Action":
        return cls(letter)


ACTIONS = tuple(Action)


def _trig(deg: int) -> tuple[float, float]:
    r = math.radians(deg)
    return round(math.sin(r), 12) + 0.0, round(math.cos(r), 12) + 0.0


_SIN_COS = {h: _trig(h) for h in range(0, 360, TURN_DEG)}


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int

    def cell(self, cell_size: float) -> tuple[int, int]:
        return int(math.floor(self.y / cell_size)), int(math.floor(self.x / cell_size))


@dataclass(frozen=True)
class Frame:
    raster: np.ndarray  # int8 [2, VIEW, VIEW]: occupancy, landmark id
    step: int

    def __eq__(self, other):
        return isinstance(other, Frame) and self.step == other.step \
            and np.array_equal(self.raster, other.raster)


@dataclass(frozen=True)
class WorldParams:
    size: int = 32
    landmarks: int = 8
    min_room: int = 5
    door_width: int = 3
    obstacles: int = 6
    cell_size: float = 0.25

    def __post_init__(self):
        if self.size < 16:
            raise GenerationError(f"world size {self.size} < 16")
        if self.landmarks < 3:
            raise GenerationError(f"landmark count {self.landmarks} < 3")
        if self.landmarks > len(LANDMARK_NAMES):
            raise GenerationError(f"at most {len(LANDMARK_NAMES)} landmark names available")


@dataclass(eq=False)
class World:
    grid: np.ndarray                         # bool [H, W], True = blocked
    landmarks: list[tuple[str, tuple[int, int]]]
    seed: int
    params: WorldParams
    split: str = "train"
    _graph: csr_matrix | None = field(default=None, repr=False)
    _fields: dict = field(default_factory=dict, repr=False)
    _lm_ids: np.ndarray | None = field(default=None, repr=False)

    @property
    def cell_size(self) -> float:
        return self.params.cell_size

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def is_free(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        h, w = self.grid.shape
        return 0 <= r < h and 0 <= c < w and not self.grid[r, c]

    def center(self, cell: tuple[int, int]) -> tuple[float, float]:
        """Continuous (x, y) of a cell centre."""
        cs = self.cell_size
        return (cell[1] + 0.5) * cs, (cell[0] + 0.5) * cs

    def landmark_ids(self) -> np.ndarray:
        """Per-cell landmark id raster (0 = none)."""
        if self._lm_ids is None:
            ids = np.zeros(self.grid.shape, dtype=np.int8)
            for name, (r, c) in self.landmarks:
                ids[r, c] = LANDMARK_NAMES.index(name) + 1
            self._lm_ids = ids
        return self._lm_ids

    def same_as(self, other: "World") -> bool:
        return (self.seed == other.seed and self.params == other.params
                and np.array_equal(self.grid, other.grid) and self.landmarks == other.landmarks)


# ---------------------------------------------------------------- generation


def _divide(grid, rng, r0, c0, r1, c1, p: WorldParams) -> None:
    h, w = r1 - r0 + 1, c1 - c0 + 1
    can_h = h >= 2 * p.min_room + 1
    can_v = w >= 2 * p.min_room + 1
    if not (can_h or can_v):
        return
    horizontal = can_h and (not can_v or h > w or (h == w and rng.random() < 0.5))
    if horizontal:
        r = int(rng.integers(r0 + p.min_room, r1 - p.min_room + 1))
        grid[r, c0:c1 + 1] = True
        d = int(rng.integers(c0, c1 - p.door_width + 2))
        grid[r, d:d + p.door_width] = False
        _divide(grid, rng, r0, c0, r - 1, c1, p)
        _divide(grid, rng, r + 1, c0, r1, c1, p)
    else:
        c = int(rng.integers(c0 + p.min_room, c1 - p.min_room + 1))
        grid[r0:r1 + 1, c] = True
        d = int(rng.integers(r0, r1 - p.door_width + 2))
        grid[d:d + p.door_width, c] = False
        _divide(grid, rng, r0, c0, r1, c - 1, p)
        _divide(grid, rng, r0, c + 1, r1, c1, p)


def _components(free: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(free)  # 4-connectivity


def generate_world(seed: int, params: WorldParams | None = None, split: str = "train") -> World:
    """Rooms and corridors by recursive partition, furniture blocks, then landmarks."""
    p = params or WorldParams()
    rng = np.random.default_rng(seed)
    n = p.size
    grid = np.zeros((n, n), dtype=bool)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = True
    _divide(grid, rng, 1, 1, n - 2, n - 2, p)

    for _ in range(p.obstacles):
        bh, bw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        r, c = int(rng.integers(1, n - bh)), int(rng.integers(1, n - bw))
        block = grid[r:r + bh, c:c + bw]
        if block.any():
            continue
        grid[r:r + bh, c:c + bw] = True
        if _components(~grid)[1] != 1:
            grid[r:r + bh, c:c + bw] = False

    # connectivity repair: keep the largest component
    labels, count = _components(~grid)
    if count > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        grid[labels != int(np.argmax(sizes))] = True

    free = np.argwhere(~grid)
    if len(free) < p.landmarks:
        raise GenerationError(f"{p.landmarks} landmarks requested, only {len(free)} free cells")
    cells = free[rng.choice(len(free), size=p.landmarks, replace=False)]
    names = rng.choice(len(LANDMARK_NAMES), size=p.landmarks, replace=False)
    landmarks = [(LANDMARK_NAMES[int(k)], (int(r), int(c))) for k, (r, c) in zip(names, cells)]
    return World(grid=grid, landmarks=landmarks, seed=int(seed), params=p, split=split)


def split_of(index: int, total: int) -> str:
    """Seed-range split with 61/11/28 percent proportions."""
    n_train = round(total * 0.61)
    n_seen = round(total * 0.11)
    if index < n_train:
        return "train"
    if index < n_train + n_seen:
        return "val-seen"
    return "val-unseen"


def world_record(world: World) -> str:
    p = world.params
    return (f"{WORLD_FORMAT}\tseed={world.seed}\tsplit={world.split}\tsize={p.size}\t"
            f"landmarks={p.landmarks}\tmin_room={p.min_room}\tdoor_width={p.door_width}\t"
            f"obstacles={p.obstacles}\tcell_size={p.cell_size!r}")


def world_from_record(line: str) -> World:
    head, *fields = line.rstrip("\n").split("\t")
    if head != WORLD_FORMAT:
        raise ValueError(f"unsupported world record header {head!r}")
    kv = dict(f.split("=", 1) for f in fields)
    params = WorldParams(
        size=int(kv["size"]), landmarks=int(kv["landmarks"]), min_room=int(kv["min_room"]),
        door_width=int(kv["door_width"]), obstacles=int(kv["obstacles"]),
        cell_size=float(kv["cell_size"]),
    )
    return generate_world(int(kv["seed"]), params, split=kv["split"])


def dump_grid(world: World) -> str:
    """Top-down text map, row 0 at the bottom: '#' blocked, '.' free, letters for landmarks."""
    chars = np.where(world.grid, "#", ".").astype("<U1")
    legend = []
    for i, (name, (r, c)) in enumerate(world.landmarks):
        mark = chr(ord("a") + i)
        chars[r, c] = mark
        legend.append(f"{mark}={name}@{r},{c}")
    rows = ["".join(row) for row in chars[::-1]]
    return "\n".join(rows + [" ".join(legend)]) + "\n"


# ---------------------------------------------------------------- motion


def apply_action(world: World, pose: Pose, action: Action) -> tuple[Pose, bool, bool]:
    """Returns ``(new_pose, collided, stopped)``."""
    if action is Action.STOP:
        return pose, False, True
    if action is Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading + TURN_DEG) % 360), False, False
    if action is Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading - TURN_DEG) % 360), False, False
    s, c = _SIN_COS[pose.heading]
    nxt = Pose(pose.x - FORWARD_STEP * s, pose.y + FORWARD_STEP * c, pose.heading)
    if not world.is_free(nxt.cell(world.cell_size)):
        return pose, True, False
    return nxt, False, False


# ---------------------------------------------------------------- observation

_FWD = np.repeat(np.arange(VIEW // 2, -VIEW // 2, -1), VIEW).reshape(VIEW, VIEW).astype(float)
_RIGHT = np.tile(np.arange(-(VIEW // 2), VIEW // 2 + 1), VIEW).reshape(VIEW, VIEW).astype(float)


def render_frame(world: World, pose: Pose, step: int) -> Frame:
    """Ego-aligned raster: centre cell is the agent, row above centre is straight ahead."""
    cs = world.cell_size
    s, c = _SIN_COS[pose.heading]
    ux, uy = -s, c      # forward
    rx, ry = c, s       # right-hand side
    px = pose.x + cs * (_FWD * ux + _RIGHT * rx)
    py = pose.y + cs * (_FWD * uy + _RIGHT * ry)
    rows = np.floor(py / cs).astype(np.int64)
    cols = np.floor(px / cs).astype(np.int64)
    h, w = world.grid.shape
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rr, cc = np.where(inside, rows, 0), np.where(inside, cols, 0)
    raster = np.empty((2, VIEW, VIEW), dtype=np.int8)
    raster[0] = np.where(inside, world.grid[rr, cc], True)
    lm = world.landmark_ids()
    raster[1] = np.where(inside, lm[rr, cc], 0)
    return Frame(raster=raster, step=step)


# ---------------------------------------------------------------- geodesics


def step_cost(dy: int, dx: int, cell_size: float) -> float:
    return cell_size * (math.sqrt(2.0) if dy and dx else 1.0)


def can_step(world: World, cell: tuple[int, int], dy: int, dx: int) -> bool:
    """8-connected move between free cells; diagonals may not cut a blocked corner."""
    r, c = cell
    if not world.is_free((r + dy, c + dx)):
        return False
    if dy and dx:
        return world.is_free((r + dy, c)) and world.is_free((r, c + dx))
    return True


def _graph(world: World) -> csr_matrix:
    if world._graph is None:
        h, w = world.grid.shape
        rows, cols, vals = [], [], []
        for r, c in np.argwhere(~world.grid):
            for dy, dx in NEIGHBORS:
                if can_step(world, (r, c), dy, dx):
                    rows.append(r * w + c)
                    cols.append((r + dy) * w + c + dx)
                    vals.append(step_cost(dy, dx, world.cell_size))
        world._graph = csr_matrix((vals, (rows, cols)), shape=(h * w, h * w))
    return world._graph


def distance_field(world: World, goal: tuple[int, int]) -> np.ndarray:
    """Geodesic metres from every cell to ``goal``; ``inf`` where unreachable or blocked."""
    if not world.is_free(goal):
        raise DomainError(f"cell {goal} is blocked")
    key = tuple(goal)
    if key not in world._fields:
        h, w = world.grid.shape
        d = dijkstra(_graph(world), directed=False, indices=goal[0] * w + goal[1])
        world._fields[key] = d.reshape(h, w)
    return world._fields[key]


def geodesic_distance(world: World, a: tuple[int, int], b: tuple[int, int]) -> float:
    if not world.is_free(a):
        raise DomainError(f"cell {a} is blocked")
    return float(distance_field(world, b)[a])
