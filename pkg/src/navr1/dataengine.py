"""Sample generation: instructions, per-timestep records, splits and on-disk format.

Record files hold one record per line. Each line is a fixed sequence of
tab-separated ``key=value`` fields::

    id  seed  ep  t  split  instr  hist  frames  gt  choices

Values escape ``\\`` ``\\t`` ``\\n`` with a backslash. ``instr`` is space-joined
tokens, ``hist`` comma-joined frame indices, ``gt`` the option letters
(``AABCDD``). ``frames`` is ``;``-joined frames (history first, current
last), each ``<step>:<rle>`` where ``<rle>`` run-length encodes the 242
raster values (occupancy channel then landmark channel, row-major) as
comma-joined ``value`` or ``value*count`` runs.
"""
from __future__ import annotations

import hashlib
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from .memory import MemoryConfig, select_history
from .oracle import (
    SUCCESS_THRESHOLD, Episode, EpisodeRejected, ExpertPath, build_episode,
    expert_next_actions, shortest_path,
)
from .world import (
    LANDMARK_NAMES, SPLITS, VIEW, Action, Frame, Pose, World, WorldParams,
    distance_field, generate_world, split_of,
)

GENERATOR_VERSION = "navr1-dataengine 1"
VOCAB_VERSION = "navr1-vocab 1"
MAX_INSTRUCTION = 32
LANDMARK_RADIUS = 2

# <sys> stands for the system-message part of the prompt; its content is a single fixed token
SPECIAL_TOKENS = ("<pad>", "<sys>")
INSTRUCTION_WORDS = ("walk", "past", "then", "stop", "at", "turn", "left", "right")
OPTION_TOKENS = ("A", "B", "C", "D", ".")
DESCRIPTION_WORDS = ("Move", "forward", "0.25", "meters", "Turn", "30", "degrees", "Stop")
VOCAB = SPECIAL_TOKENS + INSTRUCTION_WORDS + OPTION_TOKENS + DESCRIPTION_WORDS + LANDMARK_NAMES
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
IDENTIFIER_IDS = tuple(TOKEN_ID[c] for c in "ABCD")

OPTION_TABLE = {
    "A": (Action.FORWARD, "Move forward 0.25 meters"),
    "B": (Action.TURN_LEFT, "Turn left 30 degrees"),
    "C": (Action.TURN_RIGHT, "Turn right 30 degrees"),
    "D": (Action.STOP, "Stop"),
}
CHOICES_FIELD = ",".join(f"{k}:{a.name.replace('_', '-')}" for k, (a, _) in OPTION_TABLE.items())


def block_tokens(letter: str) -> list[str]:
    """Tokens of one action block, e.g. ``C . Turn right 30 degrees``."""
    return [letter, "."] + OPTION_TABLE[letter][1].split()


def action_text_tokens(letters) -> list[str]:
    return [tok for letter in letters for tok in block_tokens(letter)]


def write_vocab(path: str | Path) -> None:
    lines = [VOCAB_VERSION] + [f"{i}\t{tok}" for i, tok in enumerate(VOCAB)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vocab(path: str | Path) -> tuple[str, ...]:
    head, *rows = Path(path).read_text().splitlines()
    if head != VOCAB_VERSION:
        raise ValueError(f"{path}: vocabulary version {head!r}, expected {VOCAB_VERSION!r}")
    return tuple(r.split("\t", 1)[1] for r in rows)


# ---------------------------------------------------------------- instructions


class InstructionRejected(RuntimeError):
    pass


def _cheb(a, b) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def make_instruction(world: World, path: ExpertPath) -> list[str]:
    """``walk past L1 then ... then stop at Lk``, Lk being the landmark nearest the goal."""
    if not path.waypoints:
        raise InstructionRejected("empty path")
    goal = path.waypoints[-1]
    near_goal = [(float(np.hypot(cell[0] - goal[0], cell[1] - goal[1])), i)
                 for i, (_, cell) in enumerate(world.landmarks) if _cheb(cell, goal) <= LANDMARK_RADIUS]
    if not near_goal:
        raise InstructionRejected(f"no landmark within {LANDMARK_RADIUS} cells of goal {goal}")
    final = world.landmarks[min(near_goal)[1]][0]

    first_seen = {}
    for step, wp in enumerate(path.waypoints):
        for name, cell in world.landmarks:
            if name not in first_seen and _cheb(cell, wp) <= LANDMARK_RADIUS:
                first_seen[name] = step
    passed = [n for n in sorted(first_seen, key=lambda n: (first_seen[n], LANDMARK_NAMES.index(n)))
              if n != final]
    tokens: list[str] = []
    if passed:
        tokens = ["walk", "past", passed[0]]
        for name in passed[1:]:
            if len(tokens) + 2 + 4 > MAX_INSTRUCTION:
                break
            tokens += ["then", name]
        tokens.append("then")
    return tokens + ["stop", "at", final]


def instruction_landmarks(tokens) -> tuple[list[str], str | None]:
    """Landmark tokens of an instruction and its final (goal) landmark."""
    names = [t for t in tokens if t in LANDMARK_NAMES]
    return names, (names[-1] if names else None)


# ---------------------------------------------------------------- episodes and records


@dataclass(frozen=True)
class EpisodeParams:
    min_dist: float = 4.0
    max_dist: float = 7.0
    threshold: float = SUCCESS_THRESHOLD
    goal_radius: int = 1      # goal is a free cell within this Chebyshev radius of a landmark

    def __post_init__(self):
        if not 0 <= self.min_dist <= self.max_dist:
            raise ValueError(f"need 0 <= min_dist <= max_dist, got {self.min_dist}, {self.max_dist}")
        if self.threshold <= 0:
            raise ValueError(f"success threshold must be > 0, got {self.threshold}")
        if not 0 <= self.goal_radius <= LANDMARK_RADIUS:
            raise ValueError(f"goal_radius must lie in [0, {LANDMARK_RADIUS}], got {self.goal_radius}")


@dataclass
class EpisodeSpec:
    world: World
    index: int
    start: Pose
    goal: tuple[int, int]
    instruction: list[str]
    episode: Episode | None = None


@dataclass(frozen=True)
class SampleRecord:
    record_id: str
    world_seed: int
    episode: int
    t: int
    instruction: tuple[str, ...]
    history: tuple[int, ...]
    frames: tuple[Frame, ...]    # history frames, then the current frame
    gt: tuple[str, ...]          # option letters
    split: str

    @property
    def current_frame(self) -> Frame:
        return self.frames[-1]

    @property
    def gt_actions(self) -> list[Action]:
        return [OPTION_TABLE[c][0] for c in self.gt]

    def __eq__(self, other):
        return isinstance(other, SampleRecord) and to_line(self) == to_line(other)


def sample_episodes(world: World, count: int, params: EpisodeParams = EpisodeParams(),
                    max_attempts: int = 50) -> tuple[list[EpisodeSpec], int]:
    """Draw ``count`` start/goal pairs with expert roll-outs; returns (specs, rejections)."""
    rng = np.random.default_rng([world.seed, 7])
    specs: list[EpisodeSpec] = []
    rejected = 0
    for _ in range(count * max_attempts):
        if len(specs) == count:
            break
        name, lm = world.landmarks[int(rng.integers(len(world.landmarks)))]
        span = range(-params.goal_radius, params.goal_radius + 1)
        around = [(lm[0] + dy, lm[1] + dx) for dy in span for dx in span]
        around = [c for c in around if world.is_free(c)]
        goal = around[int(rng.integers(len(around)))]
        dist = distance_field(world, goal)
        cand = np.argwhere((dist >= params.min_dist) & (dist <= params.max_dist))
        heading = int(rng.integers(12)) * 30
        if len(cand) == 0:
            rejected += 1
            continue
        cell = tuple(int(v) for v in cand[int(rng.integers(len(cand)))])
        x, y = world.center(cell)
        start = Pose(x, y, heading)
        try:
            instr = make_instruction(world, shortest_path(world, cell, goal))
            ep = build_episode(world, start, goal, params.threshold)
        except (InstructionRejected, EpisodeRejected):
            rejected += 1
            continue
        specs.append(EpisodeSpec(world, len(specs), start, goal, instr, ep))
    return specs, rejected


def emit_samples(spec: EpisodeSpec, n: int, memory: MemoryConfig,
                 threshold: float = SUCCESS_THRESHOLD) -> list[SampleRecord]:
    """One record per timestep with STOP-padded next-``n`` expert labels."""
    ep = spec.episode
    world = spec.world
    out = []
    for t, pose in enumerate(ep.poses):
        hist = select_history(t, memory)
        gt = expert_next_actions(world, pose, spec.goal, n, threshold)
        out.append(SampleRecord(
            record_id=f"{world.split}/{world.seed}/{spec.index}/{t}",
            world_seed=world.seed,
            episode=spec.index,
            t=t,
            instruction=tuple(spec.instruction),
            history=tuple(hist),
            frames=tuple(ep.frames[i] for i in hist) + (ep.frames[t],),
            gt=tuple(a.letter for a in gt),
            split=world.split,
        ))
    return out


# ---------------------------------------------------------------- serialization

_ESC = {"\\": "\\\\", "\t": "\\t", "\n": "\\n"}
_UNESC = {"\\": "\\", "t": "\t", "n": "\n"}


def _escape(s: str) -> str:
    return "".join(_ESC.get(ch, ch) for ch in s)


def _unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\":
            out.append(_UNESC[s[i + 1]])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def encode_frame(frame: Frame) -> str:
    flat = frame.raster.reshape(-1)
    runs, i = [], 0
    while i < len(flat):
        j = i
        while j < len(flat) and flat[j] == flat[i]:
            j += 1
        runs.append(f"{flat[i]}" if j - i == 1 else f"{flat[i]}*{j - i}")
        i = j
    return f"{frame.step}:" + ",".join(runs)


def decode_frame(text: str) -> Frame:
    step, rle = text.split(":", 1)
    vals: list[int] = []
    for run in rle.split(","):
        v, _, c = run.partition("*")
        vals.extend([int(v)] * (int(c) if c else 1))
    if len(vals) != 2 * VIEW * VIEW:
        raise ValueError(f"frame has {len(vals)} values, expected {2 * VIEW * VIEW}")
    return Frame(np.array(vals, dtype=np.int8).reshape(2, VIEW, VIEW), int(step))


RECORD_FIELDS = ("id", "seed", "ep", "t", "split", "instr", "hist", "frames", "gt", "choices")


def to_line(rec: SampleRecord) -> str:
    values = (
        rec.record_id, str(rec.world_seed), str(rec.episode), str(rec.t), rec.split,
        " ".join(rec.instruction), ",".join(map(str, rec.history)),
        ";".join(encode_frame(f) for f in rec.frames), "".join(rec.gt), CHOICES_FIELD,
    )
    return "\t".join(f"{k}={_escape(v)}" for k, v in zip(RECORD_FIELDS, values))


def from_line(line: str) -> SampleRecord:
    parts = line.rstrip("\n").split("\t")
    kv = {}
    for p in parts:
        k, _, v = p.partition("=")
        kv[k] = _unescape(v)
    missing = set(RECORD_FIELDS) - set(kv)
    if missing:
        raise ValueError(f"record missing fields {sorted(missing)}")
    if kv["choices"] != CHOICES_FIELD:
        raise ValueError(f"record {kv['id']}: unexpected option table {kv['choices']!r}")
    return SampleRecord(
        record_id=kv["id"], world_seed=int(kv["seed"]), episode=int(kv["ep"]), t=int(kv["t"]),
        split=kv["split"],
        instruction=tuple(kv["instr"].split()) if kv["instr"] else (),
        history=tuple(int(x) for x in kv["hist"].split(",")) if kv["hist"] else (),
        frames=tuple(decode_frame(f) for f in kv["frames"].split(";")),
        gt=tuple(kv["gt"]),
    )


def read_records(path: str | Path) -> list[SampleRecord]:
    with open(path) as fh:
        return [from_line(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetConfig:
    worlds: int = 200
    seed_base: int = 0
    episodes_per_world: int = 10
    n: int = 6
    world: WorldParams = field(default_factory=WorldParams)
    episode: EpisodeParams = field(default_factory=EpisodeParams)
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    def __post_init__(self):
        if self.worlds < 1 or self.episodes_per_world < 1 or self.n < 1:
            raise ValueError("worlds, episodes_per_world and n must all be >= 1")

    def config_hash(self) -> str:
        text = repr(sorted(_flatten(asdict(self)).items())) + GENERATOR_VERSION
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def seeds(self, split: str) -> list[int]:
        return [self.seed_base + i for i in range(self.worlds) if split_of(i, self.worlds) == split]

    def make_world(self, seed: int) -> World:
        return generate_world(seed, self.world, split=split_of(seed - self.seed_base, self.worlds))


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def world_episodes(cfg: DatasetConfig, seed: int) -> tuple[list[EpisodeSpec], int]:
    return sample_episodes(cfg.make_world(seed), cfg.episodes_per_world, cfg.episode)


def _world_records(args) -> tuple[list[SampleRecord], int, int]:
    cfg, seed = args
    specs, rejected = world_episodes(cfg, seed)
    recs = [r for s in specs for r in emit_samples(s, cfg.n, cfg.memory, cfg.episode.threshold)]
    return recs, len(specs), rejected


def worker_count() -> int:
    try:
        cap = int(os.environ.get("NAVR1_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def generate_records(cfg: DatasetConfig, splits=SPLITS, workers: int | None = None):
    """In-memory records per split plus generation stats."""
    workers = workers or worker_count()
    out, stats = {}, {}
    for split in splits:
        jobs = [(cfg, s) for s in cfg.seeds(split)]
        if workers > 1 and len(jobs) > 1:
            with Pool(workers) as pool:
                results = pool.map(_world_records, jobs)
        else:
            results = [_world_records(j) for j in jobs]
        out[split] = [r for recs, _, _ in results for r in recs]
        stats[split] = {"worlds": len(jobs), "episodes": sum(e for _, e, _ in results),
                        "rejected": sum(x for _, _, x in results)}
    return out, stats


def build_dataset(out_dir: str | Path, cfg: DatasetConfig, config_hash: str | None = None,
                  workers: int | None = None) -> dict[str, str]:
    """Write ``<split>.records`` files, ``vocab.txt`` and ``manifest.txt``; returns the manifest."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise FileExistsError(f"{out_dir} already exists")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    records, stats = generate_records(cfg, workers=workers)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out_dir.parent))
    try:
        manifest = {"generator": GENERATOR_VERSION, "vocab": VOCAB_VERSION,
                    "config_hash": config_hash or cfg.config_hash()}
        for split in SPLITS:
            path = tmp / f"{split}.records"
            with open(path, "w") as fh:
                for rec in records[split]:
                    fh.write(to_line(rec) + "\n")
            seeds = cfg.seeds(split)
            manifest[f"count.{split}"] = str(len(records[split]))
            manifest[f"seeds.{split}"] = f"{seeds[0]}-{seeds[-1]}" if seeds else ""
            manifest[f"episodes.{split}"] = str(stats[split]["episodes"])
            manifest[f"rejected.{split}"] = str(stats[split]["rejected"])
        write_vocab(tmp / "vocab.txt")
        (tmp / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
        tmp.rename(out_dir)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise OSError(f"writing dataset to {out_dir} failed: {exc}") from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def seed_range(text: str) -> set[int]:
    if not text:
        return set()
    lo, hi = text.split("-")
    return set(range(int(lo), int(hi) + 1))
