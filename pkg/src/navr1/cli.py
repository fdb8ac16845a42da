"""Command line entry point: ``navr1 gen|sft|rft|eval|ablate|report``.

Every command writes into a fresh run directory ``<out>/<command>-<hash8>``
(suffixed ``-1``, ``-2``, ... if it already exists) holding ``config.txt``, the
resolved configuration that reproduces the run. Exit codes: 0 ok, 1 user or
config error, 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
import traceback
from pathlib import Path

from .config import BENCHMARK, DATA_SECTIONS, RunConfig, parse_config_text
from .dataengine import build_dataset, generate_records, read_manifest, read_records
from .memory import ConfigError
from .pipeline import evaluate, make_navigator, run_rft, run_sft
from .policy import ContextOverflow, load_policy, save_policy
from .rft import ContractError
from .world import SPLITS, GenerationError, dump_grid

AXES = {
    "action-horizon": [(f"n={n}", {"data.n": n}) for n in (1, 4, 6, 8)],
    "memory": [
        ("avg8", {"memory.strategy": "average-k", "memory.k": 8}),
        ("avg16", {"memory.strategy": "average-k", "memory.k": 16}),
        ("exp", {"memory.strategy": "exponential-decay"}),
        ("long-short", {"memory.strategy": "long-short"}),
    ],
    "generations": [(f"G={g}", {"rft.G": g}) for g in (2, 4, 6, 8)],
    "reward": [(r, {"rft.reward": r}) for r in ("hard", "uniform", "linear", "tdr")],
}


class UserError(Exception):
    pass


USER_ERRORS = (UserError, ConfigError, ContractError, GenerationError, ContextOverflow, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- plumbing


def new_run_dir(out: str | Path, command: str, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = f"{command}-{cfg.hash()[:8]}"
    path, k = out / base, 0
    while path.exists():
        k += 1
        path = out / f"{base}-{k}"
    path.mkdir()
    (path / "config.txt").write_text(cfg.to_text())
    return path


class JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "a")

    def __call__(self, row: dict) -> None:
        self.fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UserError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "execute_k", None) is not None:
        overrides["eval.execute_k"] = args.execute_k
    base = dict(BENCHMARK) if args.benchmark else {}
    if args.config:
        base.update(parse_config_text(Path(args.config).read_text(), args.config))
    return RunConfig.build(overrides, base)


def load_records(cfg: RunConfig, data_dir: str | None, run_dir: Path) -> dict:
    """Records from ``data_dir`` (checked against the config), else freshly built under ``run_dir/data``."""
    want = cfg.hash(DATA_SECTIONS)
    if data_dir is None:
        data = run_dir / "data"
        build_dataset(data, cfg.dataset(), want)
    else:
        data = Path(data_dir)
        manifest_path = data / "manifest.txt"
        if not manifest_path.exists():
            raise UserError(f"{data} is not a dataset directory (no manifest.txt)")
        got = read_manifest(manifest_path).get("config_hash")
        if got != want:
            raise UserError(f"dataset {data} was built with config hash {got}, this config needs {want}; "
                            "pass the same world/episode/data/memory settings used for `navr1 gen`")
    return {s: read_records(data / f"{s}.records") for s in SPLITS}


def find_dataset(explicit: str | None, checkpoint: Path | None) -> str | None:
    if explicit:
        return explicit
    if checkpoint is not None:
        for cand in (checkpoint.parent / "data", checkpoint.parent / "dataset"):
            if (cand / "manifest.txt").exists():
                return str(cand)
    return None


def save_checkpoint(run_dir: Path, params, data_dir: Path | None) -> Path:
    path = run_dir / "policy.ckpt"
    save_policy(path, params)
    if data_dir is not None and (data_dir / "vocab.txt").exists():
        shutil.copyfile(data_dir / "vocab.txt", run_dir / "vocab.txt")
    else:
        from .dataengine import write_vocab
        write_vocab(run_dir / "vocab.txt")
    return path


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig) -> int:
    run = new_run_dir(args.out, "gen", cfg)
    data = cfg.dataset()
    manifest = build_dataset(run / "data", data, cfg.hash(DATA_SECTIONS))
    if args.dump_worlds:
        dumps = run / "worlds"
        dumps.mkdir()
        for split in SPLITS:
            for seed in data.seeds(split):
                (dumps / f"{seed}.txt").write_text(dump_grid(data.make_world(seed)))
    print(f"dataset: {run / 'data'}")
    for split in SPLITS:
        print(f"{split}: {manifest[f'count.{split}']} records")
    return 0


def cmd_sft(args, cfg: RunConfig) -> int:
    run = new_run_dir(args.out, "sft", cfg)
    records = load_records(cfg, args.data, run)
    log = JsonLines(run / "loss.jsonl")
    try:
        res = run_sft(cfg, records, log)
    finally:
        log.close()
    ck = save_checkpoint(run, res.params, Path(args.data) if args.data else run / "data")
    print(f"checkpoint: {ck} (best epoch {res.best_epoch})")
    return 0


def cmd_rft(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise UserError("rft needs an SFT checkpoint (--checkpoint); training order is `navr1 sft` then `navr1 rft`")
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise UserError(f"SFT checkpoint {ck} not found; run `navr1 sft` first")
    sft_params = load_policy(ck)
    run = new_run_dir(args.out, "rft", cfg)
    data_dir = find_dataset(args.data, ck)
    records = load_records(cfg, data_dir, run)
    log = JsonLines(run / "stats.jsonl")
    try:
        res = run_rft(cfg, sft_params, records, log)
    finally:
        log.close()
    out = save_checkpoint(run, res.params, Path(data_dir) if data_dir else run / "data")
    print(f"checkpoint: {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if sum(bool(x) for x in (args.checkpoint, args.oracle_policy, args.random_policy)) != 1:
        raise UserError("eval needs exactly one of --checkpoint, --oracle-policy, --random-policy")
    if args.oracle_policy:
        nav = make_navigator("oracle", cfg)
    elif args.random_policy:
        nav = make_navigator("random", cfg)
    else:
        nav = make_navigator("policy", cfg, load_policy(args.checkpoint))
    run = new_run_dir(args.out, "eval", cfg)
    results, summary = evaluate(cfg, nav, args.split)
    with open(run / "episodes.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r.row(), sort_keys=True) + "\n")
    text = f"split={args.split!r}\n" + summary.as_text()
    (run / "summary.txt").write_text(text)
    if args.render:
        from .evaluation import render_trajectory
        from .pipeline import eval_specs
        pics = run / "render"
        pics.mkdir()
        for spec, r in zip(eval_specs(cfg, args.split), results):
            render_trajectory(spec.world, r, spec.goal, pics / f"{r.episode_id.replace('/', '_')}.png")
    sys.stdout.write(text)
    return 0


def _variant_row(axis: str, name: str, cfg: RunConfig, cache: dict, sft_params=None) -> dict:
    key = cfg.hash(DATA_SECTIONS)
    if key not in cache:
        cache.clear()
        cache[key] = generate_records(cfg.dataset())[0]
    records = cache[key]
    if sft_params is None:
        sft_key = ("sft", cfg.hash(DATA_SECTIONS + ("policy", "sft", "seed")))
        if sft_key not in cache:
            cache[sft_key] = run_sft(cfg, records).params
        sft_params = cache[sft_key]
    rft = run_rft(cfg, sft_params, records)
    _, m = evaluate(cfg, make_navigator("policy", cfg, rft.params))
    return {"axis": axis, "variant": name, "sr": m.sr, "os": m.os, "spl": m.spl, "ne": m.ne, "tl": m.tl,
            "episodes": m.episodes, "seed": cfg.seed, "config_hash": cfg.hash()}


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.axis not in AXES:
        raise UserError(f"unknown axis {args.axis!r}; expected one of {sorted(AXES)}")
    if args.resume:
        run = Path(args.resume)
        if not (run / "config.txt").exists():
            raise UserError(f"{run} is not an ablation run directory")
        cfg = RunConfig.load(run / "config.txt")
    else:
        run = new_run_dir(args.out, f"ablate-{args.axis}", cfg)
    table = run / "table.jsonl"
    done = set()
    if table.exists():
        done = {json.loads(line)["variant"] for line in table.read_text().splitlines() if line.strip()}
    sft_params = load_policy(args.checkpoint) if args.checkpoint else None
    if sft_params is not None and args.axis in ("action-horizon", "memory"):
        raise UserError(f"axis {args.axis} changes the training data; it retrains SFT and takes no --checkpoint")
    cache: dict = {}
    log = JsonLines(table)
    try:
        for name, overrides in AXES[args.axis]:
            if name in done:
                print(f"{name}: done, skipped")
                continue
            vcfg = RunConfig.build(overrides, cfg.values)
            (run / f"variant-{name}.txt").write_text(vcfg.to_text())
            row = _variant_row(args.axis, name, vcfg, cache, sft_params)
            log(row)
            print(f"{name}: SR={row['sr']:.4f} OS={row['os']:.4f}")
    finally:
        log.close()
    print(f"table: {table}")
    return 0


def format_table(rows: list[dict]) -> str:
    head = f"{'axis':<16}{'variant':<14}{'SR':>8}{'OS':>8}{'SPL':>8}{'NE':>8}{'TL':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['axis']:<16}{r['variant']:<14}{r['sr']:>8.4f}{r['os']:>8.4f}{r['spl']:>8.4f}"
                     f"{r['ne']:>8.3f}{r['tl']:>8.3f}")
    return "\n".join(lines) + "\n"


def read_table(path: str | Path) -> list[dict]:
    rows = []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            for k in ("axis", "variant", "sr", "os", "spl", "ne", "tl"):
                row[k]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise UserError(f"{path}:{no}: not a table row ({e})") from None
        rows.append(row)
    return rows


def cmd_report(args, cfg: RunConfig) -> int:
    if not args.paths:
        raise UserError("report needs at least one table.jsonl (or ablation run directory)")
    rows = []
    for p in args.paths:
        p = Path(p)
        rows.extend(read_table(p / "table.jsonl" if p.is_dir() else p))
    sys.stdout.write(format_table(rows))
    return 0


COMMANDS = {"gen": cmd_gen, "sft": cmd_sft, "rft": cmd_rft, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="navr1", description="Grid-world instruction following: data, SFT, RFT, evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("paths", nargs="*", help="report: table files or ablation run directories")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--benchmark", action="store_true", help="start from the built-in benchmark settings")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="val-unseen", choices=SPLITS)
    p.add_argument("--data", help="dataset directory written by `gen`")
    p.add_argument("--checkpoint", help="policy checkpoint")
    p.add_argument("--oracle-policy", action="store_true")
    p.add_argument("--random-policy", action="store_true")
    p.add_argument("--execute-k", type=int)
    p.add_argument("--axis", help="ablate: " + ", ".join(AXES))
    p.add_argument("--resume", help="ablate: continue a partial sweep in this run directory")
    p.add_argument("--dump-worlds", action="store_true", help="gen: also write text grid dumps")
    p.add_argument("--render", action="store_true", help="eval: write a top-down PNG per episode")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
