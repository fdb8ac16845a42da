"""Acceptance criteria 1-10; each test prints one PASS/FAIL line (collected in the terminal summary)."""
import math
import time

import numpy as np
import pytest

from conftest import report
from navr1 import cli
from navr1 import tensor_ad as ad
from navr1.config import BENCHMARK, RunConfig
from navr1.dataengine import DatasetConfig, world_episodes
from navr1.evaluation import OracleNavigator, RandomNavigator, compute_metrics, rollout_many
from navr1.memory import MemoryConfig, select_history
from navr1.pipeline import run_benchmark
from navr1.policy import PolicyConfig, init_params, target_ids, token_log_probs
from navr1.rft import group_advantages, grpo_objective, kl_estimate, reward_tdr
from navr1.sft import sft_losses
from navr1.world import ACTIONS
from _fd import max_rel_err, op_cases

BENCH_SEEDS = (0, 1, 2, 3, 4)
REWARDS = ("tdr", "hard", "uniform", "linear")


# ---------------------------------------------------------------- 1


def brute_force_history(t, M, d1, d2, cap):
    short = [t - k * d1 for k in range(1, t + 1) if t - k * d1 >= max(0, t - M)]
    long_ = [t - M - k * d2 for k in range(1, t + 1) if t - M - k * d2 >= 0]
    return sorted(set(short) | set(long_))[-cap:]


def test_criterion_1_memory_oracle():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(10_000):
        d1 = int(rng.integers(1, 8))
        d2 = int(rng.integers(d1 + 1, d1 + 12))
        cases.append((int(rng.integers(0, 200)), int(rng.integers(d1, 40)), d1, d2, int(rng.integers(1, 64))))
    cfgs = [MemoryConfig(M=M, delta1=d1, delta2=d2, max_frames=cap) for _, M, d1, d2, cap in cases]
    start = time.perf_counter()
    got = [select_history(c[0], cfg) for c, cfg in zip(cases, cfgs)]
    elapsed = time.perf_counter() - start
    mismatches = sum(g != brute_force_history(*c) for g, c in zip(got, cases))
    ok = report(1, mismatches == 0 and elapsed < 1.0,
                f"{mismatches} mismatches over 10000 tuples, {elapsed:.3f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_tdr():
    gt = [ACTIONS[i] for i in (0, 0, 1, 0, 3, 3)]
    closed = reward_tdr(gt, gt, 0.9)
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        gamma = float(rng.uniform(0.05, 1.0))
        pred = [ACTIONS[i] for i in rng.integers(4, size=n)]
        lab = [ACTIONS[i] for i in rng.integers(4, size=n)]
        brute = 0.0
        for k in range(n):
            if pred[k] == lab[k]:
                brute += gamma ** k
        bad += reward_tdr(pred, lab, gamma) != brute
    ok = report(2, abs(closed - 4.685590) <= 1e-6 and abs(closed - (1 - 0.9 ** 6) / 0.1) <= 1e-9 and bad == 0,
                f"perfect match {closed:.9f}, {bad} brute-force mismatches of 10000")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_advantages():
    rng = np.random.default_rng(3)
    worst_mean = worst_var = 0.0
    degenerate_bad = 0
    for _ in range(10_000):
        G = int(rng.integers(2, 17))
        gt = [ACTIONS[i] for i in rng.integers(4, size=6)]
        rewards = [reward_tdr([ACTIONS[i] for i in rng.integers(4, size=6)], gt, 0.9) for _ in range(G)]
        a = group_advantages(rewards)
        if len(set(rewards)) == 1:
            degenerate_bad += bool(a.any())
        else:
            worst_mean = max(worst_mean, abs(a.mean()))
            worst_var = max(worst_var, abs(a.var() - 1))
    degenerate_bad += bool(group_advantages([1.5] * 8).any())
    ok = report(3, worst_mean < 1e-9 and worst_var < 1e-6 and degenerate_bad == 0,
                f"max |mean| {worst_mean:.1e}, max |var-1| {worst_var:.1e}, {degenerate_bad} bad degenerate groups")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_kl():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-20, 0, 10_000), rng.uniform(-20, 0, 10_000)
    vals = kl_estimate(a, b)
    at_ln2 = kl_estimate(0.0, math.log(2))
    ok = report(4, bool(np.all(vals >= 0)) and kl_estimate(a, a).max() == 0.0 and abs(at_ln2 - 0.306853) < 1e-6,
                f"min over 10000 pairs {vals.min():.3e}, value at ln 2 = {at_ln2:.7f}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_clip():
    z = np.array([0.0])
    got = [grpo_objective(np.array([0.0]), z, z, [1.0], 0.2, 0.0).item(),
           grpo_objective(np.array([math.log(1.5)]), z, z, [1.0], 0.2, 0.0).item(),
           grpo_objective(np.array([math.log(0.5)]), z, z, [-1.0], 0.2, 0.0).item()]
    ok = report(5, got[0] == 1.0 and abs(got[1] - 1.2) < 1e-15 and abs(got[2] + 0.8) < 1e-15,
                f"objective values {got}")
    assert ok


# ---------------------------------------------------------------- 6


def _sft_loss_case(rng, recs):
    cfg = PolicyConfig(d=4, ffn=4, max_len=72)
    base = {k: t.data for k, t in init_params(cfg, int(rng.integers(1 << 30))).items()}
    key = ("w_out", "wv", "w1", "b2", "seg_emb")[int(rng.integers(5))]
    pick = [recs[i] for i in rng.choice(len(recs), size=2, replace=False)]

    def f(x):
        params = {k: ad.Tensor(v) for k, v in base.items()}
        params[key] = x
        return ad.sum(sft_losses(params, pick))
    return f"sft_loss[{key}]", f, [base[key]]


def _grpo_case(rng):
    G = 6
    old = rng.uniform(-3, -0.5, G)
    ref = old + rng.uniform(-0.3, 0.3, G)
    adv = rng.normal(size=G)
    shift = rng.choice([-1, 1], G) * rng.uniform(0.0, 0.15, G)
    shift[rng.random(G) < 0.3] += rng.choice([-0.5, 0.5])   # some ratios well outside the clip band

    def f(lt):
        return grpo_objective(lt, old, ref, adv, 0.2, 0.04)
    return "grpo_objective", f, [old + shift]


def test_criterion_6_gradients(tiny_records):
    recs = tiny_records["train"][:40]
    start = time.perf_counter()
    worst, checked, failures = 0.0, 0, []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        cases = list(op_cases(rng)) + [_sft_loss_case(rng, recs), _grpo_case(rng)]
        for name, fn, inputs in cases:
            err = max_rel_err(fn, inputs)
            worst = max(worst, err)
            checked += 1
            if not err < 1e-4:
                failures.append((seed, name, err))
    elapsed = time.perf_counter() - start
    ok = report(6, not failures and elapsed < 120,
                f"{checked} checks over 20 configurations, worst rel err {worst:.1e}, {elapsed:.1f}s, failures {failures}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_metrics():
    start = time.perf_counter()
    data = DatasetConfig(worlds=40, episodes_per_world=10)
    specs = [s for seed in data.seeds("val-unseen") for s in world_episodes(data, seed)[0]][:100]
    oracle = compute_metrics(rollout_many(OracleNavigator(), specs))
    rand = compute_metrics(rollout_many(RandomNavigator(0), specs))
    ordered = all(m.spl <= m.sr <= m.os for m in (oracle, rand))
    elapsed = time.perf_counter() - start
    ok = report(7, len(specs) == 100 and oracle.sr == 1.0 and rand.sr < 0.05 and ordered and elapsed < 300,
                f"oracle SR {oracle.sr:.2f}, random SR {rand.sr:.2f}, SPL<=SR<=OS {ordered}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8 and 9


@pytest.fixture(scope="module")
def benchmark():
    """SFT then RFT (each reward type) on the fixed 200-world benchmark, one run per seed."""
    start = time.perf_counter()
    runs = {}
    for seed in BENCH_SEEDS:
        runs[seed] = run_benchmark(RunConfig.build({"seed": seed}, BENCHMARK), rewards=REWARDS)
    return runs, time.perf_counter() - start


def test_criterion_8_rft_beats_sft(benchmark):
    runs, elapsed = benchmark
    first = runs[BENCH_SEEDS[0]]
    strict = first.rft["tdr"].sr >= first.sft.sr + 0.05
    wins = sum(r.rft["tdr"].sr >= r.sft.sr for r in runs.values())
    sft_vs_random = all(r.sft.sr >= 3 * r.random.sr and r.sft.sr > 0 for r in runs.values())
    per_seed = ", ".join(f"seed {s}: SFT {r.sft.sr:.3f} RFT {r.rft['tdr'].sr:.3f} random {r.random.sr:.3f}"
                         for s, r in runs.items())
    ok = report(8, (strict or wins >= 4) and sft_vs_random,
                f"strict +5pt on seed {BENCH_SEEDS[0]}: {strict}; RFT>=SFT on {wins}/{len(runs)} seeds; "
                f"SFT>=3x random: {sft_vs_random}; {per_seed}; benchmark time {elapsed / 60:.1f} min")
    assert ok


def test_criterion_9_reward_ablation(benchmark):
    runs, _ = benchmark
    mean = {k: float(np.mean([r.rft[k].sr for r in runs.values()])) for k in REWARDS}
    lines = [f"{'reward':<10}{'mean SR':>9}" + "".join(f"{'seed ' + str(s):>9}" for s in runs)]
    for k in REWARDS:
        lines.append(f"{k:<10}{mean[k]:>9.4f}" + "".join(f"{r.rft[k].sr:>9.4f}" for r in runs.values()))
    print("\n".join(lines))
    ok = report(9, mean["tdr"] >= mean["uniform"] and mean["tdr"] >= mean["hard"],
                "mean SR " + ", ".join(f"{k} {v:.4f}" for k, v in mean.items()))
    assert ok


# ---------------------------------------------------------------- 10


TINY = ["--set", "data.worlds=10", "--set", "data.episodes_per_world=3", "--set", "policy.d=16",
        "--set", "policy.ffn=32", "--set", "sft.epochs=1", "--set", "rft.steps=5", "--set", "rft.batch_prompts=4",
        "--set", "eval.episodes=10", "--set", "seed=5"]


def _chain(out):
    assert cli.main(["gen", "--out", str(out), *TINY]) == 0
    data = next(out.glob("gen-*")) / "data"
    assert cli.main(["sft", "--out", str(out), "--data", str(data), *TINY]) == 0
    sft = next(out.glob("sft-*")) / "policy.ckpt"
    assert cli.main(["rft", "--out", str(out), "--data", str(data), "--checkpoint", str(sft), *TINY]) == 0
    rft = next(out.glob("rft-*")) / "policy.ckpt"
    assert cli.main(["eval", "--out", str(out), "--checkpoint", str(rft), *TINY]) == 0
    assert cli.main(["eval", "--out", str(out), "--random-policy", *TINY]) == 0
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file():
            files[str(path.relative_to(out))] = path.read_bytes()
    return files


def test_criterion_10_determinism(tmp_path):
    a, b = _chain(tmp_path / "a"), _chain(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    key_files = [k for k in a if k.endswith(("policy.ckpt", "summary.txt"))]
    ok = report(10, not differ and len(key_files) == 4,
                f"{len(a)} files compared across two full runs, {len(key_files)} checkpoints/summaries, "
                f"differing: {differ}")
    assert ok
