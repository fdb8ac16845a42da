import dataclasses
import math

import numpy as np
import pytest

from navr1 import tensor_ad as ad
from navr1.dataengine import IDENTIFIER_IDS
from navr1.policy import (SEG_CUR, SEG_HIST, SEG_INSTR, SEG_SYS, ContextOverflow, PolicyConfig, _identifier_logits,
                          decode, encode_context, greedy_actions, init_params, load_policy, sample_actions,
                          save_policy, sequence_log_prob, target_ids, teacher_forced, token_log_probs)
from navr1.world import Action
from _fd import max_rel_err


def uniform_params(vocab=64):
    params = init_params(PolicyConfig(vocab=vocab), 0)
    params["w_out"].data[:] = 0.0
    params["b_out"].data[:] = 0.0
    return params


def biased_params(probs):
    params = uniform_params()
    params["b_out"].data[list(IDENTIFIER_IDS)] = np.log(probs)
    return params


def with_history(records):
    return next(r for r in records if len(r.history) >= 3)


def test_uniform_head_log_probs(tiny_records):
    rec = tiny_records["train"][0]
    params = uniform_params()
    total, per = sequence_log_prob(params, rec, target_ids("AA"))
    assert len(per) == 12 and total == pytest.approx(-12 * math.log(64), abs=1e-9)
    total, per = sequence_log_prob(params, rec, target_ids("AAAADD"))
    assert len(per) == 30 and total == pytest.approx(-30 * math.log(64), abs=1e-9)


def test_log_probs_nonpositive_and_normalised(tiny_records):
    params = init_params(PolicyConfig(), 3)
    recs = tiny_records["train"][:5]
    tf = teacher_forced(params, recs, [target_ids(r.gt) for r in recs])
    np.testing.assert_allclose(ad.softmax(tf.logits).data.sum(axis=1), 1.0, atol=1e-9)
    logp, _ = token_log_probs(params, recs, [target_ids(r.gt) for r in recs])
    assert np.all(logp.data <= 0)


def test_context_layout(tiny_records):
    params = init_params(PolicyConfig(), 0)
    first = next(r for r in tiny_records["train"] if r.t == 0)
    ctx = encode_context(params, first)
    expected = [SEG_SYS] + [SEG_INSTR] * len(first.instruction) + [SEG_CUR]
    assert ctx.segments.tolist() == expected
    rec = with_history(tiny_records["train"])
    ctx = encode_context(params, rec)
    assert (ctx.segments == SEG_HIST).sum() == len(rec.history)
    again = encode_context(params, rec)
    assert np.array_equal(ctx.embeddings, again.embeddings) and np.array_equal(ctx.mask, again.mask)
    assert not ctx.mask[0, 1] and ctx.mask[-1].all()


def test_history_order_matters(tiny_records):
    params = init_params(PolicyConfig(), 1)
    rec = with_history(tiny_records["train"])
    hist = rec.frames[:-1]
    swapped = dataclasses.replace(rec, frames=tuple(reversed(hist)) + (rec.frames[-1],))
    a = _identifier_logits(params, [rec], [[]])
    b = _identifier_logits(params, [swapped], [[]])
    assert not np.allclose(a, b)


def test_context_overflow(tiny_records):
    params = init_params(PolicyConfig(max_len=4), 0)
    with pytest.raises(ContextOverflow):
        encode_context(params, tiny_records["train"][0])


def test_monte_carlo_identifier_frequencies(tiny_records):
    params = biased_params([0.7, 0.1, 0.1, 0.1])
    rec = tiny_records["train"][0]
    rng = np.random.default_rng(0)
    counts = {a: 0 for a in Action}
    for _ in range(10):
        for r in decode(params, [rec] * 1000, 1, rng=rng, with_log_probs=False):
            counts[r.actions[0]] += 1
    freq = np.array([counts[a] for a in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT, Action.STOP)]) / 1e4
    assert np.all(np.abs(freq - [0.7, 0.1, 0.1, 0.1]) < 0.02)


def test_low_temperature_is_greedy(tiny_records):
    params = init_params(PolicyConfig(), 4)
    recs = tiny_records["train"][:20]
    cold = decode(params, recs, 3, rng=np.random.default_rng(0), temperature=1e-4)
    assert [r.actions for r in cold] == greedy_actions(params, recs, 3)


def test_sampling_is_seeded(tiny_records):
    params = init_params(PolicyConfig(), 4)
    rec = tiny_records["train"][2]
    a = sample_actions(params, rec, np.random.default_rng(9))
    b = sample_actions(params, rec, np.random.default_rng(9))
    assert a.tokens == b.tokens and np.array_equal(a.log_probs, b.log_probs) and len(a.actions) == 6
    with pytest.raises(ValueError):
        sample_actions(params, rec, np.random.default_rng(0), temperature=0.0)


def test_recorded_log_probs_are_reproduced(tiny_records):
    params = init_params(PolicyConfig(), 5)
    recs = tiny_records["train"][:6]
    responses = decode(params, recs, 6, rng=np.random.default_rng(1))
    logp, seq_of = token_log_probs(params, recs, [r.tokens for r in responses], constrained=True)
    for b, (r, rec) in enumerate(zip(responses, recs)):
        np.testing.assert_array_equal(logp.data[seq_of == b], r.log_probs)
        _, per = sequence_log_prob(params, rec, r.tokens, constrained=True)
        np.testing.assert_allclose(per, r.log_probs, rtol=0, atol=1e-12)
        assert np.isin(r.tokens, IDENTIFIER_IDS).sum() == 6


def test_identifier_support_is_exactly_abcd(tiny_records):
    params = init_params(PolicyConfig(), 6)
    rec = tiny_records["train"][0]
    _, per = sequence_log_prob(params, rec, target_ids("B"), constrained=True)
    z = _identifier_logits(params, [rec], [[]])[0]
    assert per[0] == pytest.approx(z[1] - np.log(np.exp(z).sum()), abs=1e-12)


def test_gradients_match_finite_differences(tiny_records):
    cfg = PolicyConfig(d=4, ffn=4, max_len=72)
    base = {k: t.data for k, t in init_params(cfg, 7).items()}
    recs = [tiny_records["train"][0], with_history(tiny_records["train"])]
    targets = [target_ids("AB"), target_ids("CD")]
    for key in base:
        def f(x, key=key):
            params = {k: ad.Tensor(v) for k, v in base.items()}
            params[key] = x
            logp, _ = token_log_probs(params, recs, targets, constrained=True)
            return ad.sum(logp)
        assert max_rel_err(f, [base[key]]) < 1e-4, key


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(PolicyConfig(d=8, ffn=8), 2)
    save_policy(tmp_path / "p.ckpt", params)
    back = load_policy(tmp_path / "p.ckpt")
    assert set(back) == set(params)
    assert all(back[k].data.tobytes() == params[k].data.tobytes() for k in params)
