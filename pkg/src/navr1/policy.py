"""Tiny autoregressive policy over [sys][instruction][frames][action text].

A single causal self-attention block with a tanh feed-forward layer. Frames
enter as single slots through a linear encoder over the flattened raster.
The raster is expanded to four binary planes first: occupancy, any landmark,
the instruction's goal landmark, other landmarks the instruction names.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_ad as ad
from .dataengine import (
    IDENTIFIER_IDS, OPTION_TABLE, TOKEN_ID, VOCAB, block_tokens, instruction_landmarks,
)
from .world import LANDMARK_NAMES, LANDMARK_VOCAB, VIEW, Action

FRAME_PLANES = 4
FRAME_FEATURES = FRAME_PLANES * VIEW * VIEW
SEG_SYS, SEG_INSTR, SEG_HIST, SEG_CUR, SEG_ACT = range(5)
_LETTER_OF = {TOKEN_ID[c]: c for c in "ABCD"}


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 32
    ffn: int = 64
    max_len: int = 128
    vocab: int = len(VOCAB)
    init_scale: float = 1.0


def init_params(cfg: PolicyConfig, seed: int) -> dict[str, ad.Tensor]:
    rng = np.random.default_rng(seed)
    d, s = cfg.d, cfg.init_scale

    def normal(shape, std):
        return rng.normal(0.0, std * s, size=shape)

    arrays = {
        "tok_emb": normal((cfg.vocab, d), 0.5),
        "seg_emb": normal((5, d), 0.5),
        "pos_emb": normal((cfg.max_len, d), 0.1),
        "frame_w": normal((FRAME_FEATURES, d), 1.0 / np.sqrt(VIEW * VIEW)),
        "frame_b": np.zeros(d),
        "wq": normal((d, d), 1.0 / np.sqrt(d)),
        "wk": normal((d, d), 1.0 / np.sqrt(d)),
        "wv": normal((d, d), 1.0 / np.sqrt(d)),
        "wo": normal((d, d), 1.0 / np.sqrt(d)),
        "w1": normal((d, cfg.ffn), 1.0 / np.sqrt(d)),
        "b1": np.zeros(cfg.ffn),
        "w2": normal((cfg.ffn, d), 1.0 / np.sqrt(cfg.ffn)),
        "b2": np.zeros(d),
        "w_out": normal((d, cfg.vocab), 0.02),
        "b_out": np.zeros(cfg.vocab),
    }
    return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def config_of(params: dict[str, ad.Tensor]) -> PolicyConfig:
    """Recover and cross-check the architecture from parameter shapes."""
    v, d = params["tok_emb"].shape
    ffn = params["w1"].shape[1]
    max_len = params["pos_emb"].shape[0]
    expected = {
        "tok_emb": (v, d), "seg_emb": (5, d), "pos_emb": (max_len, d),
        "frame_w": (FRAME_FEATURES, d), "frame_b": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w1": (d, ffn), "b1": (ffn,), "w2": (ffn, d), "b2": (d,),
        "w_out": (d, v), "b_out": (v,),
    }
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name].data)):
            raise ValueError(f"parameter {name!r} has non-finite values")
    extra = set(params) - set(expected)
    if extra:
        raise ValueError(f"unexpected parameters {sorted(extra)}")
    return PolicyConfig(d=d, ffn=ffn, max_len=max_len, vocab=v)


def copy_params(params: dict[str, ad.Tensor], requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(p.data.copy(), requires_grad=requires_grad, name=k) for k, p in params.items()}


def save_policy(path: str | Path, params: dict[str, ad.Tensor]) -> None:
    ad.save_arrays(path, {k: p.data for k, p in params.items()})


def load_policy(path: str | Path) -> dict[str, ad.Tensor]:
    params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in ad.load_arrays(path).items()}
    config_of(params)
    return params


# ---------------------------------------------------------------- context assembly


def frame_features(prompts) -> tuple[np.ndarray, list[int]]:
    """Binary planes for every frame of every prompt; returns (features, frames-per-prompt)."""
    rasters, goal_ids, named_rows, counts = [], [], [], []
    for p in prompts:
        names, goal = instruction_landmarks(p.instruction)
        named = np.zeros(LANDMARK_VOCAB, dtype=bool)
        for nm in names:
            named[LANDMARK_NAMES.index(nm) + 1] = True
        gid = LANDMARK_NAMES.index(goal) + 1 if goal else -1
        if goal:
            named[gid] = False
        counts.append(len(p.frames))
        for f in p.frames:
            rasters.append(f.raster)
            goal_ids.append(gid)
            named_rows.append(named)
    r = np.stack(rasters).astype(np.int64)             # [Nf, 2, V, V]
    lm = r[:, 1]
    feats = np.empty((len(rasters), FRAME_PLANES, VIEW, VIEW))
    feats[:, 0] = r[:, 0]
    feats[:, 1] = lm > 0
    feats[:, 2] = lm == np.asarray(goal_ids)[:, None, None]
    named_tab = np.stack(named_rows)                   # [Nf, LANDMARK_VOCAB]
    feats[:, 3] = named_tab[np.arange(len(rasters))[:, None, None], lm]
    return feats.reshape(len(rasters), FRAME_FEATURES), counts


@dataclass
class _Layout:
    slot_idx: np.ndarray   # [B, L] row into concat(tok_emb, frame_enc)
    pos_idx: np.ndarray    # [B, L]
    seg_idx: np.ndarray    # [B, L]
    lengths: np.ndarray    # [B]
    prefix: np.ndarray     # [B] slots before the first action token
    feats: np.ndarray      # [Nf, FRAME_FEATURES]
    vocab: int


def _layout(prompts, actions: list[list[int]], vocab: int, max_len: int) -> _Layout:
    feats, counts = frame_features(prompts)
    rows, segs, prefixes = [], [], []
    f0 = 0
    for p, act, nf in zip(prompts, actions, counts):
        instr = [TOKEN_ID[t] for t in p.instruction]
        frame_rows = [vocab + f0 + i for i in range(nf)]
        f0 += nf
        slots = [TOKEN_ID["<sys>"]] + instr + frame_rows + list(act)
        seg = ([SEG_SYS] + [SEG_INSTR] * len(instr) + [SEG_HIST] * (nf - 1) + [SEG_CUR]
               + [SEG_ACT] * len(act))
        if len(slots) > max_len:
            raise ContextOverflow(f"context of {len(slots)} slots exceeds {max_len}")
        rows.append(slots)
        segs.append(seg)
        prefixes.append(1 + len(instr) + nf)
    lengths = np.array([len(r) for r in rows])
    L = int(lengths.max())
    slot_idx = np.zeros((len(rows), L), dtype=np.int64)
    seg_idx = np.zeros((len(rows), L), dtype=np.int64)
    for b, (r, s) in enumerate(zip(rows, segs)):
        slot_idx[b, :len(r)] = r
        seg_idx[b, :len(s)] = s
    pos_idx = np.broadcast_to(np.arange(L), (len(rows), L)).copy()
    return _Layout(slot_idx, pos_idx, seg_idx, lengths, np.array(prefixes), feats, vocab)


@dataclass
class ContextSequence:
    embeddings: np.ndarray   # [L, d] slot embeddings before the attention block
    segments: np.ndarray     # [L] slot kinds (sys, instruction, history, current, action)
    mask: np.ndarray         # [L, L] causal attention mask, True = may attend


def _embed(params, lay: _Layout) -> ad.Tensor:
    frame_enc = ad.tanh(ad.add(ad.matmul(ad.Tensor(lay.feats), params["frame_w"]), params["frame_b"]))
    table = ad.concat([params["tok_emb"], frame_enc], axis=0)
    x = ad.gather_rows(table, lay.slot_idx.reshape(-1))
    x = ad.add(x, ad.gather_rows(params["pos_emb"], lay.pos_idx.reshape(-1)))
    return ad.add(x, ad.gather_rows(params["seg_emb"], lay.seg_idx.reshape(-1)))


def _mask(lay: _Layout) -> np.ndarray:
    B, L = lay.slot_idx.shape
    causal = np.tril(np.ones((L, L), dtype=bool))
    valid = np.arange(L)[None, :] < lay.lengths[:, None]
    return causal[None, :, :] & valid[:, None, :]


def encode_context(params, record, actions: list[int] | None = None) -> ContextSequence:
    cfg = config_of(params)
    lay = _layout([record], [list(actions or [])], cfg.vocab, cfg.max_len)
    x = _embed(params, lay)
    return ContextSequence(x.data.copy(), lay.seg_idx[0].copy(), _mask(lay)[0])


def _hidden(params, lay: _Layout) -> ad.Tensor:
    """Final hidden states, flattened to [B*L, d]."""
    B, L = lay.slot_idx.shape
    d = params["wq"].shape[0]
    x = _embed(params, lay)
    q = ad.reshape(ad.matmul(x, params["wq"]), (B, L, d))
    k = ad.reshape(ad.matmul(x, params["wk"]), (B, L, d))
    v = ad.reshape(ad.matmul(x, params["wv"]), (B, L, d))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    att = ad.softmax(scores, mask=_mask(lay))
    ctx = ad.reshape(ad.matmul(att, v), (B * L, d))
    h = ad.add(x, ad.matmul(ctx, params["wo"]))
    ff = ad.tanh(ad.add(ad.matmul(h, params["w1"]), params["b1"]))
    return ad.add(h, ad.add(ad.matmul(ff, params["w2"]), params["b2"]))


def _logits_at(params, hidden: ad.Tensor, rows: np.ndarray) -> ad.Tensor:
    return ad.add(ad.matmul(ad.gather_rows(hidden, rows), params["w_out"]), params["b_out"])


def identifier_mask(target_ids: np.ndarray, vocab: int, constrained: np.ndarray) -> np.ndarray | None:
    """Per-row allowed-token mask; rows flagged ``constrained`` may only emit A-D."""
    if not constrained.any():
        return None
    mask = np.ones((len(target_ids), vocab), dtype=bool)
    only = np.zeros(vocab, dtype=bool)
    only[list(IDENTIFIER_IDS)] = True
    mask[constrained] = only
    return mask


@dataclass
class TeacherForced:
    logits: ad.Tensor          # [N, V] at every target position
    targets: np.ndarray        # [N]
    seq_of: np.ndarray         # [N] sequence index of each target token
    is_identifier: np.ndarray  # [N]
    batch: int


def teacher_forced(params, prompts, targets: list[list[int]]) -> TeacherForced:
    vocab = params["tok_emb"].shape[0]
    max_len = params["pos_emb"].shape[0]
    inputs = [t[:-1] for t in targets]
    lay = _layout(prompts, inputs, vocab, max_len)
    L = lay.slot_idx.shape[1]
    rows, tgt, seq_of = [], [], []
    for b, t in enumerate(targets):
        start = b * L + lay.prefix[b] - 1
        rows.extend(range(start, start + len(t)))
        tgt.extend(t)
        seq_of.extend([b] * len(t))
    rows = np.array(rows, dtype=np.int64)
    tgt = np.array(tgt, dtype=np.int64)
    logits = _logits_at(params, _hidden(params, lay), rows)
    return TeacherForced(logits, tgt, np.array(seq_of), np.isin(tgt, IDENTIFIER_IDS), len(targets))


def token_log_probs(params, prompts, targets: list[list[int]], constrained: bool = False) -> tuple[ad.Tensor, np.ndarray]:
    """Per-token causal log-probs (flat [N]) and the sequence index of each token.

    With ``constrained`` the identifier positions are normalised over A-D only,
    matching what :func:`sample_actions` draws from.
    """
    tf = teacher_forced(params, prompts, targets)
    mask = identifier_mask(tf.targets, tf.logits.shape[1], tf.is_identifier) if constrained else None
    logp = ad.pick(ad.log_softmax(tf.logits, mask=mask), tf.targets)
    return logp, tf.seq_of


def sequence_reduce(per_token: ad.Tensor, seq_of: np.ndarray, batch: int, normalize: bool = False,
                    keep: np.ndarray | None = None) -> ad.Tensor:
    """Per-sequence sums (or means) of a flat per-token tensor, as a [B] tensor.

    ``keep`` restricts the reduction to flagged tokens (e.g. sampled identifiers).
    """
    sel = np.zeros((batch, len(seq_of)))
    sel[seq_of, np.arange(len(seq_of))] = 1.0 if keep is None else np.asarray(keep, dtype=np.float64)
    if normalize:
        sel /= sel.sum(axis=1, keepdims=True)
    return ad.reshape(ad.matmul(ad.Tensor(sel), ad.reshape(per_token, (len(seq_of), 1))), (batch,))


def choice_mask(tokens: list[list[int]]) -> np.ndarray:
    """Flat flags marking identifier tokens, the only positions decoding samples."""
    return np.isin(np.concatenate([np.asarray(t, dtype=np.int64) for t in tokens]), IDENTIFIER_IDS)


def sequence_log_prob(params, prompt, target_tokens: list[int], constrained: bool = False) -> tuple[float, np.ndarray]:
    """Teacher-forced log-probability of one target sequence and its per-token terms."""
    logp, _ = token_log_probs(params, [prompt], [list(target_tokens)], constrained)
    return float(logp.data.sum()), logp.data.copy()


# ---------------------------------------------------------------- decoding


def _identifier_logits(params, prompts, seqs: list[list[int]]) -> np.ndarray:
    """Logits over (A, B, C, D) at the next position of every sequence."""
    vocab = params["tok_emb"].shape[0]
    lay = _layout(prompts, seqs, vocab, params["pos_emb"].shape[0])
    L = lay.slot_idx.shape[1]
    rows = np.arange(len(seqs)) * L + lay.lengths - 1
    logits = _logits_at(params, _hidden(params, lay), rows).data
    return logits[:, list(IDENTIFIER_IDS)]


@dataclass
class SampledResponse:
    tokens: list[int]
    log_probs: np.ndarray   # per token, constrained, temperature 1
    actions: list[Action]


def _parse(tokens: list[int]) -> list[Action]:
    return [OPTION_TABLE[_LETTER_OF[t]][0] for t in tokens if t in _LETTER_OF]


def decode(params, prompts, n: int, rng: np.random.Generator | None = None,
           temperature: float = 1.0, greedy: bool = False, with_log_probs: bool = True) -> list[SampledResponse]:
    """Decode ``n`` action blocks per prompt.

    Identifiers are drawn from A-D only; the description tokens that follow
    are forced from the option table.
    """
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be > 0")
    seqs: list[list[int]] = [[] for _ in prompts]
    ids = np.array(IDENTIFIER_IDS)
    for _ in range(n):
        z = _identifier_logits(params, prompts, seqs)
        if greedy:
            choice = np.argmax(z, axis=1)
        else:
            z = z / temperature
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random(len(prompts))
            choice = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), 3)
        for seq, c in zip(seqs, choice):
            seq.extend(TOKEN_ID[t] for t in block_tokens(VOCAB[ids[c]]))
    if with_log_probs:
        logp, seq_of = token_log_probs(params, prompts, seqs, constrained=True)
        per = [logp.data[seq_of == b].copy() for b in range(len(prompts))]
    else:
        per = [np.zeros(len(s)) for s in seqs]
    return [SampledResponse(s, lp, _parse(s)) for s, lp in zip(seqs, per)]


def sample_actions(params, prompt, rng: np.random.Generator, temperature: float = 1.0,
                   n: int = 6) -> SampledResponse:
    return decode(params, [prompt], n, rng=rng, temperature=temperature)[0]


def greedy_actions(params, prompts, n: int) -> list[list[Action]]:
    return [r.actions for r in decode(params, prompts, n, greedy=True, with_log_probs=False)]


def target_ids(letters) -> list[int]:
    return [TOKEN_ID[t] for letter in letters for t in block_tokens(letter)]
