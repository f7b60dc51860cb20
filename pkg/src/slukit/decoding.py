"""Autoregressive inference: greedy decoding and beam search with temperature.

Both decoders are written against a step function `prefixes (N, L) -> log
probs (N, V)` so toy models plug in directly for oracle tests; wrappers build
that step function from a ModelBundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokenizer as tok
from .model import EncoderStates, ModelBundle
from .tensorcore import Tensor


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def model_step_fn(m: ModelBundle, enc: EncoderStates):
    """Returns step(prefixes (N, L)) -> raw logits (N, V) for the last position."""
    hidden = enc.hidden
    valid = enc.valid_len

    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        if hidden.shape[0] == n:
            states = enc
        else:
            tiled = Tensor(np.repeat(hidden.data, n, axis=0))
            states = EncoderStates(tiled, np.repeat(valid, n))
        logits = m.decode_logits(prefixes, states)
        return logits.data[:, -1, :]

    return step


def greedy_tokens(step_fn, max_len: int, bos: int = tok.BOS_ID, eos: int = tok.EOS_ID) -> list[int]:
    ids = [bos]
    for _ in range(max_len):
        logits = step_fn(np.asarray([ids], dtype=np.int64))[0]
        nxt = int(np.argmax(logits))  # np.argmax already breaks ties toward low ids
        ids.append(nxt)
        if nxt == eos:
            break
    return ids


def beam_tokens(step_fn, vocab_size: int, max_len: int, width: int = 32,
                temperature: float = 1.25, len_norm_alpha: float = 0.0,
                bos: int = tok.BOS_ID, eos: int = tok.EOS_ID) -> list[int]:
    """Top-`width` beam search over log-softmax(logits/temperature).

    Finished hypotheses retire into a pool; the best pooled hypothesis wins
    (best live one if the pool is empty). Ties break toward the lower token
    id, then the lexicographically smaller sequence.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")

    live: list[BeamHypothesis] = [BeamHypothesis((bos,), 0.0, False)]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        prefixes = np.asarray([h.ids for h in live], dtype=np.int64)
        logp = _log_softmax_np(step_fn(prefixes) / temperature)   # (n, V)
        scores = np.asarray([h.score for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        k = min(width, flat.size)
        # sort by score desc, then token id asc, then hypothesis index asc
        hyp_idx = np.repeat(np.arange(len(live)), vocab_size)
        tok_idx = np.tile(np.arange(vocab_size), len(live))
        order = np.lexsort((hyp_idx, tok_idx, -flat))[:k]
        new_live: list[BeamHypothesis] = []
        for oi in order:
            h = live[hyp_idx[oi]]
            t = int(tok_idx[oi])
            cand = BeamHypothesis(h.ids + (t,), float(flat[oi]), t == eos)
            if cand.finished:
                finished.append(cand)
            else:
                new_live.append(cand)
        live = new_live

    def ranked(h: BeamHypothesis) -> tuple:
        length = max(len(h.ids) - 1, 1)
        score = h.score / (length ** len_norm_alpha) if len_norm_alpha else h.score
        return (-score, h.ids)

    pool = finished if finished else live
    best = min(pool, key=ranked)
    return list(best.ids)


def _detok(ids: list[int], v: tok.Vocab) -> str:
    return tok.decode(ids, v)


def greedy_decode(m: ModelBundle, inputs: np.ndarray, valid_len: int,
                  max_len: int = 192) -> str:
    """Argmax decoding of a single input; returns the raw detokenized string."""
    enc = m.encode(np.asarray(inputs)[None, ...], np.asarray([valid_len]))
    ids = greedy_tokens(model_step_fn(m, enc), max_len)
    return _detok(ids, m.tokenizers["target"])


def beam_search(m: ModelBundle, inputs: np.ndarray, valid_len: int, width: int = 32,
                temperature: float = 1.25, max_len: int = 192,
                len_norm_alpha: float = 0.0) -> str:
    enc = m.encode(np.asarray(inputs)[None, ...], np.asarray([valid_len]))
    v = m.tokenizers["target"]
    ids = beam_tokens(model_step_fn(m, enc), v.total_size, max_len, width,
                      temperature, len_norm_alpha)
    return _detok(ids, v)


def decode_dataset(m: ModelBundle, inputs: list, greedy: bool = False, width: int = 32,
                   temperature: float = 1.25, max_len: int = 192) -> list[str]:
    """Decode a list of (T, feat_dim) arrays (e2e) or token id lists (nlu)."""
    out = []
    for x in inputs:
        x = np.asarray(x)
        vl = x.shape[0]
        if greedy:
            out.append(greedy_decode(m, x, vl, max_len))
        else:
            out.append(beam_search(m, x, vl, width, temperature, max_len))
    return out
