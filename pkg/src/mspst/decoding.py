"""CTC greedy decoding and autoregressive beam search."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import pad_frames
from .losses import collapse


def ctc_greedy_decode(log_probs, keep_blanks: bool = False, blank: int = 1) -> tuple:
    """Per-frame argmax; with ``keep_blanks`` the raw path, otherwise the collapsed labels."""
    lp = log_probs.data if isinstance(log_probs, nc.Tensor) else np.asarray(log_probs)
    path = tuple(int(v) for v in lp.argmax(axis=-1))
    return path if keep_blanks else collapse(path, blank)


@dataclass
class DecodeResult:
    tokens: tuple
    score: float
    logprob: float
    finished: bool = True
    cross_attention: list = field(default_factory=list)


def _normalised(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (max(length, 1) ** length_penalty)


def beam_search_core(step_fn, bos: int, eos: int, beam: int = 4, length_penalty: float = 1.0,
                     max_len: int = 20) -> DecodeResult:
    """Beam search over any next-token scorer.

    ``step_fn(prefixes)`` takes a list of equal-length token tuples (each
    starting with ``bos``) and returns an ``(n, V)`` array of next-token
    log-probabilities. Candidates are ranked by cumulative log-probability,
    ties broken by token ids; finished hypotheses are ranked by
    ``logP / len ** length_penalty`` where ``len`` counts generated tokens
    including ``eos``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [((bos,), 0.0)]
    finished: list[tuple[tuple, float]] = []
    for _ in range(max_len):
        lps = np.asarray(step_fn([h for h, _ in live]))
        cands = []
        for (prefix, score), row in zip(live, lps):
            for k in np.flatnonzero(np.isfinite(row)):
                cands.append((score + float(row[k]), prefix + (int(k),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in cands:
            if seq[-1] == eos:
                finished.append((seq, score))
            else:
                live.append((seq, score))
            if len(live) == beam:
                break
        if len(finished) >= beam or not live:
            break
    pool = finished if finished else live
    is_done = bool(finished)
    best_seq, best_lp = max(pool, key=lambda c: (_normalised(c[1], len(c[0]) - 1, length_penalty),
                                                 tuple(-v for v in c[0])))
    out = best_seq[1:-1] if is_done else best_seq[1:]
    return DecodeResult(tuple(out), _normalised(best_lp, len(best_seq) - 1, length_penalty), best_lp, is_done)


def _blocked(vocab) -> np.ndarray:
    """Ids the decoder may never emit: pad, bos and blank."""
    out = np.zeros(vocab.size, dtype=bool)
    out[[vocab.pad_id, vocab.bos_id, vocab.blank_id]] = True
    return out


def _next_token_logprobs(logits, vocab) -> np.ndarray:
    last = np.where(_blocked(vocab), -np.inf, logits.data[:, -1, :])
    m = last.max(axis=-1, keepdims=True)
    return last - m - np.log(np.exp(last - m).sum(axis=-1, keepdims=True))


def _decoder_step_fn(assembly, memory, mem_mask):
    def step(prefixes):
        ids = np.array(prefixes, dtype=np.int64)
        n = ids.shape[0]
        mem = nc.Tensor(np.repeat(memory.data, n, axis=0))
        mm = np.repeat(mem_mask, n, axis=0)
        return _next_token_logprobs(assembly.decoder_forward(mem, mm, ids), assembly.vocab)
    return step


def beam_search(assembly, s, beam: int = 4, length_penalty: float = 1.0, max_len: int = 20) -> DecodeResult:
    """Translate one utterance ``s`` (frames x features) with the ST encoder and decoder.

    Pad, bos and blank are never emitted.
    """
    vocab = assembly.vocab
    assembly.eval()
    with nc.no_grad():
        feats, mask = pad_frames([s])
        memory, mem_mask = assembly.st_encode(feats, mask)
        step = _decoder_step_fn(assembly, memory, mem_mask)
        res = beam_search_core(step, vocab.bos_id, vocab.eos_id, beam, length_penalty, max_len)
        final = (vocab.bos_id, *res.tokens)
        step([final])
        res.cross_attention = [w[0] for w in assembly.decoder.cross_weights]
    return res


def greedy_decode_memory(assembly, memory, mem_mask, max_len: int = 20) -> list[tuple]:
    """Batched argmax decoding from precomputed encoder memory."""
    vocab = assembly.vocab
    B = memory.shape[0]
    ids = np.full((B, 1), vocab.bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with nc.no_grad():
        for _ in range(max_len):
            logits = assembly.decoder_forward(memory, mem_mask, ids)
            nxt = _next_token_logprobs(logits, vocab).argmax(axis=-1)
            nxt = np.where(done, vocab.pad_id, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos_id
            if done.all():
                break
    out = []
    for row in ids[:, 1:]:
        toks = []
        for v in row:
            if v in (vocab.eos_id, vocab.pad_id):
                break
            toks.append(int(v))
        out.append(tuple(toks))
    return out


def greedy_decode(assembly, s, max_len: int = 20) -> tuple:
    assembly.eval()
    with nc.no_grad():
        feats, mask = pad_frames([s])
        memory, mem_mask = assembly.st_encode(feats, mask)
    return greedy_decode_memory(assembly, memory, mem_mask, max_len)[0]
