"""Corpus BLEU and representation probes (attention entropy, token cosine similarity)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import pad_frames

BLEU_SMOOTH = 1e-9


def _ngrams(seq, n):
    return Counter(tuple(seq[i: i + n]) for i in range(len(seq) - n + 1))


def _as_tokens(s):
    return s.split() if isinstance(s, str) else list(s)


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100] with one reference per hypothesis.

    Clipped n-gram counts are pooled over the corpus; an order with no
    matches contributes ``BLEU_SMOOTH`` instead of zero.
    """
    hypotheses, references = list(hypotheses), list(references)
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in number")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _as_tokens(hyp), _as_tokens(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            match[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = sum(math.log(max(m, BLEU_SMOOTH) / t if t else BLEU_SMOOTH) for m, t in zip(match, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def attention_entropy(weights, query_mask=None) -> float:
    """Mean over heads and valid query rows of ``-sum_j w_ij ln w_ij`` (nats).

    ``weights`` is ``(..., H, Lq, Lk)``; ``query_mask`` is ``(..., Lq)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(w > 0, w * np.log(w), 0.0).sum(axis=-1)
    if query_mask is None:
        return float(ent.mean())
    m = np.broadcast_to(np.expand_dims(np.asarray(query_mask, dtype=bool), -2), ent.shape)
    return float(ent[m].mean())


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))


ABSENT = None


@dataclass
class AnalysisReport:
    self_attention_entropy: float = math.nan
    cross_attention_entropy: float = math.nan
    rows: dict = field(default_factory=dict)
    blank_ratio: float = math.nan

    def csv_rows(self):
        yield ("all", "self_attention_entropy", self.self_attention_entropy)
        yield ("all", "cross_attention_entropy", self.cross_attention_entropy)
        yield ("all", "blank_ratio", self.blank_ratio)
        for probe in sorted(self.rows):
            for metric, value in sorted(self.rows[probe].items()):
                yield (str(probe), metric, "absent" if value is ABSENT else value)


def crossmodal_similarity(assembly, s, probe_tokens, translate_token=None) -> dict:
    """Cosine between each probe token's frame-averaged alignment-adapter output and embeddings.

    Frames are assigned to tokens by the CTC head's per-frame argmax. For a
    probe ``w``: ``cross_modal = cos(mean_frames(w), E[w])`` and, when
    ``translate_token`` is given, ``cross_lingual = cos(mean_frames(w), E[translate_token(w)])``.
    Tokens with no assigned frame are reported as ``None``.
    """
    assembly.eval()
    with nc.no_grad():
        feats, mask = pad_frames([s])
        frames, m = assembly.speech_encoder_forward(feats, mask)
        hidden, log_probs, m = assembly.alignment_adapter_forward(frames, m)
    n = int(m[0].sum())
    h = hidden.data[0, :n]
    labels = log_probs.data[0, :n].argmax(axis=-1)
    emb = assembly.shared_embedding.data
    rows = {}
    for w in probe_tokens:
        sel = labels == w
        if not sel.any():
            rows[w] = {"cross_modal": ABSENT, "cross_lingual": ABSENT}
            continue
        v = h[sel].mean(axis=0)
        row = {"cross_modal": cosine(v, emb[w])}
        row["cross_lingual"] = cosine(v, emb[translate_token(w)]) if translate_token else ABSENT
        rows[w] = row
    return rows
