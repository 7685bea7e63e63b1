"""Dev-set probes: denoising robustness split, attention entropy, token similarities."""
from __future__ import annotations

from collections import Counter

import numpy as np

from . import numcore as nc
from .data import TranslationTask, blank_ratio, decoder_io, pad_frames, split_by_blank_ratio
from .decoding import beam_search, ctc_greedy_decode
from .metrics import ABSENT, AnalysisReport, attention_entropy, corpus_bleu, crossmodal_similarity


def probe_tokens(quads, vocab, k: int = 5) -> list[int]:
    """The ``k`` most frequent content tokens in the transcriptions (ties by id)."""
    counts = Counter(w for q in quads for w in q.t if w in set(vocab.content))
    return [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def textual_adapter_entropy(assembly, quads, fresh_adapter=None, per_head: bool = False):
    """Self-attention entropy of the textual adapter on the trained alignment-adapter outputs.

    ``fresh_adapter`` substitutes another adapter module on the same inputs.
    """
    adapter = fresh_adapter if fresh_adapter is not None else assembly.textual_adapter
    assembly.eval()
    adapter.eval()
    with nc.no_grad():
        feats, mask = pad_frames([q.s for q in quads])
        frames, m = assembly.speech_encoder_forward(feats, mask)
        hidden, _, m = assembly.alignment_adapter_forward(frames, m)
        adapter(hidden, m)
    w = adapter.attn.last_weights
    if per_head:
        return [attention_entropy(w[:, h: h + 1], m) for h in range(w.shape[1])]
    return attention_entropy(w, m)


def cross_attention_entropy(assembly, quads) -> float:
    assembly.eval()
    with nc.no_grad():
        feats, mask = pad_frames([q.s for q in quads])
        A, amask = assembly.st_encode(feats, mask)
        y_in, _, ymask = decoder_io([q.y for q in quads], assembly.vocab)
        assembly.decoder_forward(A, amask, y_in, ymask)
    return attention_entropy(assembly.decoder.cross_weights[-1], ymask)


def mean_crossmodal(assembly, quads, probes, task: TranslationTask | None = None) -> dict:
    """Per probe token, the average similarity over the samples where it is present."""
    acc = {w: {"cross_modal": [], "cross_lingual": []} for w in probes}
    translate = (lambda w: task.permutation[w]) if task is not None else None
    for q in quads:
        present = [w for w in probes if w in q.t]
        if not present:
            continue
        for w, row in crossmodal_similarity(assembly, q.s, present, translate).items():
            for metric, v in row.items():
                if v is not ABSENT:
                    acc[w][metric].append(v)
    return {w: {m: (float(np.mean(v)) if v else ABSENT) for m, v in d.items()} for w, d in acc.items()}


def analyze(assembly, quads, task: TranslationTask, threshold: float = 0.3, beam: int = 4,
            length_penalty: float = 1.0, max_len: int = 12):
    """Returns ``(report, rows)``; ``rows`` are ``(probe, metric, value)`` CSV records."""
    vocab = assembly.vocab
    ratios, hyps = [], []
    assembly.eval()
    for q in quads:
        with nc.no_grad():
            feats, mask = pad_frames([q.s])
            out = assembly.st_encode_full(feats, mask)
        n = int(out["mask"][0].sum())
        ratios.append(blank_ratio(ctc_greedy_decode(out["ctc_log_probs"].data[0, :n], keep_blanks=True,
                                                    blank=vocab.blank_id), vocab.blank_id))
        hyps.append(beam_search(assembly, q.s, beam, length_penalty, max_len).tokens)
    idx = list(range(len(quads)))
    low, high = split_by_blank_ratio(idx, ratios, threshold)
    rows = [("all", "bleu", corpus_bleu(hyps, [q.y for q in quads]))]
    for name, part in (("low_noise", low), ("high_noise", high)):
        rows.append((name, "count", float(len(part))))
        rows.append((name, "bleu", corpus_bleu([hyps[i] for i in part], [quads[i].y for i in part])
                     if part else "absent"))
    per_head = textual_adapter_entropy(assembly, quads, per_head=True)
    for h, v in enumerate(per_head):
        rows.append((f"head{h}", "self_attention_entropy", v))
    report = AnalysisReport(
        self_attention_entropy=textual_adapter_entropy(assembly, quads),
        cross_attention_entropy=cross_attention_entropy(assembly, quads),
        rows=mean_crossmodal(assembly, quads, probe_tokens(quads, vocab), task),
        blank_ratio=float(np.mean(ratios)),
    )
    rows.extend(report.csv_rows())
    return report, rows
