"""Synthetic speech/transcription/translation corpus and text perturbations.

The toy task: a source sentence ``x`` over a small vocabulary translates to
``y`` by reversing it, dropping punctuation, and mapping every content token
through a fixed permutation. Speech for a sentence repeats a per-token
codebook vector a random number of frames and adds Gaussian noise.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class SharedVocab:
    size: int = 20
    pad_id: int = 0
    blank_id: int = 1
    bos_id: int = 2
    eos_id: int = 3
    punctuation: tuple = (4, 5, 6)

    def __post_init__(self):
        special = (self.pad_id, self.blank_id, self.bos_id, self.eos_id)
        if len(set(special)) != 4:
            raise ValueError("pad/blank/bos/eos ids must be distinct")
        reserved = set(special) | set(self.punctuation)
        if len(reserved) != 4 + len(self.punctuation):
            raise ValueError("punctuation ids overlap special ids")
        if any(i < 0 or i >= self.size for i in reserved):
            raise ValueError("reserved ids must be below the vocabulary size")
        if self.size <= len(reserved):
            raise ValueError("vocabulary has no content tokens")

    @property
    def special(self) -> tuple:
        return (self.pad_id, self.blank_id, self.bos_id, self.eos_id)

    @property
    def content(self) -> tuple:
        reserved = set(self.special) | set(self.punctuation)
        return tuple(i for i in range(self.size) if i not in reserved)

    @property
    def words(self) -> tuple:
        """Ids a sentence may contain: content tokens and punctuation."""
        return tuple(sorted(self.content + tuple(self.punctuation)))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 20
    min_len: int = 3
    max_len: int = 6
    kmin: int = 10
    kmax: int = 14
    feature_dim: int = 16
    noise_sigma: float = 0.5
    punct_prob: float = 0.15
    mapping_seed: int = 0
    n_mt: int = 2000
    n_asr: int = 600
    n_st: int = 200
    n_dev: int = 100
    n_test: int = 100

    def __post_init__(self):
        if self.kmin < 1 or self.kmax < self.kmin:
            raise ValueError("need 1 <= kmin <= kmax")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.punct_prob < 1.0:
            raise ValueError("punct_prob must lie in [0, 1)")
        SharedVocab(self.vocab_size)

    @property
    def vocab(self) -> SharedVocab:
        return SharedVocab(self.vocab_size)


class MTPair(NamedTuple):
    x: tuple
    y: tuple


class ASRPair(NamedTuple):
    s: np.ndarray
    t: tuple


class STPair(NamedTuple):
    s: np.ndarray
    y: tuple


class Quadruple(NamedTuple):
    s: np.ndarray
    t: tuple
    x: tuple
    y: tuple


@dataclass
class CorpusSplit:
    mt: list = field(default_factory=list)
    asr: list = field(default_factory=list)
    st: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @staticmethod
    def _view(quads, kind):
        if kind == "mt":
            return [MTPair(q.x, q.y) for q in quads]
        if kind == "asr":
            return [ASRPair(q.s, q.t) for q in quads]
        if kind == "st":
            return [STPair(q.s, q.y) for q in quads]
        raise ValueError(kind)

    def dev_pairs(self, kind: str) -> list:
        return self._view(self.dev, kind)

    def test_pairs(self, kind: str) -> list:
        return self._view(self.test, kind)


class TranslationTask:
    """Deterministic mapping and speech codebook behind a :class:`SyntheticTaskSpec`."""

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        self.vocab = spec.vocab
        rng = np.random.default_rng(spec.mapping_seed)
        content = np.array(self.vocab.content)
        self.permutation = dict(zip(content.tolist(), rng.permutation(content).tolist()))
        self.codebook = rng.normal(0.0, 1.0, size=(self.vocab.size, spec.feature_dim))

    def translate(self, x) -> tuple:
        punct = set(self.vocab.punctuation)
        return tuple(self.permutation[w] for w in reversed(x) if w not in punct)

    def sample_sentence(self, rng) -> tuple:
        content, punct = self.vocab.content, self.vocab.punctuation
        while True:
            n = int(rng.integers(self.spec.min_len, self.spec.max_len + 1))
            is_p = rng.random(n) < self.spec.punct_prob
            toks = [int(punct[rng.integers(len(punct))]) if p else int(content[rng.integers(len(content))])
                    for p in is_p]
            if not all(is_p):
                return tuple(toks)

    def synthesize(self, t, rng, return_durations: bool = False):
        """Frames for transcription ``t``; with ``return_durations`` also the per-token frame counts."""
        reps = rng.integers(self.spec.kmin, self.spec.kmax + 1, size=len(t))
        frames = np.repeat(self.codebook[list(t)], reps, axis=0)
        frames = frames + rng.normal(0.0, self.spec.noise_sigma, size=frames.shape)
        return (frames, reps) if return_durations else frames


def gen_corpus(spec: SyntheticTaskSpec, seed: int) -> CorpusSplit:
    """Draw disjoint sentence pools for every split; a pure function of ``(spec, seed)``."""
    task = TranslationTask(spec)
    rng = np.random.default_rng(seed)
    sizes = {"mt": spec.n_mt, "asr": spec.n_asr, "st": spec.n_st, "dev": spec.n_dev, "test": spec.n_test}
    seen: set = set()
    out = CorpusSplit()
    for name, n in sizes.items():
        quads = []
        attempts = 0
        while len(quads) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise ValueError(f"cannot draw {n} distinct sentences for split {name!r}")
            x = task.sample_sentence(rng)
            if x in seen:
                continue
            seen.add(x)
            s = task.synthesize(x, rng) if name != "mt" else None
            quads.append(Quadruple(s, x, x, task.translate(x)))
        if name in ("dev", "test"):
            setattr(out, name, quads)
        else:
            setattr(out, name, CorpusSplit._view(quads, name))
    return out


# -- text perturbations -------------------------------------------------------
def round_half_up(r: float, n: int) -> int:
    """``round(r * n)`` with ties going up, exact for decimal ``r``."""
    return math.floor(Fraction(repr(float(r))) * n + Fraction(1, 2))


def blank_perturb(x, r: float, rng: np.random.Generator, blank_id: int = 1) -> tuple:
    """Insert ``round(r * |x|)`` blanks at uniformly random positions, keeping token order."""
    if r < 0:
        raise ValueError("r must be non-negative")
    x = tuple(int(v) for v in x)
    if blank_id in x:
        raise ValueError("input already contains blank symbols")
    k = round_half_up(r, len(x))
    if k == 0:
        return x
    m = len(x) + k
    slots = np.zeros(m, dtype=bool)
    slots[rng.choice(m, size=k, replace=False)] = True
    it = iter(x)
    return tuple(blank_id if b else next(it) for b in slots)


def strip_blanks(x, blank_id: int = 1) -> tuple:
    return tuple(int(v) for v in x if v != blank_id)


def make_noisy_test(x, vocab: SharedVocab) -> tuple:
    """Replace punctuation by the blank symbol, in place."""
    punct = set(vocab.punctuation)
    return tuple(vocab.blank_id if v in punct else int(v) for v in x)


def blank_ratio(tokens, blank_id: int = 1) -> float:
    tokens = list(tokens)
    return sum(1 for v in tokens if v == blank_id) / len(tokens) if tokens else 0.0


def split_by_blank_ratio(samples, ratios, threshold: float = 0.3):
    """Partition ``samples`` into (ratio <= threshold, ratio > threshold)."""
    low, high = [], []
    for sample, ratio in zip(samples, ratios, strict=True):
        (high if ratio > threshold else low).append(sample)
    return low, high


# -- batching -------------------------------------------------------------------
def pad_tokens(seqs, pad_id: int = 0):
    seqs = [list(s) for s in seqs]
    L = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def pad_frames(frames):
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    T = max(len(f) for f in frames)
    out = np.zeros((len(frames), T, frames[0].shape[1]))
    mask = np.zeros((len(frames), T), dtype=bool)
    for i, f in enumerate(frames):
        out[i, : len(f)] = f
        mask[i, : len(f)] = True
    return out, mask


def decoder_io(ys, vocab: SharedVocab):
    """Teacher-forcing input ``[bos] + y`` and output ``y + [eos]``, padded."""
    y_in, mask = pad_tokens([(vocab.bos_id, *y) for y in ys], vocab.pad_id)
    y_out, _ = pad_tokens([(*y, vocab.eos_id) for y in ys], vocab.pad_id)
    return y_in, y_out, mask


@dataclass
class Batch:
    pairs: list
    kind: str
    vocab: SharedVocab

    def __len__(self):
        return len(self.pairs)

    @property
    def source_tokens(self):
        return [p.x if self.kind == "mt" else p.t for p in self.pairs]

    def speech(self):
        return pad_frames([p.s for p in self.pairs])

    def targets(self):
        return decoder_io([p.y for p in self.pairs], self.vocab)


def _kind_of(pair) -> str:
    return {MTPair: "mt", ASRPair: "asr", STPair: "st"}[type(pair)]


def batcher(pairs, batch_size: int, seed: int, epoch: int = 0, vocab: SharedVocab | None = None,
            shuffle: bool = True):
    """Yield shuffled batches covering every pair once per epoch.

    ASR batches feed the contrastive loss, which needs in-batch negatives, so
    they must hold at least two samples; a lone trailing sample joins the
    previous batch.
    """
    if not pairs:
        return
    vocab = vocab or SharedVocab()
    kind = _kind_of(pairs[0])
    if kind == "asr" and batch_size < 2:
        raise ValueError("ASR batches need at least 2 samples for contrastive negatives")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(pairs))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    chunks = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if kind == "asr" and len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    for chunk in chunks:
        yield Batch([pairs[i] for i in chunk], kind, vocab)


# -- corpus files -----------------------------------------------------------------
def _write_tokens(path, seqs):
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(" ".join(str(int(v)) for v in s) + "\n")


def _read_tokens(path):
    with open(path) as fh:
        return [tuple(int(v) for v in line.split()) for line in fh.read().splitlines()]


def _write_speech(path, frames):
    offset = 0
    with open(path + ".f64", "wb") as data, open(path + ".idx", "w") as idx:
        for f in frames:
            f = np.ascontiguousarray(f, dtype="<f8")
            data.write(f.tobytes())
            idx.write(f"{offset} {f.shape[0]} {f.shape[1]}\n")
            offset += f.nbytes


def _read_speech(path):
    blob = open(path + ".f64", "rb").read()
    out = []
    with open(path + ".idx") as fh:
        for line in fh.read().splitlines():
            off, n, d = (int(v) for v in line.split())
            out.append(np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64))
    return out


_FIELDS = {"mt": ("x", "y"), "asr": ("s", "t"), "st": ("s", "y"),
           "dev": ("s", "t", "x", "y"), "test": ("s", "t", "x", "y")}


def save_corpus(corpus: CorpusSplit, directory) -> str:
    """Write token files, speech blobs with index sidecars and a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for split, fields in _FIELDS.items():
        items = getattr(corpus, split)
        for f in fields:
            name = f"{split}.{f}"
            values = [getattr(it, f) for it in items]
            if f == "s":
                _write_speech(os.path.join(directory, name), values)
            else:
                _write_tokens(os.path.join(directory, name + ".tok"), values)
            lines.append(f"{name}={name}" + ("" if f == "s" else ".tok"))
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_corpus(manifest_path) -> CorpusSplit:
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = {}
    with open(manifest_path) as fh:
        for line in fh.read().splitlines():
            if line.strip():
                key, _, rel = line.partition("=")
                entries[key] = os.path.join(base, rel)
    out = CorpusSplit()
    cls = {"mt": MTPair, "asr": ASRPair, "st": STPair, "dev": Quadruple, "test": Quadruple}
    for split, fields in _FIELDS.items():
        cols = []
        for f in fields:
            path = entries[f"{split}.{f}"]
            cols.append(_read_speech(path) if f == "s" else _read_tokens(path))
        setattr(out, split, [cls[split](*vals) for vals in zip(*cols)])
    return out
