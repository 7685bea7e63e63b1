"""scikit-learn style facade over the three-step pipeline."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import numcore as nc
from ._validation import check_consistent_length, check_is_fitted, check_speech, check_token_sequences
from .data import ASRPair, CorpusSplit, MTPair, Quadruple, SharedVocab, STPair, pad_frames
from .decoding import beam_search
from .losses import mean_pool
from .metrics import corpus_bleu
from .pipeline import PipelineConfig, build_assembly, run_pipeline


class MSPSTTranslator(TransformerMixin, BaseEstimator):
    """Speech-to-text translator trained with MT, ASR and ST steps.

    ``fit(X, y, transcripts=..., mt_pairs=...)`` takes speech arrays ``X``,
    target token sequences ``y``, optional source transcriptions for the
    ASR step and optional extra text pairs for the MT step. Without
    transcripts only the ST step runs. A ``dev_fraction`` slice of the
    speech samples drives early stopping.

    ``predict`` returns token tuples from beam search, ``transform`` the
    mean-pooled textual-adapter output, ``score`` corpus BLEU.
    """

    def __init__(self, model_dim=64, heads=4, ffn_dim=256, dropout=0.1, lr=1e-3, batch_size=16,
                 mt_max_epochs=10, asr_max_epochs=10, st_max_epochs=20, tau=0.1, alpha=0.3, r=0.3,
                 use_sidae=True, use_cl=True, use_kd=True, beam=4, length_penalty=1.0,
                 max_decode_len=12, vocab_size=20, dev_fraction=0.1, seed=0):
        self.model_dim = model_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.mt_max_epochs = mt_max_epochs
        self.asr_max_epochs = asr_max_epochs
        self.st_max_epochs = st_max_epochs
        self.tau = tau
        self.alpha = alpha
        self.r = r
        self.use_sidae = use_sidae
        self.use_cl = use_cl
        self.use_kd = use_kd
        self.beam = beam
        self.length_penalty = length_penalty
        self.max_decode_len = max_decode_len
        self.vocab_size = vocab_size
        self.dev_fraction = dev_fraction
        self.seed = seed

    def _config(self, feature_dim: int, pretrain: bool) -> PipelineConfig:
        names = {f.name for f in dataclasses.fields(PipelineConfig)}
        params = {k: v for k, v in self.get_params().items() if k in names}
        return PipelineConfig(**params, feature_dim=feature_dim, pretrain=pretrain, data_seed=self.seed)

    def fit(self, X, y, transcripts=None, mt_pairs=None):
        vocab = SharedVocab(self.vocab_size)
        speech = check_speech(X)
        ys = check_token_sequences(y, vocab, "y")
        ts = check_token_sequences(transcripts, vocab, "transcripts") if transcripts is not None else None
        n = check_consistent_length(speech, ys, ts)
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must lie in (0, 1)")
        n_dev = max(1, int(round(self.dev_fraction * n)))
        if n - n_dev < 2:
            raise ValueError("need at least two training samples after the dev split")
        order = np.random.default_rng(self.seed).permutation(n)
        dev_idx, train_idx = order[:n_dev], order[n_dev:]
        ts_or_empty = ts if ts is not None else [()] * n
        corpus = CorpusSplit(
            st=[STPair(speech[i], ys[i]) for i in train_idx],
            dev=[Quadruple(speech[i], ts_or_empty[i], ts_or_empty[i], ys[i]) for i in dev_idx],
        )
        pretrain = ts is not None
        if pretrain:
            corpus.asr = [ASRPair(speech[i], ts[i]) for i in train_idx]
            corpus.mt = [MTPair(ts[i], ys[i]) for i in train_idx]
        if mt_pairs is not None:
            xs = check_token_sequences([p[0] for p in mt_pairs], vocab, "mt_pairs source")
            ym = check_token_sequences([p[1] for p in mt_pairs], vocab, "mt_pairs target")
            corpus.mt.extend(MTPair(a, b) for a, b in zip(xs, ym))
        config = self._config(speech[0].shape[1], pretrain)
        result = run_pipeline(config, corpus)
        self.config_ = config
        self.assembly_ = build_assembly(config, result.final)
        self.metrics_ = result.metrics
        self.n_features_in_ = speech[0].shape[1]
        return self

    def predict(self, X) -> list[tuple]:
        check_is_fitted(self)
        speech = check_speech(X, self.n_features_in_)
        return [beam_search(self.assembly_, s, self.beam, self.length_penalty, self.max_decode_len).tokens
                for s in speech]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        speech = check_speech(X, self.n_features_in_)
        self.assembly_.eval()
        with nc.no_grad():
            feats, mask = pad_frames(speech)
            A, amask = self.assembly_.st_encode(feats, mask)
            return mean_pool(A, amask).data.copy()

    def score(self, X, y) -> float:
        ys = check_token_sequences(y, SharedVocab(self.vocab_size), "y", allow_empty=True)
        return corpus_bleu(self.predict(X), ys)
