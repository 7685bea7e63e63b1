"""Input checks shared by the estimator facade."""
from __future__ import annotations

import numpy as np


class NotFittedError(ValueError, AttributeError):
    pass


def check_speech(X, feature_dim: int | None = None, min_frames: int = 1) -> list[np.ndarray]:
    """A list of 2-D float64 ``(frames, features)`` arrays with a common feature width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of (frames, features) arrays, not a single array")
    out = []
    for i, s in enumerate(X):
        a = np.asarray(s, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"X[{i}] must be 2-D, got shape {a.shape}")
        if a.shape[0] < min_frames:
            raise ValueError(f"X[{i}] has {a.shape[0]} frames, need at least {min_frames}")
        if not np.isfinite(a).all():
            raise ValueError(f"X[{i}] contains non-finite values")
        if feature_dim is not None and a.shape[1] != feature_dim:
            raise ValueError(f"X[{i}] has {a.shape[1]} features, expected {feature_dim}")
        feature_dim = a.shape[1]
        out.append(a)
    if not out:
        raise ValueError("X is empty")
    return out


def check_token_sequences(seqs, vocab, name: str = "y", allow_empty: bool = False) -> list[tuple]:
    """Token sequences restricted to the vocabulary's sentence ids."""
    allowed = set(vocab.words)
    out = []
    for i, seq in enumerate(seqs):
        if isinstance(seq, str):
            seq = seq.split()
        toks = tuple(int(v) for v in seq)
        if not toks and not allow_empty:
            raise ValueError(f"{name}[{i}] is empty")
        bad = [v for v in toks if v not in allowed]
        if bad:
            raise ValueError(f"{name}[{i}] contains ids outside the sentence vocabulary: {bad}")
        out.append(toks)
    return out


def check_consistent_length(*arrays) -> int:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
    return lengths.pop()


def check_is_fitted(estimator, attribute: str = "assembly_"):
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
