"""Training objectives: CTC, the pooled-cosine contrastive loss and its
self-decoded variant, the interpolated ASR objective, the blank-noise
denoising MT objective and label-smoothed cross-entropy."""
from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numcore as nc
from .data import blank_perturb, decoder_io, pad_tokens
from .numcore import Tensor, logsumexp

log = logging.getLogger(__name__)

COS_FLOOR = 1e-12


class CTCInfeasibleError(ValueError):
    """The target cannot be emitted in the available number of frames."""


# -- CTC -----------------------------------------------------------------------
def ctc_min_frames(target) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """``out[s] = v[s - k]`` for k > 0, ``v[s + |k|]`` for k < 0, padded with -inf."""
    out = np.full_like(v, -np.inf)
    if k > 0:
        out[k:] = v[:-k]
    else:
        out[:k] = v[-k:]
    return out


def _ctc_alpha_beta(lp: np.ndarray, target, blank: int):
    T = lp.shape[0]
    ext = [blank]
    for tok in target:
        ext += [tok, blank]
    S = len(ext)
    ext = np.array(ext)
    skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    emit = lp[:, ext]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = _shift(prev, 1)
        a2 = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = _shift(skip.astype(np.float64), -2) == 1.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = _shift(nxt, -1)
        b2 = np.where(skip_next, _shift(nxt, -2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]
    return ext, alpha, beta


def _ctc_single(lp: np.ndarray, target, blank: int):
    """Negative log-likelihood and its gradient w.r.t. ``lp`` (T x V)."""
    T, V = lp.shape
    target = [int(v) for v in target]
    if blank in target:
        raise ValueError("CTC target must not contain the blank symbol")
    if T < ctc_min_frames(target):
        raise CTCInfeasibleError(f"{T} frames cannot emit a target needing {ctc_min_frames(target)}")
    ext, alpha, beta = _ctc_alpha_beta(lp, target, blank)
    S = len(ext)
    log_z = logsumexp(alpha[T - 1, S - 2:])
    # occupancy: alpha and beta both include the emission at t
    occ = alpha + beta - lp[:, ext]
    grad = np.zeros((T, V))
    for k in np.unique(ext):
        cols = occ[:, ext == k]
        grad[:, k] = -np.exp(np.logaddexp.reduce(cols, axis=1) - log_z)
    return -log_z, grad


def ctc_loss(log_probs, target, blank: int = 1) -> Tensor:
    """CTC negative log-likelihood of ``target`` under per-frame ``log_probs`` (T x V)."""
    log_probs = nc.as_tensor(log_probs)
    nll, grad = _ctc_single(log_probs.data, target, blank)
    return nc._make(np.array(nll), (log_probs,), lambda g: (g * grad,))


def ctc_loss_batch(log_probs, frame_mask, targets, blank: int = 1, skip_infeasible: bool = True):
    """Mean CTC loss over a padded batch ``(B, T, V)``; returns ``(loss, n_used)``."""
    log_probs = nc.as_tensor(log_probs)
    lens = frame_mask.sum(axis=1)
    total, grad, used = 0.0, np.zeros(log_probs.shape), 0
    for i, target in enumerate(targets):
        T = int(lens[i])
        try:
            nll, g = _ctc_single(log_probs.data[i, :T], target, blank)
        except CTCInfeasibleError as err:
            if not skip_infeasible:
                raise
            log.warning("skipping CTC sample %d: %s", i, err)
            continue
        total += nll
        grad[i, :T] = g
        used += 1
    if used == 0:
        return nc.Tensor(0.0), 0
    return nc._make(np.array(total / used), (log_probs,), lambda g: (g * grad / used,)), used


def collapse(path, blank: int = 1) -> tuple:
    out, prev = [], None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(int(tok))
        prev = tok
    return tuple(out)


@functools.lru_cache(maxsize=64)
def _paths_by_label(T: int, V: int, blank: int) -> dict:
    groups: dict = {}
    for path in itertools.product(range(V), repeat=T):
        groups.setdefault(collapse(path, blank), []).append(path)
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def ctc_brute_force(log_probs, target, blank: int = 1, max_paths: int = 2_000_000) -> float:
    """Enumerate every frame labelling; ``inf`` when no path collapses to ``target``."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, V = lp.shape
    if V ** T > max_paths:
        raise ValueError(f"{V}^{T} paths exceed the enumeration limit {max_paths}")
    paths = _paths_by_label(T, V, blank).get(tuple(int(v) for v in target))
    if paths is None:
        return math.inf
    return -logsumexp(lp[np.arange(T), paths].sum(axis=1))


# -- contrastive --------------------------------------------------------------------
def mean_pool(x, mask) -> Tensor:
    x = nc.as_tensor(x)
    if mask is None:
        return x.mean(axis=1)
    m = mask.astype(np.float64)
    return (x * m[:, :, None]).sum(axis=1) * (1.0 / m.sum(axis=1))[:, None]


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine between rows of ``a`` (B x D) and ``b`` (B x D)."""
    na = nc.maximum(nc.sqrt((a * a).sum(axis=1, keepdims=True)), COS_FLOOR)
    nb = nc.maximum(nc.sqrt((b * b).sum(axis=1, keepdims=True)), COS_FLOOR)
    return (a / na) @ (b / nb).T


def contrastive_from_similarity(sim, tau: float, include_positive: bool = False,
                                reduction: str = "sum") -> Tensor:
    """``-sum_i log(exp(s_ii/tau) / sum_{j != i} exp(s_ij/tau))`` on a B x B similarity matrix.

    With ``include_positive`` the denominator also holds ``j == i`` (InfoNCE).
    """
    sim = nc.as_tensor(sim)
    B = sim.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = sim * (1.0 / tau)
    diag = np.eye(B, dtype=bool)
    pos = (logits * diag.astype(np.float64)).sum(axis=1)
    denom = logits if include_positive else nc.masked_fill(logits, diag, -np.inf)
    per = nc.logsumexp_t(denom, axis=1) - pos
    return per.sum() if reduction == "sum" else per.mean()


def contrastive_loss(A, A_mask, M, M_mask, tau: float = 0.1, include_positive: bool = False,
                     reduction: str = "sum") -> Tensor:
    """Contrastive loss between mean-pooled speech and text encodings of one batch."""
    return contrastive_from_similarity(cosine_matrix(mean_pool(A, A_mask), mean_pool(M, M_mask)),
                                       tau, include_positive, reduction)


def self_decode(ctc_log_probs, mask) -> list[tuple]:
    """Frame-wise argmax of the CTC head with blanks kept (no collapse)."""
    lp = ctc_log_probs.data if isinstance(ctc_log_probs, Tensor) else np.asarray(ctc_log_probs)
    best = lp.argmax(axis=-1)
    return [tuple(int(v) for v in best[i, : int(mask[i].sum())]) for i in range(best.shape[0])]


def kd_contrastive_loss(A, A_mask, ctc_log_probs, assembly, tau: float = 0.1,
                        include_positive: bool = False, reduction: str = "sum") -> Tensor:
    """Contrastive loss against text encodings of the model's own blank-keeping decode.

    The decode is data: no gradient flows through the argmax, and the text
    encoder runs without recording.
    """
    decoded = self_decode(ctc_log_probs, A_mask)
    ids, mask = pad_tokens(decoded, assembly.vocab.pad_id)
    with nc.no_grad():
        M = assembly.text_encoder_forward(ids, mask)
    return contrastive_loss(A, A_mask, M.detach(), mask, tau, include_positive, reduction)


# -- ASR objective ---------------------------------------------------------------------
@dataclass(frozen=True)
class BetaSchedule:
    initial: float = 1.0
    decrement: float = 0.1
    interval_steps: int = 5000
    floor: float = 0.0


def beta_at(step: int, schedule: BetaSchedule = BetaSchedule()) -> float:
    """``max(floor, initial - decrement * (step // interval))``, exact on decimal inputs."""
    if step < 0:
        raise ValueError("step must be non-negative")
    k = step // schedule.interval_steps
    value = Fraction(repr(schedule.initial)) - Fraction(repr(schedule.decrement)) * k
    return max(float(schedule.floor), float(value))


@dataclass
class LossBreakdown:
    ctc: float
    cl: float
    cl_kd: float
    total: float
    tau: float
    alpha: float
    beta: float
    tensor: Tensor | None = None


def asr_loss(feats, frame_mask, transcripts, assembly, tau: float = 0.1, alpha: float = 0.3,
             schedule: BetaSchedule = BetaSchedule(), step: int = 0, use_cl: bool = True,
             use_kd: bool = True, include_positive: bool = False) -> LossBreakdown:
    """``ctc + alpha * (beta * cl + (1 - beta) * cl_kd)`` on one batch of ``(s, t)``.

    Both contrastive terms are averaged over the batch so they sit on the
    same per-sample scale as the CTC term.
    """
    if len(transcripts) < 2:
        raise ValueError("ASR loss needs a batch of at least 2")
    beta = beta_at(step, schedule)
    out = assembly.st_encode_full(feats, frame_mask)
    A, mask = out["A"], out["mask"]
    ctc, _ = ctc_loss_batch(out["ctc_log_probs"], mask, transcripts, assembly.vocab.blank_id)
    zero = nc.Tensor(0.0)
    cl = cl_kd = zero
    if use_cl and alpha != 0.0 and beta != 0.0:
        ids, tmask = pad_tokens(transcripts, assembly.vocab.pad_id)
        with nc.no_grad():
            M = assembly.text_encoder_forward(ids, tmask)
        cl = contrastive_loss(A, mask, M.detach(), tmask, tau, include_positive, "mean")
    if use_kd and alpha != 0.0 and beta != 1.0:
        cl_kd = kd_contrastive_loss(A, mask, out["ctc_log_probs"], assembly, tau, include_positive, "mean")
    total = ctc + (cl * beta + cl_kd * (1.0 - beta)) * alpha
    return LossBreakdown(ctc.item(), cl.item(), cl_kd.item(), total.item(), tau, alpha, beta, total)


# -- MT / ST objectives ---------------------------------------------------------------------
def token_nll(logits, y_out, mask) -> Tensor:
    """Mean negative log-likelihood per target token (teacher forcing)."""
    lp = nc.log_softmax(logits, axis=-1)
    B, L, V = lp.shape
    picked = lp.reshape(B * L, V)[np.arange(B * L), np.asarray(y_out).reshape(-1)]
    m = mask.reshape(-1).astype(np.float64)
    return (picked * m).sum() * (-1.0 / m.sum())


def mt_nll(x_lists, ys, assembly) -> Tensor:
    ids, mask = pad_tokens(x_lists, assembly.vocab.pad_id)
    M = assembly.text_encoder_forward(ids, mask)
    y_in, y_out, ymask = decoder_io(ys, assembly.vocab)
    return token_nll(assembly.decoder_forward(M, mask, y_in, ymask), y_out, ymask)


def mt_denoising_loss(x_lists, ys, assembly, r: float = 0.3, rng: np.random.Generator | None = None,
                      denoise: bool = True):
    """Returns ``(clean_nll, noisy_nll, total)``; ``total = clean + noisy``.

    ``noisy`` decodes the same targets from blank-perturbed sources. With
    ``denoise=False`` the noisy term is skipped and ``total == clean``.
    """
    for x in x_lists:
        if assembly.vocab.blank_id in x:
            raise ValueError("source sentences must not contain blanks")
    clean = mt_nll(x_lists, ys, assembly)
    if not denoise:
        return clean, None, clean
    rng = rng if rng is not None else np.random.default_rng(0)
    noisy_x = [blank_perturb(x, r, rng, assembly.vocab.blank_id) for x in x_lists]
    noisy = mt_nll(noisy_x, ys, assembly)
    return clean, noisy, clean + noisy


def label_smoothed_ce(logits, y_out, mask, epsilon: float = 0.1) -> Tensor:
    """``(1 - eps) * nll + eps * mean_k(-log p_k)``, averaged over unmasked positions."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    lp = nc.log_softmax(logits, axis=-1)
    B, L, V = lp.shape
    flat = lp.reshape(B * L, V)
    picked = flat[np.arange(B * L), np.asarray(y_out).reshape(-1)]
    smooth = flat.mean(axis=1)
    m = mask.reshape(-1).astype(np.float64)
    per = picked * (1.0 - epsilon) + smooth * epsilon
    return (per * m).sum() * (-1.0 / m.sum())


def st_loss(feats, frame_mask, ys, assembly, epsilon: float = 0.1) -> Tensor:
    A, amask = assembly.st_encode(feats, frame_mask)
    y_in, y_out, ymask = decoder_io(ys, assembly.vocab)
    return label_smoothed_ce(assembly.decoder_forward(A, amask, y_in, ymask), y_out, ymask, epsilon)


def ctc_nll_eval(feats, frame_mask, transcripts, assembly) -> float:
    with nc.no_grad():
        out = assembly.st_encode_full(feats, frame_mask)
        loss, used = ctc_loss_batch(out["ctc_log_probs"], out["mask"], transcripts, assembly.vocab.blank_id)
    return loss.item() if used else math.nan
