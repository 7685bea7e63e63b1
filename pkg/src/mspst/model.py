"""The five-block speech translation model with one tied vocabulary matrix.

``st_encode`` maps speech to A(s): speech encoder, then the alignment adapter
(strided convolutions, Conformer block, CTC head on the shared embedding),
then the textual adapter. ``text_encoder_forward`` gives M(t). The decoder
accepts either memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import SharedVocab, pad_frames, pad_tokens
from .nn import (ConformerBlock, Conv1d, DecoderLayer, DownsampleStack, EncoderLayer,
                 LayerConfig, LayerNorm, Module, MultiHeadAttention, sinusoidal_positions)

BLOCKS = ("shared_embedding", "speech_encoder", "alignment_adapter", "textual_adapter",
          "text_encoder", "decoder")
PHASES = ("MT", "ASR", "ST")


@dataclass
class ModelConfig:
    vocab: SharedVocab = field(default_factory=SharedVocab)
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    n_conv: int = 3
    speech_layers: int = 2
    text_layers: int = 2
    decoder_layers: int = 2

    @property
    def layer(self) -> LayerConfig:
        return LayerConfig(self.model_dim, self.heads, self.ffn_dim, self.dropout)


def _add_positions(x):
    return x + sinusoidal_positions(x.shape[1], x.shape[2])[None]


class SpeechEncoder(Module):
    """Stand-in acoustic model: stride-1 conv front-end and encoder layers."""

    def __init__(self, cfg: ModelConfig, rng):
        self.front = Conv1d(cfg.feature_dim, cfg.model_dim, rng, stride=1)
        self.layers = [EncoderLayer(cfg.layer, rng) for _ in range(cfg.speech_layers)]
        self.norm = LayerNorm(cfg.model_dim)

    def __call__(self, feats, mask):
        if feats.shape[1] == 0:
            raise ValueError("empty speech input")
        x, mask = self.front(nc.as_tensor(feats), mask)
        x = _add_positions(nc.relu(x))
        for layer in self.layers:
            x, _ = layer(x, mask)
        return self.norm(x), mask


class AlignmentAdapter(Module):
    def __init__(self, cfg: ModelConfig, embedding, rng):
        self.downsample = DownsampleStack(cfg.model_dim, cfg.n_conv, rng)
        self.conformer = ConformerBlock(cfg.layer, rng)
        self.embedding = embedding

    def __call__(self, x, mask):
        x, mask = self.downsample(x, mask)
        hidden = self.conformer(_add_positions(x), mask)
        log_probs = nc.log_softmax(hidden @ self.embedding.T, axis=-1)
        return hidden, log_probs, mask


class TextualAdapter(Module):
    """Positions plus one self-attention layer with residual and layer norm."""

    def __init__(self, cfg: ModelConfig, rng):
        self.attn = MultiHeadAttention(cfg.layer, rng)
        self.norm = LayerNorm(cfg.model_dim)
        self.p = cfg.dropout

    def __call__(self, hidden, mask):
        x = _add_positions(hidden)
        a, _ = self.attn(x, x, mask)
        return self.norm(x + self.dropout(a, self.p))


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, embedding, rng):
        self.embedding = embedding
        self.layers = [EncoderLayer(cfg.layer, rng) for _ in range(cfg.text_layers)]
        self.norm = LayerNorm(cfg.model_dim)
        self.scale = math.sqrt(cfg.model_dim)
        self.p = cfg.dropout

    def __call__(self, ids, mask):
        x = self.dropout(_add_positions(nc.take_rows(self.embedding, ids) * self.scale), self.p)
        for layer in self.layers:
            x, _ = layer(x, mask)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, embedding, rng):
        self.embedding = embedding
        self.layers = [DecoderLayer(cfg.layer, rng) for _ in range(cfg.decoder_layers)]
        self.norm = LayerNorm(cfg.model_dim)
        self.scale = math.sqrt(cfg.model_dim)
        self.p = cfg.dropout
        self.cross_weights: list[np.ndarray] = []

    def __call__(self, memory, mem_mask, ids, mask):
        x = self.dropout(_add_positions(nc.take_rows(self.embedding, ids) * self.scale), self.p)
        self.cross_weights = []
        for layer in self.layers:
            x, w = layer(x, mask, memory, mem_mask)
            self.cross_weights.append(w)
        return self.norm(x) @ self.embedding.T


class ModelAssembly(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = cfg.vocab
        d = cfg.model_dim
        # registered first so it is named once, as itself
        self.shared_embedding = nc.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab.size, d)))
        self.speech_encoder = SpeechEncoder(cfg, rng)
        self.alignment_adapter = AlignmentAdapter(cfg, self.shared_embedding, rng)
        self.textual_adapter = TextualAdapter(cfg, rng)
        self.text_encoder = TextEncoder(cfg, self.shared_embedding, rng)
        self.decoder = Decoder(cfg, self.shared_embedding, rng)

    # -- forward paths ---------------------------------------------------------
    def speech_encoder_forward(self, feats, mask):
        return self.speech_encoder(feats, mask)

    def alignment_adapter_forward(self, frames, mask):
        """Returns ``(hidden, ctc_log_probs, mask)`` at roughly 1/2^n the frame rate."""
        return self.alignment_adapter(frames, mask)

    def textual_adapter_forward(self, hidden, mask):
        return self.textual_adapter(hidden, mask)

    def st_encode_full(self, feats, mask) -> dict:
        frames, mask = self.speech_encoder(feats, mask)
        hidden, log_probs, mask = self.alignment_adapter(frames, mask)
        return {"hidden": hidden, "ctc_log_probs": log_probs, "mask": mask,
                "A": self.textual_adapter(hidden, mask)}

    def st_encode(self, feats, mask):
        """A(s) and its validity mask."""
        out = self.st_encode_full(feats, mask)
        return out["A"], out["mask"]

    def text_encoder_forward(self, ids, mask):
        """M(t); blank ids are ordinary inputs here."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise ValueError("token id outside the vocabulary")
        return self.text_encoder(ids, mask)

    def decoder_forward(self, memory, mem_mask, y_prefix, y_mask=None):
        y_prefix = np.asarray(y_prefix)
        if y_prefix.shape[1] == 0:
            raise ValueError("decoder needs a non-empty prefix")
        if y_mask is None:
            y_mask = np.ones(y_prefix.shape, dtype=bool)
        return self.decoder(memory, mem_mask, y_prefix, y_mask)

    # -- list-of-sequence conveniences --------------------------------------------
    def encode_speech(self, speech_list):
        feats, mask = pad_frames(speech_list)
        return self.st_encode(feats, mask)

    def encode_text(self, token_lists):
        ids, mask = pad_tokens(token_lists, self.vocab.pad_id)
        return self.text_encoder_forward(ids, mask), mask

    # -- parameter handling -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise KeyError(f"parameter name mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {np.shape(arr)}")
            own[name].data[...] = arr

    def block_parameters(self, block: str) -> dict:
        return {n: p for n, p in self.named_parameters() if block_of(n) == block}


def block_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


@dataclass(frozen=True)
class FreezeMask:
    """Which blocks the optimizer may update; ``excluded`` blocks are left out of the phase entirely."""

    trainable: dict
    excluded: tuple = ()

    def is_trainable(self, block: str) -> bool:
        return bool(self.trainable.get(block, False))

    def trainable_names(self, assembly: ModelAssembly) -> list[str]:
        return [n for n, _ in assembly.named_parameters() if self.is_trainable(block_of(n))]

    def optimizer_names(self, assembly: ModelAssembly) -> list[str]:
        return [n for n, _ in assembly.named_parameters() if block_of(n) not in self.excluded]


def freeze_for_phase(assembly: ModelAssembly | None, phase: str, step: int,
                     warmup_freeze_steps: int = 50) -> FreezeMask:
    if step < 0:
        raise ValueError("step must be non-negative")
    if phase == "MT":
        on = {"text_encoder", "decoder", "shared_embedding"}
        excluded = ("speech_encoder", "alignment_adapter", "textual_adapter")
    elif phase == "ASR":
        on = {"alignment_adapter", "textual_adapter"}
        if step >= warmup_freeze_steps:
            on.add("speech_encoder")
        excluded = ("text_encoder", "decoder", "shared_embedding")
    elif phase == "ST":
        on = {"speech_encoder", "alignment_adapter", "textual_adapter", "decoder", "shared_embedding"}
        excluded = ("text_encoder",)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return FreezeMask({b: b in on for b in BLOCKS}, excluded)


def set_requires_grad(assembly: ModelAssembly, mask: FreezeMask):
    """Stop recording gradients for frozen blocks so backward skips them."""
    for name, p in assembly.named_parameters():
        p.requires_grad = mask.is_trainable(block_of(name))
