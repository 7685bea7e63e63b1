"""Three-step training (MT, then ASR, then ST), checkpoints and metric logs."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
import struct
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import numcore as nc
from .data import CorpusSplit, SharedVocab, SyntheticTaskSpec, batcher, decoder_io, pad_tokens
from .losses import (BetaSchedule, asr_loss, beta_at, ctc_nll_eval, label_smoothed_ce,
                     mean_pool, cosine_matrix, mt_denoising_loss, mt_nll, token_nll)
from .model import ModelAssembly, ModelConfig, freeze_for_phase, set_requires_grad

log = logging.getLogger(__name__)

FULL_SCALE = {"beta_interval_steps": 5000, "warmup_freeze_steps": 5000}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    data_seed: int = 0
    # synthetic task
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
    # model
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    n_conv: int = 3
    speech_layers: int = 2
    text_layers: int = 2
    decoder_layers: int = 2
    # objectives
    tau: float = 0.1
    alpha: float = 0.3
    r: float = 0.3
    beta_initial: float = 1.0
    beta_decrement: float = 0.1
    beta_interval_steps: int = 20
    warmup_freeze_steps: int = 50
    label_smoothing: float = 0.1
    include_positive: bool = False
    # optimisation
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    batch_size: int = 16
    mt_max_epochs: int = 10
    asr_max_epochs: int = 10
    st_max_epochs: int = 20
    early_stop_patience: int = 5
    min_delta: float = 1e-4
    checkpoint_average_k: int = 5
    # inference
    beam: int = 4
    length_penalty: float = 1.0
    max_decode_len: int = 12
    # ablations
    use_sidae: bool = True
    use_cl: bool = True
    use_kd: bool = True
    pretrain: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("dropout", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.checkpoint_average_k < 1:
            raise ConfigError("checkpoint_average_k must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive negatives)")
        if self.tau <= 0 or self.lr <= 0 or self.r < 0:
            raise ConfigError("tau and lr must be positive, r non-negative")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.model_dim % self.heads or self.model_dim % 2:
            raise ConfigError("model_dim must be even and divisible by heads")
        if self.beta_interval_steps < 1 or self.warmup_freeze_steps < 0:
            raise ConfigError("bad schedule lengths")

    @classmethod
    def full_scale(cls, **overrides) -> "PipelineConfig":
        return cls(**{**FULL_SCALE, **overrides})

    # -- derived views --------------------------------------------------------
    @property
    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.vocab_size, self.min_len, self.max_len, self.kmin, self.kmax,
                                 self.feature_dim, self.noise_sigma, self.punct_prob, self.mapping_seed,
                                 self.n_mt, self.n_asr, self.n_st, self.n_dev, self.n_test)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(SharedVocab(self.vocab_size), self.feature_dim, self.model_dim, self.heads,
                           self.ffn_dim, self.dropout, self.n_conv, self.speech_layers,
                           self.text_layers, self.decoder_layers)

    @property
    def beta_schedule(self) -> BetaSchedule:
        return BetaSchedule(self.beta_initial, self.beta_decrement, self.beta_interval_steps, 0.0)

    # -- key=value text form --------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    def with_overrides(self, pairs) -> "PipelineConfig":
        values = dataclasses.asdict(self)
        values.update(parse_assignments(pairs))
        return PipelineConfig(**values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err


def parse_assignments(pairs) -> dict:
    out = {}
    for item in pairs:
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path, overrides=()) -> PipelineConfig:
    with open(path) as fh:
        values = parse_assignments(fh.read().splitlines())
    values.update(parse_assignments(overrides))
    return PipelineConfig(**values)


# -- metrics log --------------------------------------------------------------------
class MetricsLog:
    header = ("phase", "epoch", "step", "metric", "value")

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, phase, epoch, step, metric, value):
        self.rows.append((phase, int(epoch), int(step), metric, float(value)))

    def values(self, phase=None, metric=None) -> list[float]:
        return [r[4] for r in self.rows if (phase is None or r[0] == phase) and (metric is None or r[3] == metric)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for p, e, s, m, v in self.rows:
            w.writerow((p, e, s, m, repr(v)))
        return buf.getvalue()

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


# -- checkpoints ------------------------------------------------------------------------
MAGIC = b"MSPST"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    phase: str
    step: int
    params: dict
    optimizer: dict = field(default_factory=dict)
    fingerprint: bytes = b"\0" * 32
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)  # in-memory only

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        phase = self.phase.encode()
        out += struct.pack("<IH", self.version, len(phase)) + phase
        out += struct.pack("<Q", self.step)
        fp = self.fingerprint[:32].ljust(32, b"\0")
        out += fp
        for table in (self.params, self.optimizer):
            out += struct.pack("<I", len(table))
            for name, arr in table.items():
                arr = np.asarray(arr, dtype="<f8", order="C")
                nb = name.encode()
                out += struct.pack("<H", len(nb)) + nb
                out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
                out += arr.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            chunk = view[pos: pos + n]
            pos += n
            return chunk

        if bytes(take(len(MAGIC))) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, plen = struct.unpack("<IH", take(6))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        phase = bytes(take(plen)).decode()
        (step,) = struct.unpack("<Q", take(8))
        fp = bytes(take(32))
        tables = []
        for _ in range(2):
            (count,) = struct.unpack("<I", take(4))
            table = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", take(2))
                name = bytes(take(nlen)).decode()
                (rank,) = struct.unpack("<B", take(1))
                shape = struct.unpack(f"<{rank}Q", take(8 * rank))
                n = int(np.prod(shape)) if rank else 1
                table[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
            tables.append(table)
        if pos != len(view):
            raise CheckpointError("trailing bytes after checkpoint")
        return cls(phase, step, tables[0], tables[1], fp, version)


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path, expect_phase: str | None = None, assembly: ModelAssembly | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = Checkpoint.from_bytes(fh.read())
    if expect_phase is not None:
        require_phase(ckpt, expect_phase)
    if assembly is not None:
        check_names(ckpt, assembly)
    return ckpt


_PREVIOUS = {"MT": (None, "INIT"), "ASR": ("MT",), "ST": ("ASR",)}


def require_phase(ckpt: Checkpoint, next_phase: str):
    """Raise unless ``ckpt`` may seed ``next_phase`` (MT -> ASR -> ST)."""
    allowed = _PREVIOUS.get(next_phase)
    if allowed is None:
        raise CheckpointError(f"unknown phase {next_phase!r}")
    if ckpt.phase not in allowed:
        raise CheckpointError(f"a {ckpt.phase} checkpoint cannot start the {next_phase} phase")


def check_names(ckpt: Checkpoint, assembly: ModelAssembly):
    own = {n: p.shape for n, p in assembly.named_parameters()}
    if set(own) != set(ckpt.params):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for n, shape in own.items():
        if ckpt.params[n].shape != shape:
            raise CheckpointError(f"shape mismatch for {n}")


def average_checkpoints(ckpts) -> Checkpoint:
    """Elementwise mean of parameters; optimizer state is dropped."""
    ckpts = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in ckpts]
    if not ckpts:
        raise CheckpointError("need at least one checkpoint")
    names = set(ckpts[0].params)
    for c in ckpts[1:]:
        if set(c.params) != names:
            raise CheckpointError("checkpoints have different parameter names")
        for n in names:
            if c.params[n].shape != ckpts[0].params[n].shape:
                raise CheckpointError(f"shape mismatch for {n}")
    params = {n: sum(c.params[n] for c in ckpts) / len(ckpts) for n in ckpts[0].params}
    last = ckpts[-1]
    return Checkpoint(last.phase, last.step, params, {}, last.fingerprint)


def param_hash(assembly: ModelAssembly, block: str) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(assembly.block_parameters(block).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr.data).tobytes())
    return h.hexdigest()


# -- training -----------------------------------------------------------------------------
_PHASE_CODE = {"MT": 1, "ASR": 2, "ST": 3}


def build_assembly(config: PipelineConfig, ckpt: Checkpoint | None = None) -> ModelAssembly:
    assembly = ModelAssembly(config.model_config, seed=config.seed)
    if ckpt is not None:
        check_names(ckpt, assembly)
        assembly.load_state_dict(ckpt.params)
    return assembly


def _make_checkpoint(phase, step, assembly, config, optimizer=None, exclude=()) -> Checkpoint:
    opt = {}
    if optimizer is not None:
        opt = {k: v.copy() for k, v in optimizer.state_arrays().items()
               if not any(f".{b}." in k or k.endswith(f".{b}") for b in exclude)}
    return Checkpoint(phase, step, assembly.state_dict(), opt, config.fingerprint())


def _train_phase(phase, assembly, config, pairs, loss_fn, dev_fn, max_epochs, metrics,
                 step_hook=None, keep_last=1):
    """Generic loop: frozen-aware Adam, per-epoch dev evaluation and patience stopping.

    Returns ``(best_state, last_states, optimizer, step)``.
    """
    mask0 = freeze_for_phase(assembly, phase, 0, config.warmup_freeze_steps)
    opt_params = {n: p for n, p in assembly.named_parameters() if n in set(mask0.optimizer_names(assembly))}
    opt = nc.Adam(opt_params, config.lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    step, best, bad = 0, math.inf, 0
    best_state = assembly.state_dict()
    recent = deque(maxlen=keep_last)
    assembly.eval()
    init_dev = dev_fn()
    metrics.add(phase, 0, 0, "dev_loss", init_dev)
    for epoch in range(1, max_epochs + 1):
        totals = []
        for batch in batcher(pairs, config.batch_size, config.seed, epoch, assembly.vocab):
            mask = freeze_for_phase(assembly, phase, step, config.warmup_freeze_steps)
            set_requires_grad(assembly, mask)
            if step_hook is not None:
                step_hook(step, assembly)
            assembly.train(True, np.random.default_rng([config.seed, _PHASE_CODE[phase], step]))
            opt.zero_grad()
            loss = loss_fn(batch, step)
            loss.backward()
            opt.step([n for n in mask.trainable_names(assembly) if n in opt.params])
            totals.append(loss.item())
            step += 1
        assembly.eval()
        for p in assembly.parameters():
            p.requires_grad = True
        dev = dev_fn()
        metrics.add(phase, epoch, step, "train_loss", float(np.mean(totals)))
        metrics.add(phase, epoch, step, "dev_loss", dev)
        recent.append(assembly.state_dict())
        if dev < best - config.min_delta:
            best, bad = dev, 0
            best_state = assembly.state_dict()
        else:
            bad += 1
            if bad >= config.early_stop_patience:
                log.info("%s: early stop after epoch %d", phase, epoch)
                break
    return best_state, list(recent), opt, step


def dev_mt_nll(assembly, pairs, batch_size=64, noisy=None) -> float:
    """Token-level NLL of ``y`` given ``x`` (or ``noisy(x)``) over ``pairs``."""
    total, count = 0.0, 0
    with nc.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i: i + batch_size]
            xs = [noisy(p.x) if noisy else p.x for p in chunk]
            n = sum(len(p.y) + 1 for p in chunk)
            total += mt_nll(xs, [p.y for p in chunk], assembly).item() * n
            count += n
    return total / count


def dev_st_nll(assembly, pairs, batch_size=64) -> float:
    """Token-level NLL of the translation given speech (no label smoothing)."""
    from .data import pad_frames
    total, count = 0.0, 0
    with nc.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i: i + batch_size]
            feats, mask = pad_frames([p.s for p in chunk])
            A, amask = assembly.st_encode(feats, mask)
            y_in, y_out, ymask = decoder_io([p.y for p in chunk], assembly.vocab)
            n = int(ymask.sum())
            total += token_nll(assembly.decoder_forward(A, amask, y_in, ymask), y_out, ymask).item() * n
            count += n
    return total / count


def dev_ctc(assembly, pairs, batch_size=64) -> float:
    from .data import pad_frames
    vals = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i: i + batch_size]
        feats, mask = pad_frames([p.s for p in chunk])
        vals.append((ctc_nll_eval(feats, mask, [p.t for p in chunk], assembly), len(chunk)))
    return sum(v * n for v, n in vals) / sum(n for _, n in vals)


def dev_alignment_cosine(assembly, pairs, batch_size=64) -> float:
    """Mean cosine between pooled A(s) and pooled M(t) of matching pairs."""
    from .data import pad_frames
    sims = []
    with nc.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i: i + batch_size]
            feats, mask = pad_frames([p.s for p in chunk])
            A, amask = assembly.st_encode(feats, mask)
            ids, tmask = pad_tokens([p.t for p in chunk], assembly.vocab.pad_id)
            M = assembly.text_encoder_forward(ids, tmask)
            sims.extend(np.diag(cosine_matrix(mean_pool(A, amask), mean_pool(M, tmask)).data))
    return float(np.mean(sims))


def run_mt_step(config: PipelineConfig, corpus: CorpusSplit, metrics: MetricsLog | None = None,
                init: Checkpoint | None = None) -> Checkpoint:
    """Step 1: text encoder + decoder on (x, y), optionally with blank-noised sources."""
    if not corpus.mt:
        raise ValueError("corpus has no MT pairs")
    metrics = metrics if metrics is not None else MetricsLog()
    if init is not None:
        require_phase(init, "MT")
    assembly = build_assembly(config, init)
    start = {b: param_hash(assembly, b) for b in ("speech_encoder",)}
    dev_pairs = corpus.dev_pairs("mt")

    def loss_fn(batch, step):
        rng = np.random.default_rng([config.seed, 11, step])
        _, _, total = mt_denoising_loss(batch.source_tokens, [p.y for p in batch.pairs], assembly,
                                        config.r, rng, denoise=config.use_sidae)
        return total

    best, _, _, step = _train_phase("MT", assembly, config, corpus.mt, loss_fn,
                                    lambda: dev_mt_nll(assembly, dev_pairs), config.mt_max_epochs, metrics)
    assembly.load_state_dict(best)
    ckpt = _make_checkpoint("MT", step, assembly, config)
    ckpt.meta["speech_encoder_untouched"] = start["speech_encoder"] == param_hash(assembly, "speech_encoder")
    return ckpt


def run_asr_step(config: PipelineConfig, corpus: CorpusSplit, ckpt_from_mt: Checkpoint,
                 metrics: MetricsLog | None = None) -> Checkpoint:
    """Step 2: speech path on (s, t) with CTC plus contrastive terms against the frozen text encoder."""
    require_phase(ckpt_from_mt, "ASR")
    metrics = metrics if metrics is not None else MetricsLog()
    assembly = build_assembly(config, ckpt_from_mt)
    hashes = {"start": {b: param_hash(assembly, b) for b in ("speech_encoder", "text_encoder")}}
    dev_pairs = corpus.dev_pairs("asr")
    schedule = config.beta_schedule

    def hook(step, model):
        if step == config.warmup_freeze_steps:
            hashes["warmup_end"] = {"speech_encoder": param_hash(model, "speech_encoder")}

    def loss_fn(batch, step):
        feats, mask = batch.speech()
        out = asr_loss(feats, mask, batch.source_tokens, assembly, config.tau, config.alpha, schedule, step,
                       config.use_cl, config.use_kd, config.include_positive)
        metrics.add("ASR", 0, step, "beta", out.beta)
        return out.tensor

    metrics.add("ASR", 0, 0, "dev_alignment_cosine", dev_alignment_cosine(assembly, dev_pairs))
    best, _, _, step = _train_phase("ASR", assembly, config, corpus.asr, loss_fn,
                                    lambda: dev_ctc(assembly, dev_pairs), config.asr_max_epochs, metrics,
                                    step_hook=hook)
    if "warmup_end" not in hashes:
        hashes["warmup_end"] = {"speech_encoder": param_hash(assembly, "speech_encoder")}
    hashes["end_of_training"] = {b: param_hash(assembly, b) for b in ("speech_encoder", "text_encoder")}
    assembly.load_state_dict(best)
    metrics.add("ASR", -1, step, "dev_alignment_cosine", dev_alignment_cosine(assembly, dev_pairs))
    ckpt = _make_checkpoint("ASR", step, assembly, config)
    hashes["end"] = {b: param_hash(assembly, b) for b in ("speech_encoder", "text_encoder")}
    ckpt.meta["hashes"] = hashes
    return ckpt


def run_st_step(config: PipelineConfig, corpus: CorpusSplit, ckpt_from_asr: Checkpoint | None,
                metrics: MetricsLog | None = None) -> Checkpoint:
    """Step 3: fine-tune speech path + decoder on (s, y); text encoder dropped.

    ``ckpt_from_asr=None`` trains from a fresh initialisation (baseline).
    Returns the average of the last ``checkpoint_average_k`` epoch checkpoints.
    """
    if ckpt_from_asr is not None:
        require_phase(ckpt_from_asr, "ST")
    metrics = metrics if metrics is not None else MetricsLog()
    assembly = build_assembly(config, ckpt_from_asr)
    dev_pairs = corpus.dev_pairs("st")

    def loss_fn(batch, step):
        feats, mask = batch.speech()
        A, amask = assembly.st_encode(feats, mask)
        y_in, y_out, ymask = batch.targets()
        return label_smoothed_ce(assembly.decoder_forward(A, amask, y_in, ymask), y_out, ymask,
                                 config.label_smoothing)

    _, recent, opt, step = _train_phase("ST", assembly, config, corpus.st, loss_fn,
                                        lambda: dev_st_nll(assembly, dev_pairs), config.st_max_epochs,
                                        metrics, keep_last=config.checkpoint_average_k)
    last = _make_checkpoint("ST", step, assembly, config, opt, exclude=("text_encoder",))
    snaps = [Checkpoint("ST", step, s, {}, last.fingerprint) for s in recent]
    final = average_checkpoints(snaps)
    final.meta["last"] = last
    assembly.load_state_dict(final.params)
    final.meta["dev_st_nll"] = dev_st_nll(assembly, dev_pairs)
    metrics.add("ST", -1, step, "dev_loss_averaged", final.meta["dev_st_nll"])
    return final


@dataclass
class PipelineResult:
    final: Checkpoint
    metrics: MetricsLog
    checkpoints: dict


def run_pipeline(config: PipelineConfig, corpus: CorpusSplit | None = None, out_dir=None) -> PipelineResult:
    """MT -> ASR -> ST (or ST alone when ``pretrain`` is off); optionally writes artifacts."""
    corpus = corpus if corpus is not None else _corpus_for(config)
    metrics = MetricsLog()
    ckpts = {}
    seed_ckpt = None
    if config.pretrain:
        ckpts["MT"] = run_mt_step(config, corpus, metrics)
        ckpts["ASR"] = run_asr_step(config, corpus, ckpts["MT"], metrics)
        seed_ckpt = ckpts["ASR"]
    ckpts["ST"] = run_st_step(config, corpus, seed_ckpt, metrics)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics.write(os.path.join(out_dir, "metrics.csv"))
        for phase, ck in ckpts.items():
            save_checkpoint(ck, os.path.join(out_dir, f"{phase.lower()}.ckpt"))
        save_checkpoint(ckpts["ST"], os.path.join(out_dir, "final.ckpt"))
    return PipelineResult(ckpts["ST"], metrics, ckpts)


def _corpus_for(config: PipelineConfig) -> CorpusSplit:
    from .data import gen_corpus
    return gen_corpus(config.task_spec, config.data_seed)


ABLATIONS = ("full", "no_sidae", "no_cl_kd", "scratch")


def run_ablation_grid(config: PipelineConfig, corpus: CorpusSplit | None = None, variants=ABLATIONS) -> dict:
    """Dev ST NLL for the full pipeline and its ablations, sharing phases between variants.

    ``no_sidae`` drops the noisy MT term, ``no_cl_kd`` trains ASR on CTC
    alone, ``scratch`` skips pre-training. Also returns the two MT
    checkpoints and the full ASR checkpoint for the robustness probes.
    """
    corpus = corpus if corpus is not None else _corpus_for(config)
    out = {"dev_st_nll": {}, "checkpoints": {}, "metrics": {}}
    variants = tuple(variants)
    ck = out["checkpoints"]
    need_sidae = any(v in variants for v in ("full", "no_cl_kd"))
    if need_sidae:
        ck["mt_sidae"] = run_mt_step(config, corpus)
    if "no_sidae" in variants:
        ck["mt_plain"] = run_mt_step(dataclasses.replace(config, use_sidae=False), corpus)
    asr_from = {"full": ("mt_sidae", config),
                "no_sidae": ("mt_plain", config),
                "no_cl_kd": ("mt_sidae", dataclasses.replace(config, use_cl=False, use_kd=False))}
    for v in variants:
        m = out["metrics"][v] = MetricsLog()
        if v == "scratch":
            st = run_st_step(dataclasses.replace(config, pretrain=False), corpus, None, m)
        else:
            mt_key, cfg = asr_from[v]
            ck[f"asr_{v}"] = run_asr_step(cfg, corpus, ck[mt_key], m)
            st = run_st_step(cfg, corpus, ck[f"asr_{v}"], m)
        ck[f"st_{v}"] = st
        out["dev_st_nll"][v] = st.meta["dev_st_nll"]
    return out
