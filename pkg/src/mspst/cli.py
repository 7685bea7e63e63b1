"""Command-line entry point: ``mspst <subcommand> [--config PATH] [--set key=value ...]``.

Exit status: 0 on success, 2 on usage or configuration errors, 1 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from .data import TranslationTask, gen_corpus, load_corpus, save_corpus
from .pipeline import (CheckpointError, ConfigError, MetricsLog, PipelineConfig, average_checkpoints,
                       build_assembly, load_checkpoint, load_config, run_asr_step, run_mt_step,
                       run_pipeline, run_st_step, save_checkpoint)

log = logging.getLogger("mspst")


def _config(args) -> PipelineConfig:
    overrides = list(args.set or [])
    for flag, key in (("no_cl", "use_cl"), ("no_kd", "use_kd"), ("no_sidae", "use_sidae"),
                      ("no_pretrain", "pretrain")):
        if getattr(args, flag, False):
            overrides.append(f"{key}=false")
    if args.config:
        return load_config(args.config, overrides)
    return PipelineConfig().with_overrides(overrides)


def _corpus(args, config):
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    return gen_corpus(config.task_spec, config.data_seed)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_gen_data(args):
    config = _config(args)
    path = save_corpus(gen_corpus(config.task_spec, config.data_seed), os.path.join(args.out, "corpus"))
    print(path)


def _train(args, phase):
    config = _config(args)
    corpus = _corpus(args, config)
    metrics = MetricsLog()
    init = load_checkpoint(args.init) if args.init else None
    if phase == "MT":
        ckpt = run_mt_step(config, corpus, metrics, init)
    elif phase == "ASR":
        if init is None:
            raise CheckpointError("train-asr needs --init with an MT checkpoint")
        ckpt = run_asr_step(config, corpus, init, metrics)
    else:
        ckpt = run_st_step(config, corpus, init, metrics)
    save_checkpoint(ckpt, _out(args, f"{phase.lower()}.ckpt"))
    metrics.write(_out(args, f"metrics_{phase.lower()}.csv"))


def cmd_pipeline(args):
    config = _config(args)
    run_pipeline(config, _corpus(args, config), args.out)


def _quads(args, config):
    corpus = _corpus(args, config)
    return getattr(corpus, args.split)


def cmd_decode(args):
    from .decoding import beam_search
    config = _config(args)
    assembly = build_assembly(config, load_checkpoint(args.ckpt))
    lines = []
    for q in _quads(args, config):
        res = beam_search(assembly, q.s, config.beam, config.length_penalty, config.max_decode_len)
        lines.append(" ".join(str(v) for v in res.tokens))
    with open(_out(args, "hyp.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(_out(args, "ref.txt"), "w") as fh:
        fh.write("\n".join(" ".join(str(v) for v in q.y) for q in _quads(args, config)) + "\n")


def cmd_evaluate(args):
    from .metrics import corpus_bleu
    with open(args.hyp) as fh:
        hyps = fh.read().splitlines()
    with open(args.ref) as fh:
        refs = fh.read().splitlines()
    line = f"BLEU={corpus_bleu(hyps, refs):.4f}"
    print(line)
    if args.out:
        with open(_out(args, "bleu.txt"), "w") as fh:
            fh.write(line + "\n")


def cmd_analyze(args):
    from .analysis import analyze
    config = _config(args)
    assembly = build_assembly(config, load_checkpoint(args.ckpt))
    _, rows = analyze(assembly, _quads(args, config), TranslationTask(config.task_spec),
                      args.split_threshold, config.beam, config.length_penalty, config.max_decode_len)
    with open(_out(args, "analysis.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("probe", "metric", "value"))
        for probe, metric, value in rows:
            w.writerow((probe, metric, value if isinstance(value, str) else repr(float(value))))


def cmd_average(args):
    save_checkpoint(average_checkpoints(args.ckpts), args.output)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspst", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--out", default="out", help="output directory")
        if corpus:
            sp.add_argument("--corpus", help="corpus manifest (default: regenerate from config)")
        return sp

    common(sub.add_parser("gen-data", help="write the synthetic corpus"), corpus=False).set_defaults(fn=cmd_gen_data)
    for name, phase in (("train-mt", "MT"), ("train-asr", "ASR"), ("train-st", "ST")):
        sp = common(sub.add_parser(name, help=f"run the {phase} step"))
        sp.add_argument("--init", help="checkpoint from the previous step")
        sp.set_defaults(fn=lambda a, ph=phase: _train(a, ph))
    sp = common(sub.add_parser("pipeline", help="MT -> ASR -> ST"))
    for flag in ("--no-cl", "--no-kd", "--no-sidae", "--no-pretrain"):
        sp.add_argument(flag, action="store_true")
    sp.set_defaults(fn=cmd_pipeline)
    for name, fn in (("decode", cmd_decode), ("analyze", cmd_analyze)):
        sp = common(sub.add_parser(name))
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--split", choices=("dev", "test"), default="dev")
        if name == "analyze":
            sp.add_argument("--split-threshold", type=float, default=0.3)
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("evaluate", help="corpus BLEU of hypothesis vs reference files")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--config")
    sp.add_argument("--set", action="append")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_evaluate)
    sp = sub.add_parser("average-ckpt", help="average checkpoints elementwise")
    sp.add_argument("ckpts", nargs="+")
    sp.add_argument("--output", required=True)
    sp.add_argument("--config")
    sp.add_argument("--set", action="append")
    sp.set_defaults(fn=cmd_average)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
