"""Command-line pipeline: pretrain, metatrain, eval, analyze.

Configuration comes from an optional `key = value` file overridden by
flags; all randomness flows from a single --seed. Logs go to stderr
(level from MEGAN_LOG_LEVEL), data goes to files only. Exit codes: 0
success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import analysis, evaluation
from .data import (
    DatasetError,
    load_jsonl,
    synth_pretrain_corpus,
    synth_task_suite,
    corpus_from_text,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .templates import TemplateTable, default_templates
from .training import TrainConfig, meta_train, pretrain_base

log = logging.getLogger("megan.cli")

_MODEL_KEYS = set(ModelConfig().to_dict())
_TRAIN_KEYS = set(TrainConfig().to_dict())


def _setup_logging() -> None:
    level_name = os.environ.get("MEGAN_LOG_LEVEL", "info").lower()
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level_name, logging.INFO
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_value(raw: str):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def read_config_file(path) -> dict:
    """Plain `key = value` lines; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DatasetError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            out[key.strip()] = _parse_value(value)
    return out


def _resolve_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise DatasetError(f"unknown config keys: {', '.join(sorted(unknown))}")

    model_kwargs = {k: v for k, v in file_cfg.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    # flags override the file
    if getattr(args, "seed", None) is not None:
        train_kwargs["seed"] = args.seed
    if getattr(args, "reg_weight", None) is not None:
        train_kwargs["reg_weight"] = args.reg_weight
    if getattr(args, "no_prompt", False):
        model_kwargs["disable_prompt_template"] = True
    if getattr(args, "no_layer_emb", False):
        model_kwargs["disable_layer_embedding"] = True
    mcfg = ModelConfig(**model_kwargs)
    tcfg = TrainConfig(**train_kwargs)
    resolved = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    return mcfg, tcfg, resolved


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_log(path, resolved: dict, input_hashes: dict, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"run_config": resolved, "input_hashes": input_hashes}) + "\n")
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def _load_templates(args) -> TemplateTable:
    if getattr(args, "templates", None):
        return TemplateTable.from_json(args.templates)
    return default_templates()


def _load_samples(args, parser) -> list:
    if args.data:
        return load_jsonl(args.data)
    split = synth_task_suite(args.synth_seed)
    return [s for task in split.meta_eval + split.targets for s in task.samples]


# -- commands -------------------------------------------------------------------------


def cmd_pretrain(args, parser) -> int:
    mcfg, tcfg, resolved = _resolve_configs(args)
    templates = _load_templates(args)
    hashes = {}
    if args.corpus:
        with open(args.corpus, "rb") as fh:
            corpus = corpus_from_text(fh.read(), window=mcfg.max_context - 2)
        hashes["corpus"] = _file_hash(args.corpus)
    else:
        corpus = synth_pretrain_corpus(args.synth_seed, templates)
    log.info("pretraining on %d sequences", len(corpus))

    def progress(step, total, value):
        if step % 50 == 0 or step == total - 1:
            log.info("pretrain step %d/%d ce=%.4f", step, total, value)

    base, logbook = pretrain_base(corpus, mcfg, tcfg, progress=progress)
    save_checkpoint(base, None, mcfg, args.out)
    _write_log(args.out + ".log.jsonl", resolved, hashes, logbook)
    log.info("checkpoint written to %s", args.out)
    return 0


_ARCHITECTURE_KEYS = ("n_layers", "hidden_size", "intermediate_size", "n_heads", "vocab_size", "max_context")


def cmd_metatrain(args, parser) -> int:
    base, _, ckpt_cfg = load_checkpoint(args.base)
    file_cfg = read_config_file(args.config) if args.config else {}
    unknown = set(file_cfg) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in _ARCHITECTURE_KEYS:
        if key in file_cfg and file_cfg[key] != getattr(ckpt_cfg, key):
            parser.error(
                f"config {key}={file_cfg[key]} conflicts with base checkpoint ({key}={getattr(ckpt_cfg, key)})"
            )

    model_kwargs = ckpt_cfg.to_dict()
    model_kwargs.update({k: v for k, v in file_cfg.items() if k in _MODEL_KEYS})
    if args.no_prompt:
        model_kwargs["disable_prompt_template"] = True
    if args.no_layer_emb:
        model_kwargs["disable_layer_embedding"] = True
    train_kwargs = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.reg_weight is not None:
        train_kwargs["reg_weight"] = args.reg_weight
    mcfg = ModelConfig.from_dict(model_kwargs)
    tcfg = TrainConfig.from_dict(train_kwargs)
    resolved = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    templates = _load_templates(args)
    hashes = {"base": _file_hash(args.base)}

    if args.data:
        samples = load_jsonl(args.data)
        from .data import Task, TaskSplit

        split = TaskSplit(meta_train=[Task("data", samples)], meta_eval=[], targets=[])
        hashes["data"] = _file_hash(args.data)
    else:
        split = synth_task_suite(args.synth_seed)
    log.info("meta-training on %d samples", len(split.train_samples()))

    def progress(step, total, entry):
        if step % 50 == 0 or step == total - 1:
            log.info(
                "metatrain step %d/%d ce=%.4f reg=%.4f lr=%.2e",
                step, total, entry["ce"], entry["reg"], entry["lr"],
            )

    hyper, logbook = meta_train(
        base, split, tcfg, mcfg, templates=templates, checkpoint_path=args.out + ".diverged", progress=progress
    )
    save_checkpoint(base, hyper, mcfg, args.out)
    _write_log(args.out + ".log.jsonl", resolved, hashes, logbook)
    log.info("checkpoint written to %s", args.out)
    return 0


def cmd_eval(args, parser) -> int:
    base, hyper, mcfg = load_checkpoint(args.checkpoint)
    templates = _load_templates(args)
    samples = _load_samples(args, parser)
    log.info("evaluating %d samples", len(samples))
    pairs = evaluation.evaluate_samples(samples, base, hyper, mcfg, templates, max_new=args.max_new)
    report = evaluation.build_report(pairs)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("report written to %s", args.report)
    for z, scores in report["per_condition"].items():
        log.info("condition %-12s acc=%.3f rouge_l=%.3f", z, scores["accuracy"], scores["rouge_l"])
    return 0


def cmd_analyze(args, parser) -> int:
    base, hyper, mcfg = load_checkpoint(args.checkpoint)
    if hyper is None:
        parser.error("checkpoint has no hypernetwork section; analyze needs a meta-trained model")
    templates = _load_templates(args)
    samples = _load_samples(args, parser)
    profiles = analysis.extract_betas(base, hyper, mcfg, templates, samples)
    means, stds = analysis.layer_means(profiles)
    print("layer  mean_beta     std_beta")
    for i, (m, s) in enumerate(zip(means, stds), start=1):
        print(f"{i:5d}  {m:+.6f}    {s:.6f}")
    classes = sorted({p.z for p in profiles})
    if len(classes) >= 2 and all(sum(p.z == c for p in profiles) >= 2 for c in classes):
        sep = analysis.condition_separability(profiles)
        print(f"condition separability: {sep:.3f} (chance {1.0 / len(classes):.3f}, {len(classes)} classes)")
    analysis.export_csv(profiles, args.csv, full=args.full)
    log.info("profiles written to %s", args.csv)
    return 0


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="megan", description="meta-gated transformer pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data: bool):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--templates", help="JSON template table (default: built-in)")
        p.add_argument("--seed", type=int, help="seed for all randomness")
        if needs_data:
            p.add_argument("--data", help="JSONL dataset of x/y/z/condition_type rows")
            p.add_argument("--synth-seed", type=int, help="generate the synthetic task suite instead")

    p = sub.add_parser("pretrain", help="stage 1: train base weights on a corpus")
    common(p, needs_data=False)
    p.add_argument("--corpus", help="plain-text corpus file")
    p.add_argument("--synth-seed", type=int, help="build the synthetic pretraining corpus instead")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("metatrain", help="stage 2: train the hypernetwork against a frozen base")
    common(p, needs_data=True)
    p.add_argument("--base", required=True, help="pretrained base checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--reg-weight", type=float, help="gate regularization weight (default 0.001)")
    p.add_argument("--no-prompt", action="store_true", help="embed raw conditions without templates")
    p.add_argument("--no-layer-emb", action="store_true", help="drop the layer embedding")
    p.set_defaults(fn=cmd_metatrain)

    p = sub.add_parser("eval", help="greedy generation plus the metrics report")
    common(p, needs_data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="gate profile statistics and CSV export")
    common(p, needs_data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--full", action="store_true", help="export every channel, not channel means")
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "pretrain" and not (args.corpus or args.synth_seed is not None):
        parser.error("one of --corpus or --synth-seed is required")
    if args.command in ("metatrain", "eval", "analyze") and not (args.data or args.synth_seed is not None):
        parser.error("one of --data or --synth-seed is required")

    try:
        return args.fn(args, parser)
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
