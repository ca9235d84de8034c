"""Conditioned generation over sample sets and the metrics report."""

from __future__ import annotations

import numpy as np
from threadpoolctl import threadpool_limits

from .data import BOS, SEP, ConditionSample, detokenize, tokenize
from .hypernet import HypernetParams, encode_condition
from .metrics import accuracy, bleu2, dist_n, rouge_l
from .model import BaseWeights, ModelConfig, generate
from .templates import TemplateTable

__all__ = ["prompt_tokens", "predict_sample", "evaluate_samples", "build_report"]


def prompt_tokens(sample: ConditionSample, templates: TemplateTable, disable_template: bool = False) -> list[int]:
    """Deterministic eval-time prefix: BOS, first-template prompt, x, SEP."""
    prompt = templates.render(sample.z, sample.condition_type, rng=None, disable_template=disable_template)
    return [BOS] + tokenize(prompt + " ") + tokenize(sample.x) + [SEP]


def predict_sample(
    sample: ConditionSample,
    base: BaseWeights,
    hyper: HypernetParams | None,
    config: ModelConfig,
    templates: TemplateTable,
    max_new: int = 64,
) -> str:
    cond = None
    if hyper is not None:
        cond = encode_condition(
            sample.z, sample.condition_type, templates, base.tok_emb,
            disable_template=config.disable_prompt_template,
        )
    toks = generate(
        prompt_tokens(sample, templates, config.disable_prompt_template),
        cond, base, hyper, config, max_new=max_new,
    )
    return detokenize(toks)


def evaluate_samples(
    samples: list[ConditionSample],
    base: BaseWeights,
    hyper: HypernetParams | None,
    config: ModelConfig,
    templates: TemplateTable,
    max_new: int = 64,
) -> list[tuple[ConditionSample, str]]:
    """Greedy prediction for every sample; returns (sample, prediction) pairs."""
    with threadpool_limits(limits=1):
        return [(s, predict_sample(s, base, hyper, config, templates, max_new=max_new)) for s in samples]


def _scores(pairs: list[tuple[ConditionSample, str]]) -> dict:
    preds = [p for _, p in pairs]
    golds = [s.y for s, _ in pairs]
    return {
        "rouge_l": float(np.mean([rouge_l(p, g) for p, g in zip(preds, golds)])),
        "bleu2": float(np.mean([bleu2(p, g) for p, g in zip(preds, golds)])),
        "dist2": dist_n(preds, 2),
        "accuracy": accuracy(preds, golds),
        "n_samples": len(pairs),
    }


def build_report(pairs: list[tuple[ConditionSample, str]]) -> dict:
    """Aggregate and per-condition metric summary for a prediction set."""
    if not pairs:
        raise ValueError("build_report: no predictions")
    by_condition: dict[str, list] = {}
    for sample, pred in pairs:
        by_condition.setdefault(sample.z, []).append((sample, pred))
    return {
        "aggregate": _scores(pairs),
        "per_condition": {z: _scores(group) for z, group in sorted(by_condition.items())},
    }
