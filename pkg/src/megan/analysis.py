"""Extraction and statistics of the generated gate profiles.

A profile is the L x C matrix of raw gate values one conditioned forward
pass produces; everything here treats profiles as read-only data.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import ConditionSample
from .evaluation import prompt_tokens
from .hypernet import HypernetParams, encode_condition
from .model import BaseWeights, ModelConfig, forward
from .templates import TemplateTable

__all__ = [
    "BetaProfile",
    "extract_betas",
    "layer_means",
    "condition_separability",
    "export_csv",
]


class BetaProfile:
    """Raw gate matrix (L, C) for one sample plus its condition metadata."""

    def __init__(self, condition_type: str, z: str, betas: np.ndarray, sample_id: str):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 2:
            raise ValueError(f"profile must be 2-D (layers, channels), got {betas.shape}")
        if betas.size and (betas.min() <= -1.0 or betas.max() >= 1.0):
            raise ValueError("raw gate values must lie strictly inside (-1, 1)")
        self.condition_type = condition_type
        self.z = z
        self.betas = betas
        self.sample_id = sample_id

    @property
    def n_layers(self) -> int:
        return self.betas.shape[0]


def extract_betas(
    base: BaseWeights,
    hyper: HypernetParams,
    config: ModelConfig,
    templates: TemplateTable,
    samples: list[ConditionSample],
) -> list[BetaProfile]:
    """One profile per sample from a forward pass over its prompt + x prefix."""
    profiles = []
    for i, sample in enumerate(samples):
        cond = encode_condition(
            sample.z, sample.condition_type, templates, base.tok_emb,
            disable_template=config.disable_prompt_template,
        )
        toks = prompt_tokens(sample, templates, config.disable_prompt_template)
        _, betas = forward(toks, cond, base, hyper, config)
        profiles.append(BetaProfile(sample.condition_type, sample.z, betas, sample_id=f"s{i:05d}"))
    return profiles


def layer_means(profiles: list[BetaProfile]) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer mean and standard deviation over samples and channels."""
    if not profiles:
        raise ValueError("layer_means: no profiles")
    stacked = np.stack([p.betas for p in profiles])  # (N, L, C)
    return stacked.mean(axis=(0, 2)), stacked.std(axis=(0, 2))


def _features(profiles: list[BetaProfile]) -> np.ndarray:
    # per-sample feature: channel-averaged gate value per layer
    return np.stack([p.betas.mean(axis=1) for p in profiles])


def condition_separability(profiles: list[BetaProfile], n_folds: int = 5) -> float:
    """Cross-validated nearest-centroid accuracy over condition labels.

    Features are the per-layer channel means; folds are stratified
    round-robin by class, so the score is deterministic in profile order.
    """
    labels = [p.z for p in profiles]
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("condition_separability: need at least 2 condition classes")
    counts = {c: labels.count(c) for c in classes}
    thin = [c for c, n in counts.items() if n < 2]
    if thin:
        raise ValueError(f"condition_separability: classes with fewer than 2 profiles: {thin}")

    feats = _features(profiles)
    folds = np.zeros(len(profiles), dtype=int)
    for c in classes:
        idx = [i for i, lab in enumerate(labels) if lab == c]
        for j, i in enumerate(idx):
            folds[i] = j % n_folds

    labels_arr = np.array(labels)
    accuracies = []
    for f in range(n_folds):
        test = folds == f
        train = ~test
        if not test.any() or not train.any():
            continue
        centroids = np.stack([feats[train & (labels_arr == c)].mean(axis=0) for c in classes])
        dists = np.linalg.norm(feats[test][:, None, :] - centroids[None, :, :], axis=2)
        predicted = np.array(classes)[dists.argmin(axis=1)]
        accuracies.append(float((predicted == labels_arr[test]).mean()))
    return float(np.mean(accuracies))


def export_csv(profiles: list[BetaProfile], path, full: bool = False) -> None:
    """Write profiles for external embedding tools.

    Default rows are (sample, layer) with the channel-mean gate value;
    `full` emits every (sample, layer, channel) entry instead.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if full:
            writer.writerow(["condition_type", "z", "sample_id", "layer", "channel", "beta"])
            for p in profiles:
                for layer in range(p.betas.shape[0]):
                    for channel in range(p.betas.shape[1]):
                        writer.writerow(
                            [p.condition_type, p.z, p.sample_id, layer + 1, channel,
                             format(p.betas[layer, channel], ".12g")]
                        )
        else:
            writer.writerow(["condition_type", "z", "sample_id", "layer", "channel_mean_beta"])
            for p in profiles:
                means = p.betas.mean(axis=1)
                for layer in range(p.betas.shape[0]):
                    writer.writerow(
                        [p.condition_type, p.z, p.sample_id, layer + 1, format(means[layer], ".12g")]
                    )
