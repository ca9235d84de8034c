"""Two-stage pipeline: base pretraining, then meta-training of the hypernetwork.

Stage one trains every base weight as an ordinary next-token model with
all gate slopes at their neutral value. Stage two freezes the base and
trains only the hypernetwork on (x, y, z) batches with the masked
cross-entropy plus a weighted RMS pull of the raw gates toward zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .data import PAD, TaskSplit, TokenBatch, build_batch
from .hypernet import HypernetParams, init_params
from .model import BaseWeights, ModelConfig, forward_batch, init_base, save_checkpoint
from .numerics import Tensor, backward, masked_cross_entropy
from .templates import TemplateTable, default_templates

log = logging.getLogger("megan.training")

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "AdamW",
    "cosine_lr",
    "clip_grad_norm",
    "ce_loss",
    "reg_loss",
    "total_loss",
    "shift_targets",
    "pretrain_base",
    "meta_train",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 3
    batch_size: int = 32
    reg_weight: float = 0.001
    warmup_frac: float = 0.03
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class AdamW(object):
    """AdamW with decoupled weight decay over a named tensor dict."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + eps)
            p.data -= lr * (update + self.cfg.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to its min fraction."""
    warmup = max(1, int(round(cfg.warmup_frac * total_steps)))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    floor = cfg.min_lr_frac * cfg.learning_rate
    return floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- losses ---------------------------------------------------------------------


def ce_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    Accepts (N, V) logits with flat targets/mask, or (B, T, V) with
    matching (B, T) arrays.
    """
    if logits.ndim == 3:
        b, t, v = logits.shape
        logits = logits.reshape(b * t, v)
        targets = np.asarray(targets).reshape(-1)
        mask = np.asarray(mask).reshape(-1)
    return masked_cross_entropy(logits, targets, mask)


def reg_loss(betas) -> Tensor:
    """Root-mean-square of all raw gate entries; zero iff every gate is zero."""
    if isinstance(betas, Tensor):
        betas = [betas]
    elif isinstance(betas, np.ndarray):
        betas = [Tensor(betas)]
    total = None
    count = 0
    for b in betas:
        sq = (b * b).sum()
        total = sq if total is None else total + sq
        count += b.size
    if total is None or count == 0:
        raise ValueError("reg_loss: no gate entries")
    return (total * (1.0 / count)).sqrt()


def total_loss(ce, reg, f: float):
    """ce + f * reg."""
    return ce + f * reg


def shift_targets(token_ids: np.ndarray, loss_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and the mask aligned to logit positions."""
    targets = np.full_like(token_ids, PAD)
    targets[:, :-1] = token_ids[:, 1:]
    mask = np.zeros_like(loss_mask)
    mask[:, :-1] = loss_mask[:, 1:]
    return targets, mask


# -- stage 1: base pretraining ---------------------------------------------------------


def _bucketed_batches(lengths, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Batch indices of similar length together to keep padding small.

    Ties are broken randomly and batch order is shuffled, so epochs stay
    stochastic.
    """
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


def _line_batches(lines: list[list[int]], batch_size: int, rng: np.random.Generator):
    for idx in _bucketed_batches([len(l) for l in lines], batch_size, rng):
        chunk = [lines[j] for j in idx]
        width = max(len(r) for r in chunk)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for b, row in enumerate(chunk):
            ids[b, : len(row)] = row
        yield ids


def pretrain_base(
    corpus: list[list[int]],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    progress=None,
) -> tuple[BaseWeights, list[dict]]:
    """Next-token training of all base weights with neutral gates.

    Aborts if the loss sits above ten times its initial value for 100
    consecutive steps. Deterministic for a fixed TrainConfig seed.
    """
    if not corpus:
        raise ValueError("pretrain_base: empty corpus")
    rng = np.random.default_rng(tcfg.seed)
    base = init_base(mcfg, rng)
    opt = AdamW(base.named_tensors(), tcfg)
    steps_per_epoch = math.ceil(len(corpus) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch

    logbook: list[dict] = []
    step = 0
    initial_loss = None
    bad_streak = 0
    # single-threaded BLAS: these matrices are too small for threading to pay off
    with threadpool_limits(limits=1):
        for _ in range(tcfg.epochs):
            for ids in _line_batches(corpus, tcfg.batch_size, rng):
                loss_mask = ids != PAD
                loss_mask[:, 0] = False  # BOS is given, not predicted
                targets, mask = shift_targets(ids, loss_mask)
                logits, _ = forward_batch(_plain_batch(ids), base, mcfg, hyper=None)
                loss = ce_loss(logits, targets, mask)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite pretraining loss at step {step}")
                if initial_loss is None:
                    initial_loss = value
                bad_streak = bad_streak + 1 if value > 10.0 * initial_loss else 0
                if bad_streak >= 100:
                    raise TrainingDiverged(
                        f"loss {value:.3f} above 10x initial {initial_loss:.3f} for 100 steps"
                    )
                base.zero_grad()
                backward(loss)
                clip_grad_norm(base.named_tensors(), tcfg.grad_clip)
                lr = cosine_lr(step, total_steps, tcfg)
                opt.step(lr)
                logbook.append({"step": step, "ce": value, "lr": lr})
                if progress is not None:
                    progress(step, total_steps, value)
                step += 1
    base.set_requires_grad(True)
    return base, logbook


def _plain_batch(ids: np.ndarray) -> TokenBatch:
    return TokenBatch(
        token_ids=ids,
        loss_mask=np.zeros_like(ids, dtype=bool),
        cond_ids=np.zeros((ids.shape[0], 1), dtype=np.int64),
        cond_mask=np.ones((ids.shape[0], 1), dtype=bool),
        prefix_lens=np.full(ids.shape[0], ids.shape[1], dtype=np.int64),
    )


# -- stage 2: meta-training -------------------------------------------------------------


def meta_train(
    base: BaseWeights,
    split: TaskSplit,
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    templates: TemplateTable | None = None,
    checkpoint_path=None,
    progress=None,
) -> tuple[HypernetParams, list[dict]]:
    """Train the hypernetwork on (x, y, z) batches with the base frozen.

    Per batch: render the condition prompt, encode, forward, masked CE
    plus weighted gate regularization, backpropagate through the
    hypernetwork only, AdamW step under the cosine schedule with
    gradient-norm clipping. Returns the trained parameters and the
    per-step log.
    """
    templates = templates or default_templates()
    samples = split.train_samples()
    if not samples:
        raise ValueError("meta_train: no training samples")

    base.set_requires_grad(False)
    rng = np.random.default_rng(tcfg.seed)
    hyper = init_params(
        mcfg.n_layers, mcfg.hidden_size, mcfg.intermediate_size, mcfg.reduced_dim, rng
    )
    opt = AdamW(hyper.named_tensors(), tcfg)
    reg_weight = tcfg.reg_weight if mcfg.reg_weight_override is None else mcfg.reg_weight_override

    steps_per_epoch = math.ceil(len(samples) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    logbook: list[dict] = []
    step = 0
    row_lengths = [len(s.x) + len(s.y) for s in samples]
    with threadpool_limits(limits=1):
        for _ in range(tcfg.epochs):
            for idx in _bucketed_batches(row_lengths, tcfg.batch_size, rng):
                chunk = [samples[j] for j in idx]
                batch = build_batch(
                    chunk, templates, mcfg.max_context, rng=rng,
                    disable_template=mcfg.disable_prompt_template,
                )
                logits, betas = forward_batch(batch, base, mcfg, hyper)
                targets, mask = shift_targets(batch.token_ids, batch.loss_mask)
                ce = ce_loss(logits, targets, mask)
                reg = reg_loss(betas)
                loss = total_loss(ce, reg, reg_weight)
                value = loss.item()
                if not np.isfinite(value):
                    if checkpoint_path is not None:
                        save_checkpoint(base, hyper, mcfg, checkpoint_path)
                        log.error("non-finite loss; last-good parameters saved to %s", checkpoint_path)
                    raise TrainingDiverged(f"non-finite meta-training loss at step {step}")
                hyper.zero_grad()
                backward(loss)
                clip_grad_norm(hyper.named_tensors(), tcfg.grad_clip)
                lr = cosine_lr(step, total_steps, tcfg)
                opt.step(lr)
                entry = {
                    "step": step,
                    "ce": ce.item(),
                    "reg": reg.item(),
                    "total": value,
                    "lr": lr,
                    "beta_rms": reg.item(),
                }
                logbook.append(entry)
                if progress is not None:
                    progress(step, total_steps, entry)
                step += 1
    return hyper, logbook
