"""Sample handling: JSONL ingestion, byte tokenization, batching, synthetic tasks.

The tokenizer is byte-level (one id per UTF-8 byte) plus four specials,
so no external vocabulary is involved and round-trips are exact.
"""

from __future__ import annotations

import codecs
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .templates import TemplateTable

log = logging.getLogger("megan.data")

PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260

CONDITION_TYPES = ("task", "domain", "persona", "style", "sentiment", "emotion", "synthetic")

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "SEP",
    "VOCAB_SIZE",
    "CONDITION_TYPES",
    "ConditionSample",
    "Task",
    "TaskSplit",
    "TokenBatch",
    "DatasetError",
    "tokenize",
    "detokenize",
    "detokenize_bytes",
    "load_jsonl",
    "build_batch",
    "synth_task_suite",
    "synth_pretrain_corpus",
    "corpus_from_text",
    "SYNTH_TRANSFORMS",
]


class DatasetError(ValueError):
    """Malformed dataset content (message carries the offending line/sample)."""


# -- tokenizer -----------------------------------------------------------------


def tokenize(text: str | bytes) -> list[int]:
    """Map each UTF-8 byte to its value; ids 256..259 are specials."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize_bytes(ids) -> bytes:
    """Inverse of tokenize; special ids embedded in content are skipped."""
    out = bytearray()
    skipped = 0
    for i in ids:
        i = int(i)
        if 0 <= i < 256:
            out.append(i)
        else:
            skipped += 1
    if skipped:
        warnings.warn(f"detokenize: skipped {skipped} special id(s) inside content", stacklevel=2)
    return bytes(out)


def detokenize(ids) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


# -- samples ------------------------------------------------------------------


@dataclass
class ConditionSample:
    """One (input, target, condition) record."""

    x: str
    y: str
    z: str
    condition_type: str

    def validate(self, where: str = "sample") -> "ConditionSample":
        if self.condition_type not in CONDITION_TYPES:
            raise DatasetError(
                f"{where}: unknown condition_type '{self.condition_type}' "
                f"(expected one of {', '.join(CONDITION_TYPES)})"
            )
        if not self.x or not self.y:
            raise DatasetError(f"{where}: x and y must be nonempty")
        if not self.z:
            raise DatasetError(f"{where}: z must be nonempty")
        return self


def load_jsonl(path) -> list[ConditionSample]:
    """Read one JSON object per line with keys x, y, z, condition_type."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("x", "y", "z", "condition_type"):
                if key not in obj:
                    raise DatasetError(f"line {lineno}: missing field {key}")
            samples.append(
                ConditionSample(
                    x=obj["x"], y=obj["y"], z=obj["z"], condition_type=obj["condition_type"]
                ).validate(f"line {lineno}")
            )
    if not samples:
        warnings.warn(f"{path}: no samples found", stacklevel=2)
    return samples


# -- batching -------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Padded token matrix with the loss mask and hypernetwork inputs.

    loss_mask is true exactly on target-token positions (y bytes and the
    EOS that ends them); prefix_lens counts tokens through SEP, the part
    of each row the gate profiles are conditioned on.
    """

    token_ids: np.ndarray  # (B, T) int64
    loss_mask: np.ndarray  # (B, T) bool
    cond_ids: np.ndarray   # (B, Tc) int64, PAD-padded rendered condition prompts
    cond_mask: np.ndarray  # (B, Tc) bool
    prefix_lens: np.ndarray  # (B,) int64
    samples: list[ConditionSample] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]


def _pad_rows(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def build_batch(
    samples: list[ConditionSample],
    templates: TemplateTable,
    max_context: int,
    rng: np.random.Generator | None = None,
    disable_template: bool = False,
) -> TokenBatch:
    """Assemble rows of BOS, condition prompt, x, SEP, y, EOS, padding.

    `rng` enables the per-sample random choice among template phrasings
    (training); omit it for the deterministic first phrasing (eval).
    """
    rows, masks, cond_rows, prefix_lens = [], [], [], []
    for sample in samples:
        prompt = templates.render(sample.z, sample.condition_type, rng=rng, disable_template=disable_template)
        prompt_toks = tokenize(prompt + " ")
        x_toks = tokenize(sample.x)
        y_toks = tokenize(sample.y)
        row = [BOS] + prompt_toks + x_toks + [SEP] + y_toks + [EOS]
        if len(row) > max_context:
            raise DatasetError(
                f"sample (x={sample.x!r}, z={sample.z!r}) needs {len(row)} tokens, "
                f"context is {max_context}"
            )
        prefix = 1 + len(prompt_toks) + len(x_toks) + 1
        mask = [False] * prefix + [True] * (len(y_toks) + 1)
        rows.append(row)
        masks.append(mask)
        cond_rows.append(tokenize(prompt))
        prefix_lens.append(prefix)

    token_ids, _ = _pad_rows(rows)
    loss_mask = np.zeros_like(token_ids, dtype=bool)
    for i, m in enumerate(masks):
        loss_mask[i, : len(m)] = m
    cond_ids, cond_mask = _pad_rows(cond_rows)
    return TokenBatch(
        token_ids=token_ids,
        loss_mask=loss_mask,
        cond_ids=cond_ids,
        cond_mask=cond_mask,
        prefix_lens=np.array(prefix_lens, dtype=np.int64),
        samples=list(samples),
    )


# -- synthetic conditioned tasks ---------------------------------------------------

SYNTH_TRANSFORMS = {
    "uppercase": str.upper,
    "reverse": lambda s: s[::-1],
    "duplicate": lambda s: s + s,
    "identity": lambda s: s,
    "rot13": lambda s: codecs.encode(s, "rot13"),
    "swapcase": str.swapcase,
}

META_TRAIN_CONDITIONS = ("uppercase", "reverse", "duplicate", "identity", "rot13")
LR_CONDITION = "rot13"
US_CONDITION = "swapcase"


@dataclass
class Task:
    """A named condition with its samples; `setting` is LR/US for targets."""

    name: str
    samples: list[ConditionSample]
    setting: str | None = None


@dataclass
class TaskSplit:
    meta_train: list[Task]
    meta_eval: list[Task]
    targets: list[Task]

    def train_samples(self) -> list[ConditionSample]:
        return [s for task in self.meta_train for s in task.samples]


def _random_word(rng: np.random.Generator) -> str:
    length = int(rng.integers(3, 9))
    return "".join(chr(ord("a") + int(c)) for c in rng.integers(0, 26, size=length))


def _make_samples(rng, name, count, exclude=()) -> list[ConditionSample]:
    transform = SYNTH_TRANSFORMS[name]
    taken = set(exclude)
    out = []
    while len(out) < count:
        x = _random_word(rng)
        if x in taken:
            continue
        taken.add(x)
        out.append(ConditionSample(x=x, y=transform(x), z=name, condition_type="synthetic"))
    return out


def synth_task_suite(
    seed: int,
    train_per_task: int = 2000,
    eval_per_task: int = 100,
    lr_cap: int = 50,
) -> TaskSplit:
    """Deterministic string-transformation meta-task suite.

    Five training conditions; rot13 is the low-resource target (capped
    in meta-training), swapcase the unseen one (absent entirely). The
    same x maps to different y under different conditions, so the
    condition signal is necessary, not decorative.
    """
    rng = np.random.default_rng(seed)
    meta_train, meta_eval = [], []
    eval_by_name = {}
    for name in META_TRAIN_CONDITIONS:
        n_train = lr_cap if name == LR_CONDITION else train_per_task
        train = _make_samples(rng, name, n_train)
        evaluation = _make_samples(rng, name, eval_per_task, exclude={s.x for s in train})
        meta_train.append(Task(name, train))
        meta_eval.append(Task(name, evaluation))
        eval_by_name[name] = evaluation
    targets = [
        Task(LR_CONDITION, eval_by_name[LR_CONDITION], setting="LR"),
        Task(US_CONDITION, _make_samples(rng, US_CONDITION, eval_per_task), setting="US"),
    ]
    split = TaskSplit(meta_train=meta_train, meta_eval=meta_eval, targets=targets)
    us_names = {t.name for t in split.targets if t.setting == "US"}
    assert not us_names & {t.name for t in split.meta_train}, "US tasks must not appear in meta-training"
    return split


def synth_pretrain_corpus(
    seed: int,
    templates: TemplateTable,
    samples_per_task: int = 2000,
) -> list[list[int]]:
    """Token lines teaching the transforms with *uninformative* conditions.

    Every line uses the full prompt layout, but the condition annotation
    is drawn at random rather than matching the transform actually
    applied. The base model therefore learns the format, the positions,
    and all transform behaviors, while the condition word itself carries
    no usable signal: conditioning stays learnable only through the gate
    pathway later.
    """
    rng = np.random.default_rng(seed)
    names = list(META_TRAIN_CONDITIONS)
    lines = []
    for name in names:
        transform = SYNTH_TRANSFORMS[name]
        for _ in range(samples_per_task):
            x = _random_word(rng)
            y = transform(x)
            z_label = names[int(rng.integers(len(names)))]
            prompt = templates.render(z_label, "synthetic", rng=rng)
            line = [BOS] + tokenize(prompt + " ") + tokenize(x) + [SEP] + tokenize(y) + [EOS]
            lines.append(line)
    order = rng.permutation(len(lines))
    return [lines[i] for i in order]


def corpus_from_text(text: str | bytes, window: int = 128) -> list[list[int]]:
    """Chunk a plain text corpus into fixed-size token windows."""
    ids = tokenize(text)
    if not ids:
        raise DatasetError("empty corpus")
    return [[BOS] + ids[i : i + window] + [EOS] for i in range(0, len(ids), window)]
