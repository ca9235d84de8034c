"""Desk-scale decoder-only transformer with meta-gated feedforward blocks.

Pre-norm residual layers with RMS normalization, rotary position
attention, and the gated FFN whose per-channel slopes come from the
hypernetwork. Also owns the checkpoint file format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import data as data_mod
from .gating import FfnBlock, beta_swiglu
from .hypernet import HypernetParams, generate_beta_batch
from .numerics import ShapeError, Tensor, embedding, matmul

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "BaseWeights",
    "SequenceTooLong",
    "GenerationTruncated",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointHashError",
    "desk_config",
    "init_base",
    "rms_norm",
    "forward",
    "forward_batch",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
]


class SequenceTooLong(ValueError):
    pass


class GenerationTruncated(RuntimeError):
    """Context filled up mid-generation; `.partial` holds what was produced."""

    def __init__(self, message: str, partial: list[int]):
        super().__init__(message)
        self.partial = partial


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus ablation switches."""

    n_layers: int = 4
    hidden_size: int = 64
    intermediate_size: int = 256
    reduced_dim: int = 16
    n_heads: int = 4
    vocab_size: int = data_mod.VOCAB_SIZE
    max_context: int = 256
    disable_prompt_template: bool = False
    disable_layer_embedding: bool = False
    reg_weight_override: float | None = None

    def __post_init__(self):
        if self.intermediate_size <= self.hidden_size:
            raise ValueError("intermediate_size must exceed hidden_size")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.max_context < 2:
            raise ValueError("max_context must be at least 2")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def desk_config(**overrides) -> ModelConfig:
    """The default desk-scale configuration used throughout the tests."""
    return ModelConfig(**overrides)


@dataclass
class LayerWeights:
    attn_norm: Tensor  # (D,)
    wq: Tensor  # (D, D)
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor  # (D,)
    ffn: FfnBlock


@dataclass
class BaseWeights:
    """The frozen parameter set: embeddings, attention stacks, gated FFNs.

    Positions enter through rotary phases in attention, so the only
    positional state is functional, not learned.
    """

    tok_emb: Tensor  # (V, D)
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: Tensor = None  # (D,)
    out_proj: Tensor = None  # (D, V)

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"base.tok_emb": self.tok_emb}
        for i, lw in enumerate(self.layers):
            p = f"base.layers.{i}"
            named[f"{p}.attn_norm"] = lw.attn_norm
            named[f"{p}.wq"] = lw.wq
            named[f"{p}.wk"] = lw.wk
            named[f"{p}.wv"] = lw.wv
            named[f"{p}.wo"] = lw.wo
            named[f"{p}.ffn_norm"] = lw.ffn_norm
            named[f"{p}.ffn.w_up"] = lw.ffn.w_up
            named[f"{p}.ffn.w_gate"] = lw.ffn.w_gate
            named[f"{p}.ffn.w_down"] = lw.ffn.w_down
        named["base.final_norm"] = self.final_norm
        named["base.out_proj"] = self.out_proj
        return named

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def init_base(config: ModelConfig, rng: np.random.Generator) -> BaseWeights:
    d, c, v = config.hidden_size, config.intermediate_size, config.vocab_size
    # 1/sqrt(hidden) keeps attention logits O(1) at this width; the usual
    # 0.02 leaves softmax near-uniform and slows circuit formation badly
    std = d ** -0.5

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = [
        LayerWeights(
            attn_norm=ones(d),
            wq=normal(d, d),
            wk=normal(d, d),
            wv=normal(d, d),
            wo=normal(d, d),
            ffn_norm=ones(d),
            ffn=FfnBlock(w_up=normal(d, c), w_gate=normal(d, c), w_down=normal(c, d)),
        )
        for _ in range(config.n_layers)
    ]
    return BaseWeights(
        tok_emb=normal(v, d),
        layers=layers,
        final_norm=ones(d),
        out_proj=normal(d, v),
    )


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + eps) ** -0.5) * gain


_ROPE_BASE = 10000.0
_rope_cache: dict = {}


def _rope_tables(t: int, dh: int) -> tuple[Tensor, Tensor, Tensor]:
    """Rotary tables: cos/sin phases (1,1,T,dh) and the half-rotation matrix.

    rotate_half(x) = cat(-x2, x1) is expressed as x @ R with a constant
    signed permutation, so the rotation stays inside the autodiff
    primitive set.
    """
    key = (t, dh)
    if key not in _rope_cache:
        half = dh // 2
        freqs = _ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
        angles = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
        cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1)
        sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1)
        rot = np.zeros((dh, dh))
        for j in range(half):
            rot[j + half, j] = -1.0
            rot[j, j + half] = 1.0
        _rope_cache[key] = (Tensor(cos[None, None]), Tensor(sin[None, None]), Tensor(rot))
    return _rope_cache[key]


def _apply_rope(x: Tensor, cos: Tensor, sin: Tensor, rot: Tensor) -> Tensor:
    return x * cos + matmul(x, rot) * sin


def _attention(x: Tensor, lw: LayerWeights, n_heads: int, causal_bias: Tensor) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    cos, sin, rot = _rope_tables(t, dh)
    q = matmul(x, lw.wq).reshape(b, t, n_heads, dh).swapaxes(1, 2)
    k = matmul(x, lw.wk).reshape(b, t, n_heads, dh).swapaxes(1, 2)
    v = matmul(x, lw.wv).reshape(b, t, n_heads, dh).swapaxes(1, 2)
    q = _apply_rope(q, cos, sin, rot)
    k = _apply_rope(k, cos, sin, rot)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + causal_bias
    out = matmul(scores.softmax(axis=-1), v).swapaxes(1, 2).reshape(b, t, d)
    return matmul(out, lw.wo)


def _causal_bias(t: int) -> Tensor:
    bias = np.triu(np.full((t, t), -1e30), k=1)
    return Tensor(bias[None, None])


def _forward_core(
    token_ids: np.ndarray,
    base: BaseWeights,
    config: ModelConfig,
    hyper: HypernetParams | None = None,
    cond_ids: np.ndarray | None = None,
    cond_mask: np.ndarray | None = None,
    prefix_lens: np.ndarray | None = None,
    fixed_betas: list[np.ndarray] | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Shared forward pass over a (B, T) token matrix.

    One raw gate vector per layer is produced per row from the latent at
    prefix positions; without a condition (or with `fixed_betas`) the
    hypernetwork is not consulted.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    b, t = token_ids.shape
    if t > config.max_context:
        raise SequenceTooLong(f"sequence length {t} exceeds max_context {config.max_context}")
    if cond_ids is not None and hyper is None and fixed_betas is None:
        raise ValueError("condition provided without hypernetwork parameters")

    conditioned = cond_ids is not None and fixed_betas is None
    if conditioned:
        cond_emb = embedding(base.tok_emb, cond_ids)
        if cond_mask is None:
            cond_mask = np.ones(cond_ids.shape, dtype=bool)
        if prefix_lens is None:
            prefix_lens = np.full(b, t, dtype=np.int64)
        prefix_mask = np.arange(t)[None, :] < np.asarray(prefix_lens)[:, None]

    e = embedding(base.tok_emb, token_ids)
    causal = _causal_bias(t)
    betas: list[Tensor] = []
    for li, lw in enumerate(base.layers, start=1):
        e = e + _attention(rms_norm(e, lw.attn_norm), lw, config.n_heads, causal)
        f_in = rms_norm(e, lw.ffn_norm)
        if conditioned:
            beta = generate_beta_batch(
                cond_emb, cond_mask, f_in, prefix_mask, li, hyper,
                disable_layer_embedding=config.disable_layer_embedding,
            )
        elif fixed_betas is not None:
            beta = Tensor(fixed_betas[li - 1])
        else:
            beta = Tensor(np.zeros((b, config.intermediate_size)))
        betas.append(beta)
        e = e + beta_swiglu(f_in, beta.reshape(b, 1, config.intermediate_size), lw.ffn)
    logits = matmul(rms_norm(e, base.final_norm), base.out_proj)
    return logits, betas


def forward_batch(batch, base: BaseWeights, config: ModelConfig, hyper: HypernetParams | None):
    """Forward over a TokenBatch; returns (logits (B,T,V), per-layer betas)."""
    return _forward_core(
        batch.token_ids,
        base,
        config,
        hyper=hyper,
        cond_ids=batch.cond_ids if hyper is not None else None,
        cond_mask=batch.cond_mask if hyper is not None else None,
        prefix_lens=batch.prefix_lens,
    )


def forward(
    input_tokens,
    condition,
    base: BaseWeights,
    hyper: HypernetParams | None,
    config: ModelConfig,
    prefix_len: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Single-sequence forward.

    `condition` is a ConditionEncoding or None; returns logits (T, V)
    and the stacked raw gate matrix (L, C), all zeros when no condition
    is given.
    """
    tokens = np.asarray(list(input_tokens), dtype=np.int64)[None, :]
    if condition is not None and hyper is None:
        raise ValueError("condition provided without hypernetwork parameters")
    cond_ids = np.asarray(condition.token_ids, dtype=np.int64)[None, :] if condition is not None else None
    prefix = np.array([prefix_len if prefix_len is not None else tokens.shape[1]])
    logits, betas = _forward_core(
        tokens, base, config, hyper=hyper, cond_ids=cond_ids, prefix_lens=prefix
    )
    t, v = logits.shape[1], logits.shape[2]
    profile = np.stack([bt.data[0] for bt in betas])
    return logits.reshape(t, v), profile


def generate(
    prompt_tokens,
    condition,
    base: BaseWeights,
    hyper: HypernetParams | None,
    config: ModelConfig,
    max_new: int,
    sampling: str = "greedy",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    eos_id: int = data_mod.EOS,
) -> list[int]:
    """Autoregressive decoding with gate vectors fixed from the prefill pass.

    Greedy picks the arg-max logit (lowest token id on ties); sampling
    `"temperature"` draws from softmax(logits / temperature) using `rng`.
    Returns the generated continuation without the terminating EOS.
    """
    tokens = [int(tk) for tk in prompt_tokens]
    if len(tokens) > config.max_context:
        raise SequenceTooLong(f"prompt length {len(tokens)} exceeds max_context {config.max_context}")
    if sampling not in ("greedy", "temperature"):
        raise ValueError(f"unknown sampling mode '{sampling}'")
    if sampling == "temperature" and rng is None:
        raise ValueError("temperature sampling needs an rng")
    if max_new == 0:
        return []

    cond_ids = np.asarray(condition.token_ids, dtype=np.int64)[None, :] if condition is not None else None
    prefill, betas = _forward_core(
        np.asarray(tokens)[None, :], base, config, hyper=hyper, cond_ids=cond_ids,
        prefix_lens=np.array([len(tokens)]),
    )
    fixed = [bt.data for bt in betas]

    generated: list[int] = []
    logits_row = prefill.data[0, -1]
    for _ in range(max_new):
        if sampling == "greedy":
            nxt = int(np.argmax(logits_row))
        else:
            z = logits_row / temperature
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        if nxt == eos_id:
            break
        generated.append(nxt)
        tokens.append(nxt)
        if len(generated) == max_new:
            break
        if len(tokens) >= config.max_context:
            raise GenerationTruncated(
                f"context window {config.max_context} filled before max_new={max_new}", generated
            )
        step_logits, _ = _forward_core(
            np.asarray(tokens)[None, :], base, config, fixed_betas=fixed
        )
        logits_row = step_logits.data[0, -1]
    return generated


# -- checkpoint format ----------------------------------------------------------------
#
# magic "MGAN" | u32 version | u64 header length | header JSON
# | raw float64 little-endian buffers (base section, then hyper section)
# | sha256(header) | sha256(base section) | sha256(hyper section)

CHECKPOINT_MAGIC = b"MGAN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


def _section_blob(named: dict[str, Tensor], offset0: int) -> tuple[list[dict], bytes]:
    directory = []
    parts = []
    offset = offset0
    for name, t in named.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(t.data.shape), "offset": offset, "nbytes": len(buf)})
        parts.append(buf)
        offset += len(buf)
    return directory, b"".join(parts)


def save_checkpoint(base: BaseWeights, hyper: HypernetParams | None, config: ModelConfig, path) -> None:
    base_dir, base_blob = _section_blob(base.named_tensors(), 0)
    if hyper is not None:
        hyper_dir, hyper_blob = _section_blob(hyper.named_tensors(), len(base_blob))
    else:
        hyper_dir, hyper_blob = None, b""
    header = json.dumps(
        {"config": config.to_dict(), "base": base_dir, "hyper": hyper_dir}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(base_blob)
        fh.write(hyper_blob)
        fh.write(hashlib.sha256(header).digest())
        fh.write(hashlib.sha256(base_blob).digest())
        fh.write(hashlib.sha256(hyper_blob).digest())


def _read_section(payload: bytes, directory: list[dict], requires_grad: bool) -> dict[str, Tensor]:
    out = {}
    for entry in directory:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        out[entry["name"]] = Tensor(arr.copy(), requires_grad=requires_grad)
    return out


def _base_from_named(config: ModelConfig, named: dict[str, Tensor]) -> BaseWeights:
    try:
        layers = []
        for i in range(config.n_layers):
            p = f"base.layers.{i}"
            layers.append(
                LayerWeights(
                    attn_norm=named[f"{p}.attn_norm"],
                    wq=named[f"{p}.wq"],
                    wk=named[f"{p}.wk"],
                    wv=named[f"{p}.wv"],
                    wo=named[f"{p}.wo"],
                    ffn_norm=named[f"{p}.ffn_norm"],
                    ffn=FfnBlock(
                        w_up=named[f"{p}.ffn.w_up"],
                        w_gate=named[f"{p}.ffn.w_gate"],
                        w_down=named[f"{p}.ffn.w_down"],
                    ),
                )
            )
        return BaseWeights(
            tok_emb=named["base.tok_emb"],
            layers=layers,
            final_norm=named["base.final_norm"],
            out_proj=named["base.out_proj"],
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint missing tensor {exc}") from exc


def _hyper_from_named(named: dict[str, Tensor]) -> HypernetParams:
    try:
        return HypernetParams(
            w_q=named["hyper.w_q"],
            w_k=named["hyper.w_k"],
            w_v=named["hyper.w_v"],
            layer_embedding=named["hyper.layer_embedding"],
            w_out=named["hyper.w_out"],
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint missing tensor {exc}") from exc


def load_checkpoint(path) -> tuple[BaseWeights, HypernetParams | None, ModelConfig]:
    """Read and verify a checkpoint; base tensors come back frozen."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointTruncatedError(f"{path}: {len(blob)} bytes is too short for a header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, supported {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len + 96:
        raise CheckpointTruncatedError(f"{path}: header declares more bytes than the file holds")
    header_bytes = blob[16 : 16 + header_len]
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: header is not valid JSON") from exc

    base_dir = header["base"]
    hyper_dir = header["hyper"]
    base_nbytes = sum(e["nbytes"] for e in base_dir)
    hyper_nbytes = sum(e["nbytes"] for e in hyper_dir) if hyper_dir else 0
    expected = 16 + header_len + base_nbytes + hyper_nbytes + 96
    if len(blob) != expected:
        raise CheckpointTruncatedError(f"{path}: expected {expected} bytes, found {len(blob)}")

    payload = blob[16 + header_len : 16 + header_len + base_nbytes + hyper_nbytes]
    trailer = blob[-96:]
    digests = (
        hashlib.sha256(header_bytes).digest(),
        hashlib.sha256(payload[:base_nbytes]).digest(),
        hashlib.sha256(payload[base_nbytes:]).digest(),
    )
    for i, section in enumerate(("header", "base", "hyper")):
        if trailer[i * 32 : (i + 1) * 32] != digests[i]:
            raise CheckpointHashError(f"{path}: SHA-256 mismatch in {section} section")

    config = ModelConfig.from_dict(header["config"])
    base = _base_from_named(config, _read_section(payload, base_dir, requires_grad=False))
    hyper = _hyper_from_named(_read_section(payload, hyper_dir, requires_grad=True)) if hyper_dir else None
    return base, hyper, config
