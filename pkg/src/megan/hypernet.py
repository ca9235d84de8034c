"""Condition-to-gate hypernetwork.

Turns a prompt-wrapped condition text plus the current layer latent into
one raw gate vector per layer: cross-attention at a reduced width R over
the layer latent, a learned per-layer embedding, and a bias-free output
map squashed by tanh into (-1, 1) per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import tokenize
from .numerics import ShapeError, Tensor, embedding, matmul
from .templates import TemplateTable

__all__ = [
    "HypernetParams",
    "ConditionEncoding",
    "init_params",
    "param_count",
    "count_trainables",
    "encode_condition",
    "generate_beta",
    "generate_beta_batch",
]


@dataclass
class HypernetParams:
    """The trainable parameter set: three query/key/value maps at width R,
    a layer-embedding table, and the bias-free output map to channel space."""

    w_q: Tensor  # (D, R)
    w_k: Tensor  # (D, R)
    w_v: Tensor  # (D, R)
    layer_embedding: Tensor  # (L, R)
    w_out: Tensor  # (R, C)

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "hyper.w_q": self.w_q,
            "hyper.w_k": self.w_k,
            "hyper.w_v": self.w_v,
            "hyper.layer_embedding": self.layer_embedding,
            "hyper.w_out": self.w_out,
        }

    @property
    def reduced_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def n_layers(self) -> int:
        return self.layer_embedding.shape[0]

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()


def param_count(n_layers: int, hidden: int, intermediate: int, reduced: int) -> int:
    """Trainable scalar count: (3*hidden + n_layers + intermediate) * reduced."""
    for name, v in (("n_layers", n_layers), ("hidden", hidden), ("intermediate", intermediate), ("reduced", reduced)):
        if v < 1:
            raise ValueError(f"param_count: {name} must be >= 1, got {v}")
    return (3 * hidden + n_layers + intermediate) * reduced


def count_trainables(params: HypernetParams) -> int:
    return sum(t.size for t in params.named_tensors().values())


def init_params(n_layers: int, hidden: int, intermediate: int, reduced: int, rng: np.random.Generator) -> HypernetParams:
    """Initialize near zero: small-normal projections, exactly-zero output map.

    With w_out = 0 every generated gate vector is tanh(0) = 0, so the
    full model starts out numerically identical to the frozen base.
    """
    if not reduced < hidden:
        raise ValueError(f"reduced dim {reduced} must be smaller than hidden {hidden}")

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    return HypernetParams(
        w_q=normal(hidden, reduced),
        w_k=normal(hidden, reduced),
        w_v=normal(hidden, reduced),
        layer_embedding=normal(n_layers, reduced),
        w_out=Tensor(np.zeros((reduced, intermediate)), requires_grad=True),
    )


@dataclass
class ConditionEncoding:
    """A rendered condition prompt plus its frozen-table embeddings."""

    text: str
    token_ids: list[int]
    embeddings: Tensor  # (T_cond, D), exact rows of the frozen embedding table


def encode_condition(
    condition_text: str,
    condition_type: str,
    templates: TemplateTable,
    base_embedding: Tensor,
    rng: np.random.Generator | None = None,
    disable_template: bool = False,
) -> ConditionEncoding:
    """Render the prompt for this condition and embed it with the frozen table."""
    text = templates.render(condition_text, condition_type, rng=rng, disable_template=disable_template)
    ids = tokenize(text)
    return ConditionEncoding(text=text, token_ids=ids, embeddings=embedding(base_embedding, np.array(ids)))


def generate_beta_batch(
    cond_emb: Tensor,
    cond_mask: np.ndarray,
    latent: Tensor,
    latent_mask: np.ndarray,
    layer_index: int,
    params: HypernetParams,
    disable_layer_embedding: bool = False,
) -> Tensor:
    """Raw gate vectors for a batch: (B, T_cond, D) x (B, T, D) -> (B, C).

    Single-head cross-attention scaled by 1/sqrt(R); masked latent
    positions are unreachable as keys, masked condition positions are
    excluded from the pooled summary.
    """
    if not 1 <= layer_index <= params.n_layers:
        raise ShapeError(f"layer_index {layer_index} outside [1, {params.n_layers}]")
    if cond_emb.ndim != 3 or latent.ndim != 3:
        raise ShapeError("generate_beta_batch expects 3-D (batch, positions, hidden) inputs")
    r = params.reduced_dim

    q = matmul(cond_emb, params.w_q)  # (B, Tc, R)
    k = matmul(latent, params.w_k)    # (B, T, R)
    v = matmul(latent, params.w_v)

    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(r))  # (B, Tc, T)
    key_bias = np.where(latent_mask[:, None, :], 0.0, -1e30)
    attn = (scores + Tensor(key_bias)).softmax(axis=-1)
    pooled = matmul(attn, v)  # (B, Tc, R)

    counts = cond_mask.sum(axis=1, keepdims=True).astype(np.float64)
    weights = (cond_mask / counts)[:, :, None]  # (B, Tc, 1)
    summary = (pooled * Tensor(weights)).sum(axis=1)  # (B, R)

    if not disable_layer_embedding:
        summary = summary + embedding(params.layer_embedding, np.array([layer_index - 1]))
    return matmul(summary, params.w_out).tanh()


def generate_beta(
    cond: ConditionEncoding,
    layer_latent: Tensor,
    layer_index: int,
    params: HypernetParams,
    disable_layer_embedding: bool = False,
) -> Tensor:
    """Single-sample form: latent (T, D) for one sequence -> raw beta (C,)."""
    if layer_latent.ndim != 2:
        raise ShapeError(f"layer_latent must be (positions, hidden), got {layer_latent.shape}")
    t_cond, d = cond.embeddings.shape
    if layer_latent.shape[1] != d:
        raise ShapeError(f"latent width {layer_latent.shape[1]} != condition width {d}")
    beta = generate_beta_batch(
        cond.embeddings.reshape(1, t_cond, d),
        np.ones((1, t_cond), dtype=bool),
        layer_latent.reshape(1, *layer_latent.shape),
        np.ones((1, layer_latent.shape[0]), dtype=bool),
        layer_index,
        params,
        disable_layer_embedding=disable_layer_embedding,
    )
    return beta.reshape(beta.shape[1])
