"""Slope-parameterized gate activations and the gated feedforward block.

The gate nonlinearity is swish(x, s) = x * sigmoid(s * x). The standard
SiLU block uses s = 1 everywhere; here each FFN channel carries its own
slope s = 1 + beta with raw beta in (-1, 1), so beta = 0 reproduces the
unmodified block and the slope stays strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import ShapeError, Tensor, matmul

BETA_CLAMP = 1e-3  # raw beta kept inside (-1 + BETA_CLAMP, 1 - BETA_CLAMP)

__all__ = [
    "BETA_CLAMP",
    "FfnBlock",
    "sigmoid_beta",
    "swish",
    "swish_grad_slope",
    "swish_grad_x",
    "clamp_beta",
    "swish_tensor",
    "beta_swiglu",
]


# -- scalar/ndarray reference forms -------------------------------------------------


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _maybe_float(out: np.ndarray):
    return float(out) if out.ndim == 0 else out


def sigmoid_beta(x, slope):
    """sigmoid(slope * x); the ordinary sigmoid is slope = 1."""
    slope = np.asarray(slope, dtype=np.float64)
    if np.any(slope <= 0):
        raise ValueError("sigmoid_beta: slope must be positive")
    z = np.asarray(np.multiply(slope, x), dtype=np.float64)
    return _maybe_float(_stable_sigmoid(z))


def swish(x, slope):
    """x * sigmoid(slope * x).

    Tends to x/2 as slope -> 0 and to relu(x) as slope -> inf.
    """
    return _maybe_float(np.asarray(np.multiply(x, sigmoid_beta(x, slope))))


def swish_grad_slope(x, slope):
    """d swish / d slope = x^2 * s * (1 - s) with s = sigmoid(slope * x).

    Bounded in magnitude by x^2 / 4 since s(1-s) <= 1/4.
    """
    s = np.asarray(sigmoid_beta(x, slope))
    out = np.multiply(np.multiply(x, x), s * (1.0 - s))
    return _maybe_float(np.asarray(out))


def swish_grad_x(x, slope):
    """d swish / d x = s + slope * x * s * (1 - s)."""
    s = np.asarray(sigmoid_beta(x, slope))
    out = s + np.multiply(slope, np.multiply(x, s * (1.0 - s)))
    return _maybe_float(np.asarray(out))


# -- graph-level forms ----------------------------------------------------------------


def clamp_beta(beta: Tensor) -> Tensor:
    """Clamp raw beta into (-1, 1) with a small safety margin.

    tanh already bounds the hypernetwork output; the clamp only guards
    values that round-tripped through a checkpoint.
    """
    return beta.clip(-1.0 + BETA_CLAMP, 1.0 - BETA_CLAMP)


def swish_tensor(x: Tensor, slope: Tensor) -> Tensor:
    """Differentiable swish computed directly as x * sigmoid(slope * x).

    Gradients w.r.t. both x and slope follow from the composite graph;
    no rescaling through 1/slope is involved, so slopes near zero are
    safe.
    """
    return x * (slope * x).sigmoid()


@dataclass
class FfnBlock:
    """Gated feedforward weights: down( swish(gate(x)) * up(x) ).

    All three maps are bias-free; the intermediate width is larger than
    the hidden width.
    """

    w_up: Tensor    # (D, C)
    w_gate: Tensor  # (D, C)
    w_down: Tensor  # (C, D)

    def __post_init__(self):
        d, c = self.w_up.shape
        if self.w_gate.shape != (d, c) or self.w_down.shape != (c, d):
            raise ShapeError(
                f"FfnBlock: inconsistent shapes up={self.w_up.shape} "
                f"gate={self.w_gate.shape} down={self.w_down.shape}"
            )
        if not c > d:
            raise ValueError(f"FfnBlock: intermediate size {c} must exceed hidden size {d}")

    @property
    def hidden_size(self) -> int:
        return self.w_up.shape[0]

    @property
    def intermediate_size(self) -> int:
        return self.w_up.shape[1]


def beta_swiglu(x: Tensor, beta: Tensor, block: FfnBlock) -> Tensor:
    """Gated FFN with per-channel gate slopes 1 + beta.

    x: (..., D); beta: (C,) or broadcastable to the gate activation
    shape (..., C). beta = 0 reproduces the standard SiLU-gated block
    exactly.
    """
    d = block.hidden_size
    if x.shape[-1] != d:
        raise ShapeError(f"beta_swiglu: input width {x.shape[-1]} != hidden size {d}")
    if beta.shape[-1] != block.intermediate_size:
        raise ShapeError(
            f"beta_swiglu: beta width {beta.shape[-1]} != intermediate size {block.intermediate_size}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, d)
    slope = clamp_beta(beta) + 1.0
    gate = swish_tensor(matmul(x, block.w_gate), slope)
    h = gate * matmul(x, block.w_up)
    out = matmul(h, block.w_down)
    return out.reshape(d) if squeeze else out
