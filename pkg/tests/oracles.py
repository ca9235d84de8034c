"""Independent brute-force oracles for derived expected values.

Everything here is deliberately written with plain loops and no shared
code with the package, so a test that compares against it is a genuine
dual-route check.
"""

import math
from functools import lru_cache


def sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def swish_scalar(x: float, slope: float) -> float:
    return x * sigmoid_scalar(slope * x)


def central_difference(f, x: float, eps: float = 1e-6) -> float:
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


def swiglu_scalar_loop(x, beta, w_up, w_gate, w_down):
    """Gated FFN forward with nested loops, lists in, list out."""
    d = len(x)
    c = len(w_up[0])
    up = [sum(x[i] * w_up[i][j] for i in range(d)) for j in range(c)]
    gate = [sum(x[i] * w_gate[i][j] for i in range(d)) for j in range(c)]
    h = [swish_scalar(gate[j], 1.0 + beta[j]) * up[j] for j in range(c)]
    return [sum(h[j] * w_down[j][i] for j in range(c)) for i in range(d)]


def layer_forward_single_token(x, weights, beta):
    """One pre-norm transformer layer on a single token, scalar loops only.

    With one position, causal softmax attention collapses to the value
    projection. `weights` is a dict of nested lists: attn_norm, wq, wk,
    wv, wo, ffn_norm, w_up, w_gate, w_down.
    """
    d = len(x)

    def rms_norm(vec, gain):
        ms = sum(v * v for v in vec) / len(vec)
        inv = (ms + 1e-8) ** -0.5
        return [v * inv * g for v, g in zip(vec, gain)]

    def matvec(vec, mat):
        return [sum(vec[i] * mat[i][j] for i in range(len(vec))) for j in range(len(mat[0]))]

    a_in = rms_norm(x, weights["attn_norm"])
    v = matvec(a_in, weights["wv"])  # softmax over a single key is exactly 1
    attn = matvec(v, weights["wo"])
    h = [x[i] + attn[i] for i in range(d)]
    f_in = rms_norm(h, weights["ffn_norm"])
    ffn = swiglu_scalar_loop(f_in, beta, weights["w_up"], weights["w_gate"], weights["w_down"])
    return [h[i] + ffn[i] for i in range(d)]


# -- metric oracles --------------------------------------------------------------


def bleu2_reference(pred: str, ref: str) -> float:
    p = pred.lower().split()
    r = ref.lower().split()
    if not p:
        return 0.0
    logs = []
    for n in (1, 2):
        pgrams = [tuple(p[i : i + n]) for i in range(len(p) - n + 1)]
        rgrams = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
        if not pgrams:
            return 0.0
        clipped = 0
        for gram in set(pgrams):
            clipped += min(pgrams.count(gram), rgrams.count(gram))
        if clipped == 0:
            return 0.0
        logs.append(0.5 * math.log(clipped / len(pgrams)))
    bp = 1.0 if len(p) > len(r) else math.exp(1.0 - len(r) / len(p))
    return bp * math.exp(sum(logs))


def lcs_recursive(a: tuple, b: tuple) -> int:
    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)


def rouge_l_reference(pred: str, ref: str, beta: float = math.inf) -> float:
    p = tuple(pred.lower().split())
    r = tuple(ref.lower().split())
    if not p or not r:
        return 0.0
    lcs = lcs_recursive(p, r)
    recall = lcs / len(r)
    precision = lcs / len(p)
    if math.isinf(beta):
        return recall
    denom = recall + beta * beta * precision
    return 0.0 if denom == 0 else (1 + beta * beta) * recall * precision / denom


def dist_n_reference(predictions, n: int) -> float:
    all_grams = []
    for pred in predictions:
        toks = pred.lower().split()
        all_grams.extend(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    return len(set(all_grams)) / len(all_grams) if all_grams else 0.0
