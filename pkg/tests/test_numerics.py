import numpy as np
import pytest

from megan.numerics import (
    ComputationRecord,
    ShapeError,
    Tensor,
    backward,
    computation_record,
    embedding,
    finite_difference_check,
    masked_cross_entropy,
    matmul,
)


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_hand_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_softmax_symmetry():
    out = Tensor([[0.0, 0.0]]).softmax()
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_shift_invariance():
    x = np.array([[1.0, 2.0, 3.0]])
    assert np.allclose(Tensor(x).softmax().data, Tensor(x + 100.0).softmax().data)


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_matmul_hand_chain_rule():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    x = Tensor([[1.0, 1.0]])
    backward(matmul(x, w).sum())
    assert np.array_equal(w.grad, [[1.0, 1.0], [1.0, 1.0]])


def test_backward_constant_loss_leaves_grad_unset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = Tensor(5.0)
    backward(loss)
    assert x.grad is None


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(x * x)


def test_gradient_accumulates_across_fanout():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    backward((y + y).sum())
    assert np.allclose(x.grad, [6.0])


def test_gradient_accumulates_across_backwards_until_zeroed():
    x = Tensor([1.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    assert np.allclose(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None


PRIMITIVES = {
    "add": lambda t, c: (t + c).sum(),
    "sub": lambda t, c: (c - t).sum(),
    "mul": lambda t, c: (t * c * t).sum(),
    "div": lambda t, c: (c / (t * t + 1.0)).sum(),
    "neg": lambda t, c: (-t).sum(),
    "pow": lambda t, c: ((t * t + 1.0) ** 1.7).sum(),
    "exp": lambda t, c: t.exp().sum(),
    "log": lambda t, c: (t * t + 1.0).log().sum(),
    "tanh": lambda t, c: t.tanh().sum(),
    "sigmoid": lambda t, c: t.sigmoid().sum(),
    "sqrt": lambda t, c: (t * t + 0.5).sqrt().sum(),
    "clip": lambda t, c: t.clip(-0.75, 0.75).mean(),
    "sum_axis": lambda t, c: (t.sum(axis=0) * c.sum(axis=0)).sum(),
    "mean_axis": lambda t, c: (t.mean(axis=1, keepdims=True) * t).sum(),
    "softmax": lambda t, c: (t.softmax(axis=1) * c).sum(),
    "matmul": lambda t, c: matmul(t, c.swapaxes(0, 1)).sum(),
    "reshape": lambda t, c: (t.reshape(6) * t.reshape(6)).sum(),
    "swapaxes": lambda t, c: matmul(t.swapaxes(0, 1), t).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    # 100 random points per primitive, aggregated over repeated draws
    rng = np.random.default_rng(hash(name) % 2**32)
    op = PRIMITIVES[name]
    worst = 0.0
    for _ in range(17):  # 17 draws x 6 components > 100 random points
        t = Tensor(rng.normal(0.0, 1.0, size=(2, 3)), requires_grad=True)
        c = Tensor(rng.normal(0.0, 1.0, size=(2, 3)) + 2.0)
        if name == "clip":
            # keep points away from the kink where the derivative jumps
            t.data[np.abs(np.abs(t.data) - 0.75) < 1e-3] += 0.01
        worst = max(worst, finite_difference_check(lambda p: op(p, c), t))
    assert worst < 1e-5


def test_embedding_forward_and_scatter_grad():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = embedding(table, np.array([[0, 2], [1, 1]]))
    assert np.array_equal(out.data[0, 1], table.data[2])
    backward(out.sum())
    assert np.array_equal(table.grad[1], [2.0, 2.0, 2.0])
    assert np.array_equal(table.grad[3], [0.0, 0.0, 0.0])


def test_embedding_rejects_out_of_range():
    with pytest.raises(ShapeError, match="out of range"):
        embedding(Tensor(np.zeros((4, 3))), np.array([4]))


def test_masked_cross_entropy_hand_value():
    logits = Tensor([[2.0, 0.0], [0.0, 2.0]], requires_grad=True)
    loss = masked_cross_entropy(logits, np.array([0, 1]), np.array([True, True]))
    assert loss.item() == pytest.approx(0.126928, abs=1e-6)


def test_masked_cross_entropy_ignores_masked_rows():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    full = masked_cross_entropy(logits, np.array([1, 2, 3]), np.array([True, False, True]))
    # changing the masked-out row's target must not change the loss
    other = masked_cross_entropy(logits, np.array([1, 4, 3]), np.array([True, False, True]))
    assert full.item() == other.item()


def test_masked_cross_entropy_requires_some_mask():
    with pytest.raises(ValueError, match="no positions"):
        masked_cross_entropy(Tensor(np.zeros((2, 3))), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))


def test_masked_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = np.array([0, 5, 2, 1])
    mask = np.array([True, True, False, True])
    err = finite_difference_check(lambda t: masked_cross_entropy(t, targets, mask), logits)
    assert err < 1e-7


def test_backward_linearity():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    a, b = 2.5, -1.25

    def grad_of(fn):
        x.zero_grad()
        backward(fn(x))
        return x.grad.copy()

    f = lambda t: (t * t).sum()
    g = lambda t: t.tanh().sum()
    combined = grad_of(lambda t: a * f(t) + b * g(t))
    separate = a * grad_of(f) + b * grad_of(g)
    assert np.allclose(combined, separate, atol=1e-12)


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = matmul(x, x).softmax(axis=1).sum()
        backward(y)
        return y.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_forward_backward_stay_finite():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(scale=10.0, size=(5, 5)), requires_grad=True)
    out = (matmul(x, x).softmax(axis=1) * x.sigmoid()).sum()
    backward(out)
    assert np.isfinite(out.data).all()
    assert np.isfinite(x.grad).all()


def test_computation_record_topological_and_replayable():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum() + x.mean()
    record = computation_record(y)
    assert isinstance(record, ComputationRecord)
    seen = set()
    for node in record.nodes:
        for parent in node._parents:
            assert id(parent) in seen, "inputs must precede each operation"
        seen.add(id(node))
    assert record.replay_matches()
    assert set(record.ops()) >= {"mul", "sum", "mean", "add"}


def test_finite_difference_check_examples():
    x = Tensor([3.0], requires_grad=True)
    assert finite_difference_check(lambda t: (t * t).sum(), x) < 1e-8
    const = Tensor([1.0], requires_grad=True)
    assert finite_difference_check(lambda t: Tensor(4.0) + 0.0 * t.sum(), const) == 0.0


def test_finite_difference_check_epsilon_range():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="epsilon"):
        finite_difference_check(lambda t: (t * t).sum(), x, epsilon=1e-2)


def test_grad_shape_matches_data_shape():
    x = Tensor(np.zeros((2, 1, 3)), requires_grad=True)
    y = Tensor(np.ones((5, 2, 4, 3)))
    backward((x + y).sum())
    assert x.grad.shape == x.data.shape
