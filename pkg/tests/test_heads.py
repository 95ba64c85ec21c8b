import math

import mpmath
import numpy as np
import pytest

from mtlforge.encoder import ConfigError
from mtlforge.heads import (
    LabelSpace,
    TaskHead,
    check_lambda,
    combined_loss,
    cross_entropy,
    head_forward,
    init_head,
    predict,
)
from mtlforge.tensor import ShapeError, Tape, Tensor, backward

mpmath.mp.dps = 50
SPACE3 = LabelSpace("t", ("a", "b", "c"))


def head(W, b, space=SPACE3):
    return TaskHead(Tensor(np.asarray(W, float), requires_grad=True), Tensor(np.asarray(b, float), requires_grad=True), space)


def ce_oracle(logits, targets):
    total = mpmath.mpf(0)
    for row, t in zip(logits, targets):
        z = mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row)
        total += -mpmath.log(mpmath.exp(mpmath.mpf(float(row[t]))) / z)
    return float(total / len(targets))


def test_label_space_validation():
    with pytest.raises(ValueError):
        LabelSpace("x", ("only",))
    with pytest.raises(ValueError):
        LabelSpace("x", ("a", "a"))
    assert SPACE3.K == 3 and SPACE3.index("c") == 2
    with pytest.raises(KeyError):
        SPACE3.index("z")


def test_head_forward_bias_only():
    h = head(np.zeros((4, 3)), [1, 2, 3])
    out = head_forward(h, Tensor(np.random.default_rng(0).standard_normal((5, 4)))).data
    assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))
    h2 = head(np.random.default_rng(1).standard_normal((4, 3)), [1, 2, 3])
    assert np.array_equal(head_forward(h2, Tensor(np.zeros((2, 4)))).data, np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_head_forward_matches_triple_loop():
    rng = np.random.default_rng(2)
    pooled = rng.standard_normal((2, 4))
    W = np.arange(12.0).reshape(4, 3) / 7 - 0.5
    b = np.array([0.1, -0.2, 0.3])
    oracle = [[sum(pooled[i, t] * W[t, j] for t in range(4)) + b[j] for j in range(3)] for i in range(2)]
    assert np.max(np.abs(head_forward(head(W, b), Tensor(pooled)).data - oracle)) < 1e-12


def test_head_shape_errors():
    with pytest.raises(ShapeError):
        head(np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        head_forward(head(np.zeros((4, 3)), np.zeros(3)), Tensor(np.zeros((2, 5))))


def test_cross_entropy_uniform_is_log_k():
    loss = cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item()
    assert abs(loss - math.log(7)) < 1e-15
    assert abs(loss - 1.945910) < 1e-6


def test_cross_entropy_confident_correct():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 50.0
    assert 0 <= cross_entropy(Tensor(logits), [1, 3]).item() < 1e-20


def test_cross_entropy_high_precision():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 5)) * 4
    targets = [4, 0, 2]
    assert abs(cross_entropy(Tensor(logits), targets).item() - ce_oracle(logits, targets)) < 1e-12


def test_cross_entropy_nonnegative_and_validated():
    rng = np.random.default_rng(4)
    for _ in range(20):
        logits = rng.standard_normal((4, 3)) * 10
        assert cross_entropy(Tensor(logits), rng.integers(0, 3, 4)).item() >= 0
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_combined_loss_arithmetic_and_boundaries():
    l1, l2 = Tensor(2.0), Tensor(1.0)
    assert combined_loss(l1, l2, 0.7).item() == pytest.approx(1.7, abs=1e-15)
    assert combined_loss(l1, l2, 1.0).item() == 2.0
    assert combined_loss(l1, l2, 0.0).item() == 1.0
    for bad in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            check_lambda(bad)


def _two_head_grads(lam, which="both"):
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((5, 4)))
    shared = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    h1 = init_head(LabelSpace("p", tuple("abcd")), 4, 0, 0)
    h2 = init_head(LabelSpace("e", tuple("abcdefg")), 4, 0, 1)
    y1, y2 = rng.integers(0, 4, 5), rng.integers(0, 7, 5)
    with Tape() as tape:
        z = x @ shared
        l1 = cross_entropy(head_forward(h1, z), y1)
        l2 = cross_entropy(head_forward(h2, z), y2)
        loss = {"both": lambda: combined_loss(l1, l2, lam), "l1": lambda: l1, "l2": lambda: l2}[which]()
    backward(loss, tape)
    tensors = [shared, h1.W, h1.b, h2.W, h2.b]
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors], (l1.item(), l2.item())


def test_lambda_one_leaves_auxiliary_head_without_gradient():
    grads, _ = _two_head_grads(1.0)
    assert not grads[3].any() and not grads[4].any()


def test_combined_gradient_is_weighted_sum():
    g1, _ = _two_head_grads(0.0, "l1")
    g2, _ = _two_head_grads(0.0, "l2")
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        g, _ = _two_head_grads(lam)
        for a, b, c in zip(g, g1, g2):
            assert np.max(np.abs(a - (lam * b + (1 - lam) * c))) < 1e-10


def test_loss_is_affine_in_lambda():
    _, (l1, l2) = _two_head_grads(0.5)
    values = [combined_loss(Tensor(l1), Tensor(l2), lam).item() for lam in (0, 0.25, 0.5, 0.75, 1)]
    steps = np.diff(values)
    assert np.allclose(steps, steps[0], atol=1e-14)
    # d L / d l2 = 1 - lam shrinks as lam grows
    weights = []
    for lam in (0.0, 0.5, 1.0):
        l2t = Tensor(1.0, requires_grad=True)
        with Tape() as tape:
            out = combined_loss(Tensor(3.0), l2t, lam)
        backward(out, tape)
        weights.append(l2t.grad.item())
    assert weights == [1.0, 0.5, 0.0]


def test_predict_tie_break_and_shift_invariance():
    h = head(np.zeros((2, 3)), np.zeros(3))
    labels, probs = predict(h, Tensor(np.ones((4, 2))))
    assert np.all(labels == 0) and np.allclose(probs, 1 / 3)
    rng = np.random.default_rng(7)
    W, b = rng.standard_normal((2, 3)), rng.standard_normal(3)
    pooled = Tensor(rng.standard_normal((50, 2)))
    base, _ = predict(head(W, b), pooled)
    shifted, _ = predict(head(W, b + 123.0), pooled)
    assert np.array_equal(base, shifted)


def test_predict_matches_linear_scan():
    rng = np.random.default_rng(8)
    W, b = rng.standard_normal((3, 3)), rng.standard_normal(3)
    pooled = rng.standard_normal((40, 3))
    labels, probs = predict(head(W, b), Tensor(pooled))
    logits = pooled @ W + b
    for row, got in zip(logits, labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        assert got == best
    assert np.allclose(probs.sum(1), 1.0)
