import math

import numpy as np
import pytest

from fedbat.binarizer import IDENTITY, StepSizeParam, init_step_size
from fedbat.datasets import LabeledDataset
from fedbat.nn import (
    MLP,
    Binarized,
    GlobalModel,
    Plain,
    Shifted,
    StaleCacheError,
    backward,
    evaluate,
    forward,
    sgd_step,
)
from fedbat.tensor import DimensionError, SeededRng


def scalar_reference_loss(sizes, layers, X, y):
    """Loop-by-loop MLP + softmax cross-entropy, written without numpy linear algebra."""
    total = 0.0
    for row, label in zip(X.tolist(), y.tolist()):
        h = row
        for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p = layers[li].tolist()
            out = []
            for j in range(b):
                s = p[b * a + j]
                for i in range(a):
                    s += p[j * a + i] * h[i]
                out.append(s)
            h = [max(v, 0.0) for v in out] if li < len(sizes) - 2 else out
        mx = max(h)
        lse = mx + math.log(sum(math.exp(v - mx) for v in h))
        total += lse - h[label]
    return total / len(y)


@pytest.fixture
def small():
    arch = MLP([4, 8, 5, 3])
    rng = SeededRng(2024)
    model = GlobalModel(arch, arch.init_params(rng.split("init")))
    X = rng.split("x").uniform((6, 4))
    y = np.array([0, 1, 2, 1, 0, 2])
    return model, (X, y)


def test_layer_specs():
    arch = MLP([4, 8, 5, 3])
    assert [s.kind for s in arch.specs] == ["dense", "relu", "dense", "relu", "dense", "softmax-xent"]
    assert arch.layer_sizes == [40, 45, 18]


def test_zero_weights_give_log_classes():
    arch = MLP([5, 7])
    model = GlobalModel(arch, [np.zeros(arch.layer_sizes[0])])
    X = SeededRng(0).uniform((9, 5))
    loss, _ = forward(model, Plain(), (X, np.arange(9) % 7))
    assert loss == pytest.approx(math.log(7), abs=1e-15)


def test_golden_loss_matches_scalar_reference(small):
    model, batch = small
    loss, _ = forward(model, Plain(), batch)
    ref = scalar_reference_loss(model.arch.sizes, model.layers, *batch)
    assert loss == pytest.approx(ref, rel=1e-12)
    assert loss == pytest.approx(2.284365204667792, rel=1e-12)


def test_shifted_gradient_matches_finite_differences(small):
    model, batch = small
    m = [0.1 * SeededRng(5).split(i).normal_array(p.size) for i, p in enumerate(model.layers)]
    _, cache = forward(model, Shifted(m), batch)
    grads = backward(cache).params
    h = 1e-5
    worst = 0.0
    for li in range(len(m)):
        for j in range(m[li].size):
            up = [v.copy() for v in m]
            dn = [v.copy() for v in m]
            up[li][j] += h
            dn[li][j] -= h
            fd = (forward(model, Shifted(up), batch)[0] - forward(model, Shifted(dn), batch)[0]) / (2 * h)
            a = grads[li][j]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    assert worst <= 1e-4


def test_plain_gradient_equals_shifted_at_zero(small):
    model, batch = small
    _, c1 = forward(model, Plain(), batch)
    _, c2 = forward(model, Shifted([np.zeros_like(p) for p in model.layers]), batch)
    for a, b in zip(backward(c1).params, backward(c2).params):
        assert np.array_equal(a, b)


def test_binarized_at_floor_step_size_is_finite(small):
    model, batch = small
    m = [np.zeros_like(p) for p in model.layers]
    steps = [init_step_size(v) for v in m]
    loss, cache = forward(model, Binarized(m, steps, SeededRng(1)), batch)
    assert math.isfinite(loss)
    for rec in cache.records:
        assert rec.alpha == 1e-8


def test_binarized_outer_branches_mask_all_gradients(small):
    model, batch = small
    m = [np.where(np.arange(p.size) % 2 == 0, 1.0, -1.0) for p in model.layers]
    steps = [StepSizeParam(0.5, 0.0, 6.0) for _ in m]
    _, cache = forward(model, Binarized(m, steps, SeededRng(1)), batch)
    g = backward(cache)
    assert all(np.all(gm == 0.0) for gm in g.params)
    assert len(g.alpha_e) == len(m)


def test_identity_binarizer_reproduces_shifted_mode(small):
    model, batch = small
    m = [0.05 * SeededRng(9).split(i).normal_array(p.size) for i, p in enumerate(model.layers)]
    steps = [init_step_size(v) for v in m]
    l1, c1 = forward(model, Shifted(m), batch)
    l2, c2 = forward(model, Binarized(m, steps, SeededRng(0), IDENTITY), batch)
    assert l1 == l2
    for a, b in zip(backward(c1).params, backward(c2).params):
        assert np.array_equal(a, b)


def test_backward_rejects_reused_cache(small):
    model, batch = small
    _, cache = forward(model, Plain(), batch)
    backward(cache)
    with pytest.raises(StaleCacheError):
        backward(cache)


def test_forward_input_checks(small):
    model, (X, y) = small
    with pytest.raises(DimensionError):
        forward(model, Plain(), (X[:, :3], y))
    with pytest.raises(ValueError):
        forward(model, Plain(), (X, np.array([0, 1, 2, 3, 0, 1])))


def test_sgd_step():
    assert sgd_step([np.array([1.0])], [np.array([2.0])], 0.1)[0].tolist() == [0.8]
    p = [np.array([1.0, -2.0])]
    assert np.array_equal(sgd_step(p, [np.zeros(2)], 0.5)[0], p[0])
    g = [np.array([0.3, 0.7])]
    assert np.array_equal(sgd_step(p, g, 0.25)[0], p[0] - 0.25 * g[0])
    with pytest.raises(DimensionError):
        sgd_step(p, [np.zeros(3)], 0.1)


def test_evaluate_uniform_logits_ties_to_lowest_class():
    arch = MLP([3, 4])
    model = GlobalModel(arch, [np.zeros(arch.layer_sizes[0])])
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    data = LabeledDataset(SeededRng(0).uniform((8, 3)), labels, 4)
    acc, loss = evaluate(model, data)
    assert acc == 0.25
    assert loss == pytest.approx(math.log(4))


def test_evaluate_oracle_weights_separate_perfectly():
    centers = np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]])
    arch = MLP([2, 3])
    W = centers
    b = -0.5 * np.sum(centers**2, axis=1)
    model = GlobalModel(arch, [np.concatenate([W.reshape(-1), b])])
    data = LabeledDataset(np.repeat(centers, 5, axis=0), np.repeat(np.arange(3), 5), 3)
    assert evaluate(model, data)[0] == 1.0


def test_evaluate_rejects_empty():
    arch = MLP([2, 3])
    model = GlobalModel(arch, [np.zeros(9)])
    with pytest.raises(ValueError):
        evaluate(model, LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3))


def test_plain_sgd_decreases_loss_on_separable_data():
    rng = SeededRng(4)
    X = np.vstack([rng.uniform((20, 2)) * 0.3, 0.7 + rng.uniform((20, 2)) * 0.3])
    y = np.repeat([0, 1], 20)
    arch = MLP([2, 6, 2])
    model = GlobalModel(arch, arch.init_params(rng.split("init")))
    first, _ = forward(model, Plain(), (X, y))
    for _ in range(50):
        loss, cache = forward(model, Plain(), (X, y))
        model.layers = sgd_step(model.layers, backward(cache).params, 0.5)
    last, _ = forward(model, Plain(), (X, y))
    assert last < first
