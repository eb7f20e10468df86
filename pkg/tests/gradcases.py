"""Seeded finite-difference cases for every primitive, shared by unit and acceptance tests."""

import numpy as np

from mpath import autograd as ag
from mpath.autograd import Tensor


def _p(rng, *shape, name="x", positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True, dtype=np.float64, name=name)


def _weights(rng, shape):
    # fixed random projection turns any output into a scalar with nontrivial gradient
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _scalarize(rng, out_fn):
    w = {}

    def f():
        y = out_fn()
        if y.data.size == 1:
            return y
        if "w" not in w:
            w["w"] = _weights(rng, y.shape)
        return ag.reduce_sum(ag.mul(y, w["w"]))

    return f


def case_add(rng):
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 4, name="b")
    return _scalarize(rng, lambda: ag.add(a, b)), [a, b]


def case_sub(rng):
    a, b = _p(rng, 2, 3, name="a"), _p(rng, 2, 1, name="b")
    return _scalarize(rng, lambda: ag.sub(a, b)), [a, b]


def case_mul(rng):
    a, b = _p(rng, 2, 3, 4, name="a"), _p(rng, 3, 1, name="b")
    return _scalarize(rng, lambda: ag.mul(a, b)), [a, b]


def case_scale(rng):
    a = _p(rng, 5, name="a")
    return _scalarize(rng, lambda: ag.scale(a, -1.7)), [a]


def case_relu(rng):
    a = _p(rng, 4, 5, name="a")
    return _scalarize(rng, lambda: ag.relu(a)), [a]


def case_matmul(rng):
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 4, 2, name="b")
    return _scalarize(rng, lambda: ag.matmul(a, b)), [a, b]


def case_matmul_batched(rng):
    a, b = _p(rng, 2, 3, 4, name="a"), _p(rng, 4, 5, name="b")
    return _scalarize(rng, lambda: ag.matmul(a, b)), [a, b]


def case_matmul_4d(rng):
    a, b = _p(rng, 2, 2, 3, 4, name="a"), _p(rng, 2, 2, 4, 3, name="b")
    return _scalarize(rng, lambda: ag.matmul(a, b)), [a, b]


def case_transpose(rng):
    a = _p(rng, 2, 3, 4, name="a")
    return _scalarize(rng, lambda: ag.transpose(a, (2, 0, 1))), [a]


def case_reshape(rng):
    a = _p(rng, 2, 6, name="a")
    return _scalarize(rng, lambda: ag.reshape(a, (3, 2, 2))), [a]


def case_concat(rng):
    a, b = _p(rng, 2, 3, name="a"), _p(rng, 4, 3, name="b")
    return _scalarize(rng, lambda: ag.concat([a, b], axis=0)), [a, b]


def case_embedding(rng):
    w = _p(rng, 6, 3, name="w")
    ids = rng.integers(0, 6, size=(2, 5))
    return _scalarize(rng, lambda: ag.embedding(w, ids)), [w]


def case_sum(rng):
    a = _p(rng, 3, 4, name="a")
    return _scalarize(rng, lambda: ag.reduce_sum(a, axis=1)), [a]


def case_mean(rng):
    a = _p(rng, 3, 4, name="a")
    return _scalarize(rng, lambda: ag.mean(a, axis=0)), [a]


def case_mean_all(rng):
    a = _p(rng, 3, 4, name="a")
    return _scalarize(rng, lambda: ag.mean(a)), [a]


def case_softmax(rng):
    a = _p(rng, 3, 5, name="a")
    return _scalarize(rng, lambda: ag.softmax(a)), [a]


def case_layernorm(rng):
    x, g, b = _p(rng, 2, 3, 6, name="x"), _p(rng, 6, name="gamma"), _p(rng, 6, name="beta")
    return _scalarize(rng, lambda: ag.layernorm(x, g, b)), [x, g, b]


def case_cross_entropy(rng):
    logits = _p(rng, 4, 5, name="logits")
    targets = rng.integers(0, 5, size=4)
    return (lambda: ag.cross_entropy(logits, targets)), [logits]


def case_cross_entropy_ignore(rng):
    logits = _p(rng, 6, 5, name="logits")
    targets = rng.integers(0, 5, size=6)
    targets[0] = 0
    return (lambda: ag.cross_entropy(logits, targets, ignore_index=0)), [logits]


def case_bce(rng):
    logits = _p(rng, 3, 4, name="logits")
    targets = rng.integers(0, 2, size=(3, 4))
    return (lambda: ag.bce_logits(logits, targets)), [logits]


def case_mlp3(rng):
    """Three-layer ReLU MLP with a cross-entropy head."""
    x = Tensor(rng.normal(size=(5, 6)), dtype=np.float64)
    params = [
        _p(rng, 8, 6, name="W1"),
        _p(rng, 8, name="b1"),
        _p(rng, 7, 8, name="W2"),
        _p(rng, 7, name="b2"),
        _p(rng, 4, 7, name="W3"),
        _p(rng, 4, name="b3"),
    ]
    targets = rng.integers(0, 4, size=5)
    W1, b1, W2, b2, W3, b3 = params

    def f():
        h = ag.relu(ag.linear(x, W1, b1))
        h = ag.relu(ag.linear(h, W2, b2))
        return ag.cross_entropy(ag.linear(h, W3, b3), targets)

    return f, params


PRIMITIVE_CASES = {
    name.removeprefix("case_"): fn for name, fn in globals().items() if name.startswith("case_")
}
