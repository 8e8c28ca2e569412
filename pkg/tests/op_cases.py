"""Gradient-check cases covering every differentiable op of the tensor engine."""

import numpy as np

from grunlab.nn import tensor as T


def op_cases(seed: int = 1) -> dict:
    """name -> (scalar function of float64 tensors, sampler returning its inputs)."""
    rng = np.random.default_rng(seed)
    pos = lambda: rng.uniform(0.5, 2.0, size=(3, 4))
    any_ = lambda: rng.normal(size=(3, 4))
    # away from kinks and from 0 (x^3 central differences carry an error of step^2)
    signed = lambda lo, hi: lambda: rng.choice([-1, 1], size=(3, 4)) * rng.uniform(lo, hi, size=(3, 4))
    one = lambda f: lambda: [f()]
    pair = lambda: [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(4,))]
    w = np.arange(12.0).reshape(3, 4)

    def ln_point():
        return [rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)]

    ln_w = rng.normal(size=(2, 3, 5))
    ids = rng.integers(0, 6, size=(2, 4))
    tg = rng.integers(0, 7, size=(2, 4))
    mask = (rng.uniform(size=(2, 4)) > 0.3).astype(float)
    mask[0, 0] = 1.0
    ce_w = rng.normal(size=(2, 4))
    return {
        "exp": (lambda a: T.exp(a).sum(), one(any_)),
        "log": (lambda a: T.log(a).sum(), one(pos)),
        "tanh": (lambda a: T.tanh(a).sum(), one(any_)),
        "sigmoid": (lambda a: (T.sigmoid(a) * a).sum(), one(any_)),
        "softplus": (lambda a: T.softplus(a).sum(), one(any_)),
        "gelu": (lambda a: (T.gelu(a) * a).sum(), one(any_)),
        "relu": (lambda a: (T.relu(a) * a).sum(), one(signed(0.2, 1.0))),
        "clip": (lambda a: (T.clip(a, -0.5, 0.5) * a).sum(), one(signed(0.6, 1.0))),
        "softmax": (lambda a: (T.softmax(a) * np.arange(4.0)).sum(), one(any_)),
        "log_softmax": (lambda a: (T.log_softmax(a) * np.arange(4.0)).sum(), one(any_)),
        "mean": (lambda a: (a.mean(axis=0) ** 2).sum(), one(any_)),
        "sum": (lambda a: (a.sum(axis=1, keepdims=True) ** 2).sum(), one(any_)),
        "power": (lambda a: (a ** 3.0).sum(), one(signed(0.5, 2.0))),
        "scale_neg": (lambda a: (-T.scale(a, 2.5)).sum() + (a * a).sum(), one(any_)),
        "reshape_transpose": (lambda a: (a.reshape(4, 3).T * w).sum(), one(any_)),
        "swapaxes": (lambda a: (T.swapaxes(a, 0, 1) ** 2 * w.T).sum(), one(any_)),
        "getitem_slice": (lambda a: (a[1:, ::2] ** 2).sum(), one(any_)),
        "getitem_fancy": (lambda a: (a[np.array([0, 0, 2]), np.array([1, 1, 3])] ** 2).sum(), one(any_)),
        "index_put": (lambda a: (T.index_put(a, (np.array([1]), np.array([2])), a[0:1, 0] * 3.0) ** 2).sum(),
                      one(any_)),
        "concat": (lambda a: (T.concat([a, a * 2.0], axis=1) ** 2).sum(), one(any_)),
        "stack": (lambda a: (T.stack([a, a * a], axis=0) * 1.5).sum(), one(any_)),
        "add": (lambda a, b: ((a + b) ** 2).sum(), pair),
        "sub": (lambda a, b: ((a - b) ** 2).sum(), pair),
        "mul": (lambda a, b: (a * b * a).sum(), pair),
        "div": (lambda a, b: (a / b).sum(), pair),
        "matmul": (lambda a, b: ((a @ b.reshape(4, 1)) ** 2).sum(), pair),
        "layer_norm": (lambda x, g, b: (T.layer_norm(x, g, b) * ln_w).sum(), ln_point),
        "embedding": (lambda t: (T.embedding(t, ids) ** 2).sum(), lambda: [rng.normal(size=(6, 3))]),
        "cross_entropy_mean": (lambda z: T.cross_entropy(z, tg, mask, "mean"), lambda: [rng.normal(size=(2, 4, 7))]),
        "cross_entropy_sum": (lambda z: T.cross_entropy(z, tg, mask, "sum"), lambda: [rng.normal(size=(2, 4, 7))]),
        "cross_entropy_none": (lambda z: (T.cross_entropy(z, tg, mask, "none") * ce_w).sum(),
                               lambda: [rng.normal(size=(2, 4, 7))]),
    }
