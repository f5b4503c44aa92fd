"""Central finite-difference checks for every op in :mod:`dslab.tensor`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-4
TOLERANCE = 1e-4


@dataclass
class OpCheck:
    op: str
    seed: int
    max_rel_err: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def check(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error over all inputs of ``sum(fn(*inputs) * R)`` for a random R."""
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with T.no_grad():
            return float(np.sum(fn(*leaves).data * proj))

    weighted = _project(out, proj)
    T.backward(weighted)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(scalar, leaf.data)
        worst = max(worst, relative_error(leaf.grad, num))
    return worst


def _project(out: Tensor, proj: np.ndarray) -> Tensor:
    # sum(out * proj) written with the closed op set: a linear map onto one row
    flat_w = Tensor(proj.reshape(1, -1))
    if out.ndim == 0:
        return T.scalar_mul(out, float(proj))
    rows = _flatten(out)
    return T.sum(T.linear(rows, flat_w))


def _flatten(t: Tensor) -> Tensor:
    data = t.data.reshape(1, -1)
    shape = t.shape

    def bw(g):
        return (g.reshape(shape),)

    return T._result(data, (t,), "flatten", bw)


def _away_from_zero(a: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    small = np.abs(a) < margin
    a[small] = np.where(a[small] >= 0, margin, -margin) * 2
    return a


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = lambda *s: rng.standard_normal(s)  # noqa: E731
    labels = rng.integers(0, 5, size=4)
    bn_rm, bn_rv = np.zeros(3), np.ones(3)
    stride = int(rng.integers(1, 3))
    return {
        "matmul": (T.matmul, [n(3, 4), n(4, 2)]),
        "linear": (T.linear, [n(4, 5), n(3, 5), n(3)]),
        "conv2d": (
            lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=1, method="im2col"),
            [n(2, 3, 5, 5), n(4, 3, 3, 3), n(4)],
        ),
        "conv2d_kn2row": (
            lambda x, w, b: T.conv2d(x, w, b, padding=1, method="kn2row"),
            [n(2, 5, 4, 4), n(3, 5, 3, 3), n(3)],
        ),
        "add": (T.add, [n(2, 3, 4), n(1, 3, 1)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n(2, 3, 2, 2), n(2, 2, 2, 2)]),
        "relu": (T.relu, [_away_from_zero(n(3, 4))]),
        "batchnorm2d_train": (
            lambda x, g, b: T.batchnorm2d(x, g, b, bn_rm.copy(), bn_rv.copy(), training=True),
            [n(4, 3, 2, 2), 1 + 0.1 * n(3), n(3)],
        ),
        "batchnorm2d_eval": (
            lambda x, g, b: T.batchnorm2d(x, g, b, np.full(3, 0.2), np.full(3, 1.5), training=False),
            [n(4, 3, 2, 2), 1 + 0.1 * n(3), n(3)],
        ),
        "global_avg_pool": (T.global_avg_pool, [n(2, 3, 3, 3)]),
        "softmax_cross_entropy": (
            lambda z: T.softmax_cross_entropy(z, labels),
            [n(4, 5)],
        ),
        "scalar_mul": (lambda x, s: T.scalar_mul(T.scalar_mul(x, 0.7), s), [n(3, 4), n(1)]),
        "sum": (T.sum, [n(3, 4)]),
    }


OPS = tuple(_cases(np.random.default_rng(0)))


def run(seeds: int = 20, ops: tuple[str, ...] | None = None) -> list[OpCheck]:
    results = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in _cases(rng).items():
            if ops and name not in ops:
                continue
            results.append(OpCheck(name, seed, check(fn, inputs, rng)))
    return results


def worst_by_op(results: list[OpCheck]) -> dict[str, OpCheck]:
    worst: dict[str, OpCheck] = {}
    for r in results:
        if r.op not in worst or r.max_rel_err > worst[r.op].max_rel_err:
            worst[r.op] = r
    return worst
