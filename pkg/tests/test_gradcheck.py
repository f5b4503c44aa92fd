from __future__ import annotations

import numpy as np

from dslab import gradcheck


def test_every_op_passes_on_a_few_seeds():
    results = gradcheck.run(seeds=3)
    worst = gradcheck.worst_by_op(results)
    assert set(worst) == set(gradcheck.OPS)
    assert max(r.max_rel_err for r in results) <= gradcheck.TOLERANCE


def test_run_is_reproducible():
    a = gradcheck.run(seeds=2, ops=("conv2d", "batchnorm2d_train"))
    b = gradcheck.run(seeds=2, ops=("conv2d", "batchnorm2d_train"))
    assert [r.max_rel_err for r in a] == [r.max_rel_err for r in b]


def test_harness_catches_a_wrong_gradient():
    from dslab import tensor as T

    def bad_relu(x):
        out = T.relu(x)
        if out._node is None:  # numeric pass under no_grad
            return out
        fn = out._node.backward_fn
        out._node.backward_fn = lambda g: tuple(2.0 * v for v in fn(g))
        return out

    rng = np.random.default_rng(0)
    err = gradcheck.check(bad_relu, [rng.standard_normal((3, 4)) + 0.5], rng)
    assert err > 0.1


def test_relative_error_is_zero_for_identical_arrays():
    a = np.arange(6.0)
    assert gradcheck.relative_error(a, a) == 0.0
