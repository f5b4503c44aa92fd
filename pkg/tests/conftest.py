from __future__ import annotations

import numpy as np
import pytest

from dslab.data import make_synthetic_images, write_cifar10_tree


@pytest.fixture(scope="session")
def standin_cifar(tmp_path_factory):
    """CIFAR-10-format archive of synthetic images (100 train / 20 val per class)."""
    root = tmp_path_factory.mktemp("standin_cifar")
    train = make_synthetic_images(10, 100, seed=0, split="train")
    val = make_synthetic_images(10, 20, seed=0, split="val")
    write_cifar10_tree(train, val, root)
    return root


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
