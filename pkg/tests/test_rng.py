from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from dslab import rng


def test_streams_depend_only_on_seed_and_name():
    a = rng.normal(7, "block1.layer1.conv.weight", (4, 3), 1.0)
    rng.normal(7, "something.else", (100,), 1.0)
    b = rng.normal(7, "block1.layer1.conv.weight", (4, 3), 1.0)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rng.normal(8, "block1.layer1.conv.weight", (4, 3), 1.0))
    assert not np.array_equal(a, rng.normal(7, "block1.layer2.conv.weight", (4, 3), 1.0))


def test_box_muller_moments():
    z = rng.box_muller(rng.stream(0, "moments"), 200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    # fourth moment of a standard normal is 3
    assert abs(np.mean(z**4) - 3.0) < 0.1


def test_box_muller_matches_hand_transform():
    g1, g2 = rng.stream(3, "x"), rng.stream(3, "x")
    z = rng.box_muller(g1, 4)
    u1 = 1.0 - g2.random(2)
    u2 = g2.random(2)
    r = np.sqrt(-2 * np.log(u1))
    np.testing.assert_allclose(z, [r[0] * np.cos(2 * np.pi * u2[0]), r[0] * np.sin(2 * np.pi * u2[0]),
                                   r[1] * np.cos(2 * np.pi * u2[1]), r[1] * np.sin(2 * np.pi * u2[1])])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.text(min_size=1, max_size=20), st.floats(0.01, 10))
def test_normal_scales_linearly_with_std(seed, name, std):
    base = rng.normal(seed, name, (5,), 1.0)
    np.testing.assert_allclose(rng.normal(seed, name, (5,), std), std * base, rtol=1e-15)
