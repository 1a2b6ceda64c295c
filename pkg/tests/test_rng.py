import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarfog.rng import derive_seed, substream

names = st.lists(st.one_of(st.integers(0, 2**31), st.text(max_size=8)), max_size=3)


@given(st.integers(0, 2**63), names)
def test_same_key_same_stream(seed, key):
    a = substream(seed, *key).random(4)
    b = substream(seed, *key).random(4)
    np.testing.assert_array_equal(a, b)


def test_different_names_differ():
    assert substream(7, "frame", 1).random() != substream(7, "frame", 2).random()
    assert substream(7, "fog").random() != substream(7, "clear").random()


def test_different_seeds_differ():
    assert substream(1, "x").random() != substream(2, "x").random()


def test_derive_seed_is_stable():
    assert derive_seed(42, "scenario", "boards_15m") == derive_seed(42, "scenario", "boards_15m")
    assert derive_seed(42, "a") != derive_seed(42, "b")


def test_negative_key_rejected():
    with pytest.raises(ValueError):
        substream(0, -1)
