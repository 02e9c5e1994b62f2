import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madclip.errors import InputError, UndefinedMetricError
from madclip.metrics import as_percent, auroc, pixel_auroc

import oracles


def test_hand_example():
    assert auroc([0.9, 0.3, 0.6, 0.1], [1, 0, 1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.5] * 6, [0, 1] * 3) == 0.5


def test_tied_pair_counts_half():
    # one positive ties one negative, beats the other
    assert auroc([0.5, 0.5, 0.1], [1, 0, 0]) == 0.75


def test_undefined_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(InputError):
        auroc([0.1, 0.2], [1, 2])
    with pytest.raises(InputError):
        auroc([0.1], [1, 0])


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_equals_pair_enumeration(data):
    n = data.draw(st.integers(2, 60))
    labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)))
    scores = data.draw(st.lists(st.integers(0, 6).map(lambda v: v / 4), min_size=n, max_size=n))
    assert auroc(scores, labels) == oracles.pair_auroc(scores, labels)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_monotone_and_complement_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=40)
    y = np.r_[np.zeros(20, int), np.ones(20, int)]
    rng.shuffle(y)
    a = auroc(s, y)
    assert auroc(np.exp(s), y) == a
    assert auroc(3 * s + 1, y) == a
    assert abs(auroc(-s, y) - (1 - a)) < 1e-12


def test_pixel_auroc_pools_pixels():
    rng = np.random.default_rng(0)
    maps = [rng.random((2, 2)) for _ in range(3)]
    masks = [(rng.random((2, 2)) > 0.5).astype(int) for _ in range(3)]
    masks[0][0, 0], masks[0][0, 1] = 1, 0
    flat_s = np.concatenate([m.ravel() for m in maps]).tolist()
    flat_y = np.concatenate([k.ravel() for k in masks]).tolist()
    assert pixel_auroc(maps, masks) == oracles.pair_auroc(flat_s, flat_y)
    with pytest.raises(InputError):
        pixel_auroc(maps, masks[:2])
    with pytest.raises(InputError):
        pixel_auroc([np.zeros((2, 2))], [np.zeros((3, 3))])


def test_as_percent():
    assert as_percent(0.94081) == "94.08"
    assert as_percent(None) == ""
