import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nirburst import autodiff as ad
from nirburst.errors import ConfigError, UsageError
from nirburst.formation import cfa_mask, compose, interference_channels, split_interference

unit = st.floats(0, 1)


def test_additive():
    o, u = np.full((2, 3), 0.25), np.full((2, 3), -0.5)
    np.testing.assert_array_equal(compose("additive", o, u).data, np.full((2, 3), -0.25))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=unit), arrays(np.float64, (4, 3), elements=unit))
def test_fence_endpoints(o, u):
    with ad.precision("float64"):
        zero, one = np.zeros((4, 1)), np.ones((4, 1))
        np.testing.assert_array_equal(compose("fence_alpha", o, u, zero).data, o)
        np.testing.assert_array_equal(compose("fence_alpha", o, u, one).data, u)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=unit), arrays(np.float64, (4, 1), elements=unit))
def test_rain_stays_in_unit_range_and_saturates(o, u):
    with ad.precision("float64"):
        out = compose("rain_achromatic", o, u).data
        assert np.all(out >= -1e-12) and np.all(out <= 1 + 1e-12)
        white = compose("rain_achromatic", o, np.ones((4, 1))).data
        np.testing.assert_array_equal(white, np.ones((4, 3)))


def test_shape_errors():
    with pytest.raises(UsageError):
        compose("additive", np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(UsageError):
        compose("rain_achromatic", np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(UsageError):
        compose("scene_only", np.zeros((2, 3)), np.zeros((2, 3)))


def test_channels_and_split():
    assert [interference_channels(k) for k in ("additive", "fence_alpha", "rain_achromatic",
                                                "scene_only")] == [3, 4, 1, 0]
    raw = ad.tensor(np.arange(8.0).reshape(2, 4))
    u, a = split_interference("fence_alpha", raw)
    np.testing.assert_array_equal(a.data, [[0], [4]])
    np.testing.assert_array_equal(u.data, [[1, 2, 3], [5, 6, 7]])


def test_cfa_masks():
    m = cfa_mask("RGGB", [0, 0, 1, 1], [0, 1, 0, 1])
    np.testing.assert_array_equal(m.argmax(axis=1), [0, 1, 1, 2])
    m = cfa_mask("BGGR", [0, 1], [0, 1])
    np.testing.assert_array_equal(m.argmax(axis=1), [2, 0])
    assert np.all(m.sum(axis=1) == 1)
    with pytest.raises(ConfigError):
        cfa_mask("RGBG", [0], [0])
