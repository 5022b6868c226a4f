import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fddrsma.svgplot import line_chart, nice_ticks

NS = "{http://www.w3.org/2000/svg}"


def test_nice_ticks_simple_range():
    np.testing.assert_allclose(nice_ticks(0, 10), [0, 2, 4, 6, 8, 10])


def test_nice_ticks_degenerate_range():
    t = nice_ticks(3.0, 3.0)
    assert t[0] <= 3.0 <= t[-1] and t.size >= 2


def test_nice_ticks_rejects_nonfinite():
    with pytest.raises(ValueError):
        nice_ticks(0, math.inf)


@given(lo=st.floats(-1e6, 1e6), span=st.floats(1e-6, 1e6))
def test_nice_ticks_cover_range(lo, span):
    hi = lo + span
    t = nice_ticks(lo, hi)
    step = t[1] - t[0]
    assert t[0] <= lo + 1e-9 * abs(step) and t[-1] >= hi - 1e-9 * abs(step)
    assert 2 <= t.size <= 12


def test_labels_are_escaped():
    svg = line_chart([("a<b & c", [0, 1], [0, 1])], "x < y", "f & g", "h")
    root = ET.fromstring(svg.split("\n", 1)[1])
    texts = [t.text for t in root.iter(NS + "text")]
    assert "a<b & c" in texts and "x < y" in texts


def test_nonfinite_points_dropped():
    svg = line_chart([("s", [0, 1, 2], [1.0, math.nan, 3.0]), ("empty", [0], [math.inf])], "t", "x", "y")
    root = ET.fromstring(svg.split("\n", 1)[1])
    assert len(root.findall(NS + "polyline")) == 1
    assert "empty" in [t.text for t in root.iter(NS + "text")]


def test_empty_series_rejected():
    with pytest.raises(ValueError):
        line_chart([], "t", "x", "y")
