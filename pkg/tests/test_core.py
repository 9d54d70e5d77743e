import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mitodet.core import (Annotation, Detection, ImageRef, Label, Point, ProbabilityMap, Stage,
                          check_raster, distance)

coords = st.floats(-1e4, 1e4, allow_nan=False)
points = st.builds(Point, coords, coords)


@pytest.mark.parametrize("a, b, expected", [
    ((0, 0), (0, 0), 0.0),
    ((0, 0), (3, 4), 5.0),
    ((1, 1), (4, 5), 5.0),  # sqrt(9 + 16)
])
def test_distance_examples(a, b, expected):
    assert distance(Point(*a), Point(*b)) == expected


@given(points, points)
def test_distance_symmetric(a, b):
    assert distance(a, b) == distance(b, a)
    assert distance(a, b) >= 0


@given(points, points, points)
def test_triangle_inequality(a, b, c):
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9


def test_point_rejects_non_finite():
    with pytest.raises(ValueError):
        Point(math.nan, 0)
    with pytest.raises(ValueError):
        Point(0, math.inf)


def test_image_ref_validation():
    with pytest.raises(ValueError):
        ImageRef("a", 0, 10)
    with pytest.raises(ValueError):
        ImageRef("a", 10, 10, mpp=0)
    ref = ImageRef("a", 10, 5, mpp=0.25, group="t1")
    assert ref.contains(Point(9.5, 4.9))
    assert not ref.contains(Point(10, 0))


def test_annotation_label_from_string():
    a = Annotation(Point(1, 2), "hard_negative", "img")
    assert a.label is Label.HARD_NEGATIVE
    with pytest.raises(ValueError):
        Annotation(Point(1, 2), "mitotic", "img")


def test_detection_score_rejected_not_clamped():
    with pytest.raises(ValueError):
        Detection(Point(0, 0), 1.0000001, Stage.SEGMENTATION, "img")
    with pytest.raises(ValueError):
        Detection(Point(0, 0), -0.1, Stage.SEGMENTATION, "img")
    assert Detection(Point(0, 0), 1.0, "verified", "img").stage is Stage.VERIFIED


def test_probability_map_bounds_and_immutability():
    with pytest.raises(ValueError):
        ProbabilityMap(np.array([[0.5, 1.5]]))
    with pytest.raises(ValueError):
        ProbabilityMap(np.zeros(4))
    m = ProbabilityMap(np.full((3, 4), 0.25))
    assert (m.width, m.height) == (4, 3)
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0


def test_check_raster():
    a = check_raster(np.zeros((2, 3, 3), dtype=np.int64))
    assert a.dtype == np.uint8
    with pytest.raises(ValueError):
        check_raster(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        check_raster(np.full((2, 2, 3), 256))
