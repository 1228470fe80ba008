import math

import numpy as np
import pytest

from stylealign.errors import MeasurementUnavailable
from stylealign.measure import ScanSeries, cimt_from_mask, curvature_proxy_from_series


def polyline_series(angles_deg, points_per_segment=12, dz=1.0, x0=0.0):
    """Per-slice single-landmark sets following straight segments at the given inclinations."""
    xs = [x0]
    for a in angles_deg:
        for _ in range(points_per_segment):
            xs.append(xs[-1] + dz * math.tan(math.radians(a)))
    return [np.array([[x, 0.0]]) for x in xs]


class TestCIMT:
    def test_uniform_band(self):
        mask = np.zeros((40, 30), np.uint8)
        mask[10:20] = 1
        assert cimt_from_mask(mask, 0.15) == pytest.approx(1.5)

    def test_two_heights(self):
        mask = np.zeros((40, 2), np.uint8)
        mask[5:15, 0] = 1
        mask[5:17, 1] = 1
        assert cimt_from_mask(mask, 0.15) == pytest.approx(1.65)

    def test_hole_does_not_shorten(self):
        mask = np.zeros((20, 3), np.uint8)
        mask[2:12] = 1
        mask[6, 1] = 0
        assert cimt_from_mask(mask, 1.0) == pytest.approx(10.0)

    def test_linear_in_spacing(self):
        mask = np.zeros((20, 5), np.uint8)
        mask[3:9, 1:4] = 1
        assert cimt_from_mask(mask, 0.3) == pytest.approx(2 * cimt_from_mask(mask, 0.15))

    def test_empty(self):
        with pytest.raises(MeasurementUnavailable):
            cimt_from_mask(np.zeros((5, 5)), 0.1)


class TestCurvature:
    def test_vertical(self):
        assert curvature_proxy_from_series(ScanSeries(polyline_series([0, 0]))) == pytest.approx(0.0, abs=1e-9)

    def test_two_segments(self):
        assert curvature_proxy_from_series(ScanSeries(polyline_series([10, -10]))) == pytest.approx(20.0, abs=0.5)

    def test_translation_invariant(self):
        a = curvature_proxy_from_series(ScanSeries(polyline_series([15, -5])))
        b = curvature_proxy_from_series(ScanSeries(polyline_series([15, -5], x0=37.0)))
        assert a == pytest.approx(b)

    def test_uniform_scaling_invariant(self):
        slices = polyline_series([12, -8])
        a = curvature_proxy_from_series(ScanSeries(slices, slice_spacing=1.0, pixel_spacing=1.0))
        b = curvature_proxy_from_series(ScanSeries(slices, slice_spacing=2.5, pixel_spacing=2.5))
        assert a == pytest.approx(b)

    def test_centroid_uses_all_landmarks(self):
        slices = [np.array([[x - 3, 1.0], [x + 3, 9.0]]) for x in np.linspace(0, 20, 25)]
        single = [np.array([[x, 0.0]]) for x in np.linspace(0, 20, 25)]
        assert curvature_proxy_from_series(ScanSeries(slices)) == pytest.approx(curvature_proxy_from_series(ScanSeries(single)))

    def test_too_few_slices(self):
        with pytest.raises(MeasurementUnavailable):
            curvature_proxy_from_series(ScanSeries([np.array([[1.0, 1.0]]), np.zeros((0, 2)), np.array([[2.0, 1.0]])]))

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            ScanSeries([], slice_spacing=0)
