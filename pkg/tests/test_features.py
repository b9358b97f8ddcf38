import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from houghmatch.errors import FormatError, InvalidInputError
from houghmatch.features import FeatureGrid, flatten, load_feature_grid, roi_pool, roi_pool_many, save_feature_grid
from houghmatch.geometry import Box


def brute_pool(data, box, P, cell=1.0):
    """Independent sub-window max: enumerate cells and test window membership."""
    H, W, C = data.shape
    x0, y0, x1, y1 = [v / cell for v in box]
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    out = np.full((P, P, C), -np.inf)
    for i in range(P):
        lo_y = int(np.floor(y0 + (y1 - y0) * i / P))
        hi_y = int(np.ceil(y0 + (y1 - y0) * (i + 1) / P))
        for j in range(P):
            lo_x = int(np.floor(x0 + (x1 - x0) * j / P))
            hi_x = int(np.ceil(x0 + (x1 - x0) * (j + 1) / P))
            lo_yc, lo_xc = min(max(lo_y, 0), H - 1), min(max(lo_x, 0), W - 1)
            hi_yc = max(min(hi_y, H), lo_yc + 1)
            hi_xc = max(min(hi_x, W), lo_xc + 1)
            for r in range(lo_yc, hi_yc):
                for c in range(lo_xc, hi_xc):
                    out[i, j] = np.maximum(out[i, j], data[r, c])
    return out


class TestRoiPool:
    def test_constant_grid(self):
        g = FeatureGrid(np.full((8, 8, 3), 3.0))
        assert np.all(roi_pool(g, Box(1, 1, 6, 7), 7) == 3.0)

    def test_global_max(self):
        g = FeatureGrid(np.array([[1, 2], [3, 4]], dtype=np.float32)[..., None])
        assert roi_pool(g, Box(0, 0, 2, 2), 1).ravel().tolist() == [4.0]

    def test_quadrants(self):
        data = np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1)
        expected = brute_pool(data, (0, 0, 4, 4), 2).ravel()
        assert expected.tolist() == [6, 8, 14, 16]
        got = roi_pool(FeatureGrid(data), Box(0, 0, 4, 4), 2).ravel()
        assert got.tolist() == [6, 8, 14, 16]

    def test_cell_size_scales_box(self):
        data = np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1)
        g = FeatureGrid(data, Fraction(4))
        assert roi_pool(g, Box(0, 0, 16, 16), 2).ravel().tolist() == [6, 8, 14, 16]

    def test_outside_grid_rejected(self):
        g = FeatureGrid(np.zeros((4, 4, 1)))
        with pytest.raises(InvalidInputError):
            roi_pool(g, Box(10, 10, 20, 20), 2)
        with pytest.raises(InvalidInputError):
            roi_pool_many(g, np.array([[0, 0, 2, 2], [10, 10, 20, 20.0]]), 2)

    def test_matches_brute_force(self, rng):
        data = rng.standard_normal((16, 13, 3)).astype(np.float32)
        g = FeatureGrid(data, Fraction(3, 2))
        boxes = []
        for _ in range(40):
            x0, y0 = rng.uniform(-3, 18, 2)
            w, h = rng.uniform(0.2, 12, 2)
            boxes.append([x0, y0, x0 + w, y0 + h])
        boxes = np.array(boxes)
        boxes = boxes[(boxes[:, 0] < 19.5) & (boxes[:, 1] < 24) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0)]
        many = roi_pool_many(g, boxes, 3)
        for k, b in enumerate(boxes):
            ref = brute_pool(data.astype(np.float64), b, 3, cell=1.5)
            assert np.array_equal(roi_pool(g, b[None], 3), ref.astype(np.float32))
            assert np.array_equal(many[k], ref.ravel())

    def test_monotone(self, rng):
        data = rng.standard_normal((10, 10, 2))
        bump = data + np.abs(rng.standard_normal(data.shape))
        b = Box(1.5, 2.2, 8.1, 9.7)
        assert np.all(roi_pool(FeatureGrid(bump), b, 4) >= roi_pool(FeatureGrid(data), b, 4))

    def test_invariant_outside_box(self, rng):
        data = rng.standard_normal((10, 10, 2)).astype(np.float32)
        other = data.copy()
        other[:, 7:] = 100.0
        other[:2] = -100.0
        b = Box(1, 2.5, 6.5, 9)
        assert np.array_equal(roi_pool(FeatureGrid(data), b, 3), roi_pool(FeatureGrid(other), b, 3))

    def test_small_box_non_empty_windows(self):
        g = FeatureGrid(np.arange(25, dtype=np.float32).reshape(5, 5, 1))
        out = roi_pool(g, Box(2.1, 2.2, 2.4, 2.6), 7)
        assert np.all(out == 12.0)


class TestFlatten:
    def test_channels_innermost(self):
        assert flatten(np.array([[[1.0, 2.0]]])).tolist() == [1.0, 2.0]

    def test_zero(self):
        assert not flatten(np.zeros((3, 3, 2))).any()

    def test_row_major(self):
        assert flatten(np.array([[1, 2], [3, 4]], dtype=float)[..., None]).tolist() == [1, 2, 3, 4]


class TestFgrdFormat:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        g = FeatureGrid(rng.standard_normal((5, 7, 3)).astype(np.float32), Fraction(8, 3))
        save_feature_grid(tmp_path / "g.fgrd", g)
        back = load_feature_grid(tmp_path / "g.fgrd")
        assert back == g
        assert back.cell_size == Fraction(8, 3)

    def test_single_value_layout(self, tmp_path):
        save_feature_grid(tmp_path / "g.fgrd", FeatureGrid(np.array([[[0.5]]]), Fraction(1)))
        raw = (tmp_path / "g.fgrd").read_bytes()
        expected = b"FGRD" + bytes([1]) + struct.pack("<5I", 1, 1, 1, 1, 1) + struct.pack("<f", 0.5)
        assert raw == expected

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "g.fgrd").write_bytes(b"XXXX" + bytes(30))
        with pytest.raises(FormatError) as exc:
            load_feature_grid(tmp_path / "g.fgrd")
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        save_feature_grid(tmp_path / "g.fgrd", FeatureGrid(np.ones((2, 2, 2))))
        raw = (tmp_path / "g.fgrd").read_bytes()
        (tmp_path / "t.fgrd").write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_feature_grid(tmp_path / "t.fgrd")

    def test_dimension_overflow(self, tmp_path):
        header = b"FGRD" + bytes([1]) + struct.pack("<5I", 2**31, 2**31, 4, 1, 1)
        (tmp_path / "g.fgrd").write_bytes(header)
        with pytest.raises(FormatError, match="overflow"):
            load_feature_grid(tmp_path / "g.fgrd")

    def test_non_finite_reports_offset(self, tmp_path):
        header = b"FGRD" + bytes([1]) + struct.pack("<5I", 1, 1, 2, 1, 1)
        (tmp_path / "g.fgrd").write_bytes(header + struct.pack("<2f", 1.0, float("inf")))
        with pytest.raises(FormatError) as exc:
            load_feature_grid(tmp_path / "g.fgrd")
        assert exc.value.offset == len(header) + 4

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9))
    def test_roundtrip_property(self, H, W, C, num, den):
        import tempfile
        from pathlib import Path

        data = np.random.default_rng(H * 100 + W * 10 + C).standard_normal((H, W, C)).astype(np.float32)
        g = FeatureGrid(data, Fraction(num, den))
        with tempfile.TemporaryDirectory() as d:
            save_feature_grid(Path(d) / "g.fgrd", g)
            assert load_feature_grid(Path(d) / "g.fgrd") == g

    def test_invalid_grid(self):
        with pytest.raises(InvalidInputError):
            FeatureGrid(np.zeros((0, 2, 2)))
        with pytest.raises(InvalidInputError):
            FeatureGrid(np.full((1, 1, 1), np.nan))
