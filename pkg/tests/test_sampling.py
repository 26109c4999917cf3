import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cse.errors import FormatError, InvalidArgument
from cse.grid import GridSpec
from cse.sampling import bilinear_sample, read_features, write_features


def grid_at(x0, y0, sx=1.0, sy=1.0, n=3):
    return GridSpec(n, n, (x0, y0), sx, sy, (n // 2, n // 2))


def test_constant_map():
    fmap = np.full((10, 12, 3), 7.0)
    vals = bilinear_sample(fmap, grid_at(1.3, 2.7, 1.7, 0.9)).values
    assert np.all(vals == 7.0)


def test_on_pixel_returns_pixel():
    fmap = np.random.default_rng(0).normal(size=(8, 9, 2))
    vals = bilinear_sample(fmap, grid_at(2.0, 3.0)).values
    assert np.array_equal(vals[0, 0], fmap[3, 2])
    assert np.array_equal(vals[2, 2], fmap[5, 4])


def test_ramp_is_reproduced():
    H, W = 6, 8
    fmap = np.tile(np.arange(W, dtype=float)[None, :, None], (H, 1, 1))
    vals = bilinear_sample(fmap, grid_at(3.5, 1.25, 0.5, 0.5)).values
    assert vals[0, 0, 0] == pytest.approx(3.5)
    assert vals[0, 2, 0] == pytest.approx(4.5)


def test_clamped_border():
    fmap = np.arange(16, dtype=float).reshape(4, 4, 1)
    vals = bilinear_sample(fmap, grid_at(-5.0, -5.0, 20.0, 20.0)).values
    assert vals[0, 0, 0] == fmap[0, 0, 0]
    assert vals[2, 2, 0] == fmap[3, 3, 0]


@given(st.floats(-2, 10), st.floats(-2, 10), st.floats(0.1, 3), st.floats(0.1, 3),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_linearity_and_bounds(x0, y0, sx, sy, a, b, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(9, 9, 2))
    B = rng.normal(size=(9, 9, 2))
    g = grid_at(x0, y0, sx, sy)
    lhs = bilinear_sample(a * A + b * B, g).values
    rhs = a * bilinear_sample(A, g).values + b * bilinear_sample(B, g).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    # within the min/max of the four contributing pixels
    vals = bilinear_sample(A, g).values
    pts = g.points()
    x = np.clip(pts[..., 0], 0, 8)
    y = np.clip(pts[..., 1], 0, 8)
    j0 = np.minimum(np.floor(x).astype(int), 7)
    i0 = np.minimum(np.floor(y).astype(int), 7)
    corners = np.stack([A[i0, j0], A[i0, j0 + 1], A[i0 + 1, j0], A[i0 + 1, j0 + 1]])
    assert np.all(vals >= corners.min(axis=0) - 1e-12)
    assert np.all(vals <= corners.max(axis=0) + 1e-12)


def test_bad_maps():
    with pytest.raises(InvalidArgument):
        bilinear_sample(np.zeros((4, 4)), grid_at(0, 0))
    bad = np.zeros((4, 4, 1))
    bad[1, 1] = np.nan
    with pytest.raises(InvalidArgument):
        bilinear_sample(bad, grid_at(0, 0))


def test_feature_file_round_trip(tmp_path):
    fmap = np.random.default_rng(3).normal(size=(5, 7, 3)).astype(np.float32)
    p = tmp_path / "f.csef"
    write_features(p, fmap)
    raw = p.read_bytes()
    assert raw[:4] == b"CSEF"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [5, 7, 3]
    assert len(raw) == 16 + 4 * fmap.size
    assert np.array_equal(read_features(p), fmap)


def test_feature_file_errors(tmp_path):
    p = tmp_path / "f.csef"
    write_features(p, np.zeros((3, 3, 2), np.float32))
    data = p.read_bytes()
    (tmp_path / "short.csef").write_bytes(data[:-4])
    with pytest.raises(FormatError, match="offset"):
        read_features(tmp_path / "short.csef")
    (tmp_path / "magic.csef").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        read_features(tmp_path / "magic.csef")
