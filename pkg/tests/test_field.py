import numpy as np
import pytest

from elastodyn.field import (
    AnalyticField,
    GridField,
    GridFormatError,
    Primitive,
    box_field,
    density_gradient,
    load_grid,
    sample_color,
    sample_density,
    save_grid,
    unit_sphere,
)


def make_grid(values, origin=(0, 0, 0), spacing=(0.5, 0.5, 0.5)):
    return GridField(origin=np.array(origin, float), spacing=np.array(spacing, float),
                     values=np.asarray(values, np.float32))


class TestAnalytic:
    def test_unit_sphere_inside(self):
        f = unit_sphere(1.0)
        assert sample_density(f, [0.0, 0.0, 0.0]) == 1.0

    def test_unit_sphere_outside(self):
        f = unit_sphere(1.0)
        assert sample_density(f, [5.0, 0.0, 0.0]) == 0.0

    def test_density_nonnegative_and_color_range(self, rng):
        f = AnalyticField([
            Primitive("sphere", [0, 0, 0], 0.8, (0.2, 0.4, 0.9), 0.1, 0.6),
            Primitive("box", [0.5, 0, 0], 1.0, (1.0, 0.5, 0.1), 0.1,
                      half_extents=[0.4, 0.3, 0.3]),
        ])
        pts = rng.uniform(-1.5, 1.5, size=(500, 3))
        sig = sample_density(f, pts)
        col = sample_color(f, pts)
        assert np.all(sig >= 0)
        assert np.all((col >= 0) & (col <= 1))

    def test_constant_region_gradient_zero(self):
        f = unit_sphere(1.0, falloff=0.1)
        assert np.allclose(density_gradient(f, [0.1, 0.0, -0.2]), 0.0)

    def test_gradient_matches_finite_difference(self, rng):
        f = unit_sphere(1.0, falloff=0.2)
        # points inside the falloff band where the gradient is nonzero
        dirs = rng.normal(size=(40, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * rng.uniform(0.92, 1.08, size=(40, 1))
        g = density_gradient(f, pts)
        h = 1e-5
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            fd = (sample_density(f, pts + e) - sample_density(f, pts - e)) / (2 * h)
            denom = np.maximum(np.abs(g[:, ax]), 1e-3)
            assert np.max(np.abs(fd - g[:, ax]) / denom) < 1e-4

    def test_compact_support(self):
        f = unit_sphere(1.0, falloff=0.1)
        # exactly zero outside the falloff shell, not merely small
        assert sample_density(f, [0.0, 0.0, 1.0501]) == 0.0


class TestGrid:
    def test_constant_cell_center(self):
        g = make_grid(np.full((2, 2, 2, 1), 0.5))
        assert sample_density(g, [0.25, 0.25, 0.25]) == pytest.approx(0.5, abs=0)

    def test_corner_exact(self):
        vals = np.arange(27, dtype=np.float32).reshape(3, 3, 3, 1)
        g = make_grid(vals)
        for idx in [(0, 0, 0), (1, 2, 0), (2, 2, 2)]:
            p = np.array(idx) * 0.5
            assert sample_density(g, p) == float(vals[idx + (0,)])

    def test_outside_zero(self):
        g = make_grid(np.full((2, 2, 2, 1), 0.7))
        assert sample_density(g, [-0.1, 0.2, 0.2]) == 0.0
        assert np.all(sample_color(g, [9.0, 9.0, 9.0]) == 0.0)

    def test_trilinear_exact_on_linear_data(self, rng):
        xs = np.arange(4) * 0.5
        vals = (2.0 * xs)[:, None, None, None] * np.ones((1, 4, 4, 1))
        g = make_grid(vals)
        pts = rng.uniform(0.3, 1.2, size=(50, 3))
        assert np.allclose(sample_density(g, pts), 2.0 * pts[:, 0], atol=1e-6)

    def test_gradient_linear_slope(self, rng):
        xs = np.arange(6) * 0.5
        vals = (2.0 * xs)[:, None, None, None] * np.ones((1, 6, 6, 1))
        g = make_grid(vals)
        pts = rng.uniform(0.8, 1.7, size=(30, 3))  # interior, away from edges
        grad = density_gradient(g, pts)
        assert np.max(np.abs(grad[:, 0] - 2.0)) < 1e-9
        assert np.max(np.abs(grad[:, 1:])) < 1e-9


class TestGridFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        vals = rng.random((8, 8, 8, 4)).astype(np.float32)
        g = GridField(origin=np.array([0.1, -0.3, 2.0]),
                      spacing=np.array([0.05, 0.07, 0.11]), values=vals)
        path = tmp_path / "field.grid"
        save_grid(g, path)
        g2 = load_grid(path)
        assert np.array_equal(g.values, g2.values)
        assert np.array_equal(g.origin, g2.origin)
        assert np.array_equal(g.spacing, g2.spacing)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_bytes(b"XXXX\ndims 2 2 2\n")
        with pytest.raises(GridFormatError, match="bad magic"):
            load_grid(path)

    def test_bad_dims(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_bytes(
            b"PIEGRID1\ndims 0 4 4\norigin 0 0 0\nspacing 1 1 1\nchannels 1\n"
        )
        with pytest.raises(GridFormatError, match="bad dims"):
            load_grid(path)

    def test_bad_channels(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_bytes(
            b"PIEGRID1\ndims 2 2 2\norigin 0 0 0\nspacing 1 1 1\nchannels 3\n"
        )
        with pytest.raises(GridFormatError, match="bad channel count"):
            load_grid(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.grid"
        payload = np.zeros(63, dtype="<f4").tobytes()
        path.write_bytes(
            b"PIEGRID1\ndims 4 4 4\norigin 0 0 0\nspacing 1 1 1\nchannels 1\n" + payload
        )
        with pytest.raises(GridFormatError, match="truncated payload"):
            load_grid(path)

    def test_x_fastest_ordering(self, tmp_path):
        vals = np.zeros((2, 2, 2, 1), np.float32)
        vals[1, 0, 0, 0] = 7.0  # second float in the payload must be x=1
        g = make_grid(vals, spacing=(1, 1, 1))
        path = tmp_path / "order.grid"
        save_grid(g, path)
        raw = path.read_bytes()
        header_end = raw.index(b"channels 1\n") + len(b"channels 1\n")
        floats = np.frombuffer(raw[header_end:], dtype="<f4")
        assert floats[1] == 7.0


def test_box_field_bounds():
    f = box_field([0.5, 0.4, 0.3], falloff=0.2)
    lo, hi = f.bounds()
    assert np.allclose(hi - lo, 2 * (np.array([0.5, 0.4, 0.3]) + 0.1))
