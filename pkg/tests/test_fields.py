import numpy as np
import pytest

from sphereflow.fields import (OutOfBandError, cp_extend, cp_extend_vector,
                               extension_matrix, trilinear_interpolate)


class TestTrilinearInterpolate:
    def test_nodal_values_exact(self, cube11, rng):
        vals = rng.normal(size=cube11.size)
        picks = rng.integers(0, cube11.size, size=20)
        out = trilinear_interpolate(cube11, vals, cube11.points[picks])
        assert out == pytest.approx(vals[picks], abs=1e-12)

    def test_linear_reproduction(self, cube11, rng):
        pts = cube11.points
        vals = 2 * pts[:, 0] + 3 * pts[:, 1] - pts[:, 2]
        queries = rng.uniform(0.05, 0.95, size=(40, 3))
        expected = 2 * queries[:, 0] + 3 * queries[:, 1] - queries[:, 2]
        out = trilinear_interpolate(cube11, vals, queries)
        assert out == pytest.approx(expected, abs=1e-12)

    def test_cell_center_is_corner_mean(self, cube11, rng):
        vals = rng.normal(size=cube11.size)
        h = cube11.grid.h
        center = np.array([3.5, 4.5, 6.5]) * h
        corners = []
        for dx in (3, 4):
            for dy in (4, 5):
                for dz in (6, 7):
                    corners.append(vals[cube11.lookup[dx, dy, dz]])
        out = trilinear_interpolate(cube11, vals, center)
        assert out == pytest.approx(np.mean(corners), abs=1e-12)

    def test_out_of_band_raises(self, band15):
        vals = np.zeros(band15.size)
        with pytest.raises(OutOfBandError):
            trilinear_interpolate(band15, vals, np.array([0.02, 0.02, 0.02]))


class TestCpExtend:
    def test_constant_exact(self, band15):
        out = cp_extend(band15, np.full(band15.size, 3.7))
        assert np.max(np.abs(out - 3.7)) < 1e-12

    def test_radial_field_extends_to_radius(self, band15):
        # f(x) = ||x - c|| has the exactly-known extension value R everywhere
        f = np.linalg.norm(band15.points - band15.surface.center, axis=1)
        out = cp_extend(band15, f)
        assert np.max(np.abs(out - band15.surface.radius)) <= 10 * band15.h**2

    def test_idempotence_gap_is_second_order(self, band15, band21):
        # One-shot closest-point extension is idempotent only up to the
        # re-interpolation error of the composed field, which is O(h^2).
        for band in (band15, band21):
            pts = band.points
            f = np.sin(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1]) + 0.3 * pts[:, 2]
            once = cp_extend(band, f)
            twice = cp_extend(band, once)
            gap = np.max(np.abs(twice - once))
            assert gap <= 10 * band.h**2
        gap15 = self._gap(band15)
        gap21 = self._gap(band21)
        assert gap21 < gap15  # shrinks under refinement

    @staticmethod
    def _gap(band):
        pts = band.points
        f = np.sin(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1]) + 0.3 * pts[:, 2]
        once = cp_extend(band, f)
        return np.max(np.abs(cp_extend(band, once) - once))

    def test_linearity(self, band15, rng):
        f = rng.normal(size=band15.size)
        g = rng.normal(size=band15.size)
        a, b = 2.5, -1.25
        lhs = cp_extend(band15, a * f + b * g)
        rhs = a * cp_extend(band15, f) + b * cp_extend(band15, g)
        scale = np.max(np.abs(rhs))
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, scale)

    def test_shared_closest_point_values_agree(self, band15):
        pts = band15.points
        f = np.sin(2 * pts[:, 0]) + pts[:, 1] * pts[:, 2]
        out = cp_extend(band15, f)
        keys = np.round(band15.closest_points, 12)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        tol = 10 * band15.h**2
        for group in np.flatnonzero(counts > 1):
            members = out[inverse == group]
            assert members.max() - members.min() <= tol

    def test_cube_band_is_identity(self, cube11, rng):
        f = rng.normal(size=cube11.size)
        assert np.array_equal(cp_extend(cube11, f), f)

    def test_extension_rows_are_convex_weights(self, band15):
        mat = extension_matrix(band15)
        sums = np.asarray(mat.sum(axis=1)).ravel()
        assert np.max(np.abs(sums - 1.0)) < 1e-12
        assert mat.data.min() >= -1e-15


class TestCpExtendVector:
    def test_output_tangential(self, band15, rng):
        v = rng.normal(size=(band15.size, 3))
        out = cp_extend_vector(band15, v)
        dots = np.abs(np.sum(out * band15.normals, axis=1))
        assert np.max(dots) <= 1e-9 * max(1.0, np.max(np.linalg.norm(v, axis=1)))

    def test_radial_field_annihilated(self, band21):
        out = cp_extend_vector(band21, band21.normals.copy())
        # extension leaves an O(h^2) tangential remainder of the normal field
        assert np.max(np.linalg.norm(out, axis=1)) <= 10 * band21.h**2

    def test_rotation_field_reproduced_exactly(self, band15):
        # omega x (x - c) is affine, so trilinear extension lands exactly on
        # omega x (CP - c), which is already tangent: the analytic oracle.
        omega = np.array([0.4, -1.1, 0.8])
        c = band15.surface.center
        v = np.cross(np.broadcast_to(omega, (band15.size, 3)), band15.points - c)
        out = cp_extend_vector(band15, v)
        expected = np.cross(np.broadcast_to(omega, (band15.size, 3)),
                            band15.closest_points - c)
        assert np.max(np.abs(out - expected)) < 1e-12
