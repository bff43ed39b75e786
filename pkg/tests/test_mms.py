import csv
import math

import numpy as np
import pytest

from sphereflow.mms import (MMSConfig, convergence_rates, forcing_f, l2_error,
                            mms_fields, run_verification, scalar_source_S)

# the published verification table: (resolution, h, L2_u, L2_rho)
TABLE = [
    (11, 0.1, 1.962e-1, 3.852e-1),
    (13, 1 / 12, 2.049e-1, 3.049e-1),
    (15, 1 / 14, 2.029e-1, 3.053e-1),
    (17, 0.0625, 2.015e-1, 2.876e-1),
]


def finite_difference_gradient(fn, point, eps=1e-5):
    """Independent central-difference oracle for analytic derivatives."""
    out = []
    for axis in range(3):
        hi = list(point)
        lo = list(point)
        hi[axis] += eps
        lo[axis] -= eps
        out.append((fn(*hi) - fn(*lo)) / (2 * eps))
    return np.asarray(out)


class TestMmsFields:
    def test_cube_center(self):
        u, rho, p = mms_fields(0.5, 0.5, 0.5)
        assert u == pytest.approx([0, 0, 0], abs=1e-15)
        assert rho == pytest.approx(1.1)
        assert p == pytest.approx(1.0)

    def test_cube_corner(self):
        u, rho, p = mms_fields(0.0, 0.0, 0.0)
        assert u == pytest.approx([0, 0, 0], abs=1e-15)
        assert rho == pytest.approx(1.0)
        assert p == pytest.approx(1.05)

    def test_quarter_point(self):
        u, _, _ = mms_fields(0.25, 0.25, 0.25)
        assert u[0] == pytest.approx(0.5 * math.sqrt(2) / 2, rel=1e-12)
        assert u[0] == pytest.approx(0.35355, abs=1e-5)


class TestForcing:
    def test_zero_at_center(self):
        assert forcing_f(0.5, 0.5, 0.5) == pytest.approx([0, 0, 0], abs=1e-12)

    def test_matches_finite_differences(self, rng):
        # oracle: f = -[(u . grad)u + grad(p)/rho0] assembled from
        # finite-difference derivatives of the analytic fields
        pts = rng.uniform(0.05, 0.95, size=(20, 3))
        for x, y, z in pts:
            u, _, _ = mms_fields(x, y, z)
            jac = np.column_stack([
                finite_difference_gradient(lambda a, b, c: mms_fields(a, b, c)[0][k], (x, y, z))
                for k in range(3)
            ]).T
            grad_p = finite_difference_gradient(lambda a, b, c: mms_fields(a, b, c)[2], (x, y, z))
            expected = -(jac @ u + grad_p)
            assert forcing_f(x, y, z) == pytest.approx(expected, abs=1e-6)

    def test_pressure_part_linear_in_inverse_rho0(self, rng):
        x, y, z = rng.uniform(0.1, 0.9, size=3)
        grad_p = finite_difference_gradient(lambda a, b, c: mms_fields(a, b, c)[2], (x, y, z))
        diff = forcing_f(x, y, z, rho0=2.0) - forcing_f(x, y, z, rho0=1.0)
        assert diff == pytest.approx(0.5 * grad_p, abs=1e-6)


class TestScalarSource:
    def test_center_value(self):
        assert scalar_source_S(0.5, 0.5, 0.5) == pytest.approx(1.1 * math.pi, rel=1e-12)
        assert scalar_source_S(0.5, 0.5, 0.5) == pytest.approx(3.45575, abs=1e-5)

    def test_face_point_zero(self):
        assert scalar_source_S(0.0, 0.5, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_differences(self, rng):
        pts = rng.uniform(0.05, 0.95, size=(20, 3))
        for x, y, z in pts:
            div_rho_u = sum(
                finite_difference_gradient(
                    lambda a, b, c: mms_fields(a, b, c)[1] * mms_fields(a, b, c)[0][k],
                    (x, y, z))[k]
                for k in range(3)
            )
            assert scalar_source_S(x, y, z) == pytest.approx(-div_rho_u, abs=1e-6)


class TestL2Error:
    def test_identical_zero(self, rng):
        f = rng.normal(size=50)
        assert l2_error(f, f) == 0.0

    def test_constant_offset(self, rng):
        f = rng.normal(size=50)
        assert l2_error(f + 0.3, f) == pytest.approx(0.3, rel=1e-12)

    def test_vector_norm(self):
        a = np.zeros((4, 3))
        b = np.tile([3.0, 4.0, 0.0], (4, 1))
        assert l2_error(a, b) == pytest.approx(5.0)

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            l2_error(np.zeros(3), np.zeros(4))

    def test_metric_properties(self, rng):
        x, y, z = rng.normal(size=(3, 30))
        assert l2_error(x, y) == pytest.approx(l2_error(y, x), rel=1e-12)
        assert l2_error(x, z) <= l2_error(x, y) + l2_error(y, z) + 1e-12


class TestConvergenceRates:
    def test_exact_first_order(self):
        hs = [0.1, 0.05, 0.025]
        errors = [0.5 * h for h in hs]
        assert convergence_rates(hs, errors) == pytest.approx(1.0, abs=1e-12)

    def test_exact_second_order(self):
        hs = [0.1, 0.05, 0.025]
        errors = [2.0 * h**2 for h in hs]
        assert convergence_rates(hs, errors) == pytest.approx(2.0, abs=1e-12)

    def test_scale_invariance(self, rng):
        hs = [0.1, 0.08, 0.05]
        errors = rng.uniform(0.1, 1.0, size=3)
        r1 = convergence_rates(hs, errors)
        r2 = convergence_rates(hs, 7.3 * errors)
        assert r1 == pytest.approx(r2, rel=1e-12)

    def test_nonpositive_error_rejected(self):
        with pytest.raises(ValueError):
            convergence_rates([0.1, 0.05], [0.1, 0.0])

    def test_published_table_velocity_rate(self):
        hs = [row[1] for row in TABLE]
        rate = convergence_rates(hs, [row[2] for row in TABLE])
        assert rate == pytest.approx(-0.05, abs=0.02)

    def test_published_table_density_rate(self):
        hs = [row[1] for row in TABLE]
        rate = convergence_rates(hs, [row[3] for row in TABLE])
        assert rate == pytest.approx(0.58, abs=0.02)


@pytest.fixture(scope="module")
def report():
    return run_verification(MMSConfig())


class TestRunVerification:

    def test_velocity_thresholds(self, report):
        for row in report.rows:
            if row.resolution in (11, 13, 15):
                assert row.l2_u < 0.25

    def test_density_thresholds(self, report):
        for row in report.rows:
            if row.resolution in (11, 13, 15):
                assert row.l2_rho < 0.4

    def test_divergence_bound_all_grids(self, report):
        for row in report.rows:
            assert row.max_div < 5.0

    def test_rows_monotone_h(self, report):
        hs = [row.h for row in report.rows]
        assert all(b < a for a, b in zip(hs, hs[1:]))

    def test_console_format(self, report):
        text = report.console()
        assert "Resolution=15: L2_u=" in text
        assert "Convergence rates: velocity=" in text

    def test_csv_columns(self, report, tmp_path):
        path = tmp_path / "mms.csv"
        report.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["r", "h", "L2_u", "L2_rho", "L2_div", "max_div"]
        assert len(rows) == 1 + len(report.rows) + 1  # header + rows + rates
        assert rows[-1][0] == "rate"

    def test_velocity_column_tracks_published_table(self, report):
        for row, (r, _h, l2u, _l2rho) in zip(report.rows, TABLE):
            assert row.resolution == r
            assert abs(row.l2_u - l2u) / l2u <= 0.30

    def test_small_dt_is_grid_dominated(self):
        # the uncalibrated regime: errors collapse by orders of magnitude
        report = run_verification(MMSConfig(resolutions=(11, 13), dt=1e-3))
        assert all(row.l2_u < 5e-3 for row in report.rows)
        assert all(row.max_div < 5.0 for row in report.rows)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MMSConfig(resolutions=(11, 11))
        with pytest.raises(ValueError):
            MMSConfig(resolutions=(2, 5))
