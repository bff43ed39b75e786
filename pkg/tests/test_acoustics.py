import math

import numpy as np
import pytest

from sphereflow.acoustics import (ForceHistory, ForceSample, ObserverConfig,
                                  RetardedDelayLine, SurfaceQuadrature,
                                  detect_peaks, fibonacci_sphere, fwh_pressure,
                                  hann_window, sliding_spectrum, surface_force)
from sphereflow.fields import cp_extend
from sphereflow.geometry import GridSpec, SphereSurface, build_narrow_band


def history_from(F, dt):
    hist = ForceHistory(len(F))
    for i, f in enumerate(F):
        hist.append(ForceSample(t=i * dt, F=f))
    return hist


class TestFibonacciLattice:
    def test_unit_vectors(self):
        pts = fibonacci_sphere(500)
        assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)) < 1e-12

    def test_quasi_uniform_first_moment(self):
        # closed-surface identity: the directions average out
        pts = fibonacci_sphere(2000)
        assert np.linalg.norm(pts.mean(axis=0)) < 1e-3


class TestSurfaceForce:
    surf = SphereSurface(radius=1.0, center=np.zeros(3))

    def quad(self, n=2000):
        return SurfaceQuadrature.build(self.surf, n)

    def test_constant_pressure_nulls(self):
        quad = self.quad()
        p = np.ones(len(quad.points)) * 2.0
        F = quad.weight * (p[:, None] * quad.normals).sum(axis=0)
        assert np.linalg.norm(F) <= 2.0 * 4 * math.pi * 1e-3

    def test_cos_theta_analytic_integral(self):
        # oracle: closed form of the surface integral of cos(theta) * n
        quad = self.quad()
        p = quad.normals[:, 2]  # cos(theta) on the unit sphere
        F = quad.weight * (p[:, None] * quad.normals).sum(axis=0)
        target = 4.0 * math.pi / 3.0
        assert abs(F[2] - target) / target < 0.01
        assert abs(F[0]) < 0.01 * target and abs(F[1]) < 0.01 * target

    def test_zero_pressure_zero_force(self, band21, sphere):
        quad = SurfaceQuadrature.build(sphere, 800)
        sample = surface_force(np.zeros(band21.size), band21, quad, t=1.0)
        assert np.array_equal(sample.F, np.zeros(3))
        assert sample.t == 1.0

    def test_band_interpolated_cos_theta(self, band21, sphere):
        # same oracle, but the pressure now comes through the band field path
        c = sphere.center
        p = cp_extend(band21, (band21.points - c)[:, 2] / np.linalg.norm(band21.points - c, axis=1))
        quad = SurfaceQuadrature.build(sphere, 2000)
        F = quad.force(band21, p)
        target = 4.0 * math.pi * sphere.radius**2 / 3.0
        assert abs(F[2] - target) / target < 0.02

    def test_linearity_in_pressure(self, band21, sphere, rng):
        quad = SurfaceQuadrature.build(sphere, 500)
        p1 = cp_extend(band21, rng.normal(size=band21.size))
        p2 = cp_extend(band21, rng.normal(size=band21.size))
        F = quad.force(band21, 2.0 * p1 + 3.0 * p2)
        F_lin = 2.0 * quad.force(band21, p1) + 3.0 * quad.force(band21, p2)
        assert F == pytest.approx(F_lin, rel=1e-12)


class TestForceDerivative:
    def test_constant_force_zero(self):
        hist = history_from(np.tile([1.0, 2.0, 3.0], (5, 1)), dt=1e-3)
        assert hist.derivative() == pytest.approx([0, 0, 0], abs=1e-12)

    def test_linear_force_exact(self):
        k = 4.0
        t = np.arange(6) * 1e-3
        F = np.column_stack([k * t, np.zeros(6), np.zeros(6)])
        hist = history_from(F, dt=1e-3)
        assert hist.derivative() == pytest.approx([k, 0, 0], rel=1e-9)

    def test_sinusoid_within_two_percent(self):
        # centered-difference error is sin(w dt)/dt vs w: 1.65% at 50 Hz / 1 kHz
        dt, freq = 1e-3, 50.0
        w = 2 * math.pi * freq
        t = np.arange(400) * dt
        F = np.column_stack([np.zeros(400), np.zeros(400), np.sin(w * t)])
        hist = ForceHistory(256)
        derivs = []
        for i in range(400):
            hist.append(ForceSample(t=t[i], F=F[i]))
            d = hist.derivative()
            if d is not None:
                derivs.append(d[2])
        amp = np.max(np.abs(derivs))
        assert abs(amp - w) / w < 0.02

    def test_not_ready_signal(self):
        hist = ForceHistory(8)
        assert hist.derivative() is None
        hist.append(ForceSample(t=0.0, F=[1, 0, 0]))
        assert hist.derivative() is None

    def test_nonuniform_spacing_rejected(self):
        hist = ForceHistory(8)
        hist.append(ForceSample(t=0.0, F=[0, 0, 0]))
        hist.append(ForceSample(t=1e-3, F=[0, 0, 0]))
        with pytest.raises(ValueError):
            hist.append(ForceSample(t=3e-3, F=[0, 0, 0]))


class TestFwhPressure:
    def test_zero_derivative(self):
        obs = ObserverConfig(position=[0, 0, 10.0])
        assert fwh_pressure([0, 0, 0], obs, np.zeros(3)) == 0.0

    def test_perpendicular_null(self):
        obs = ObserverConfig(position=[0, 0, 10.0])
        assert abs(fwh_pressure([3.0, 4.0, 0.0], obs, np.zeros(3))) < 1e-12

    def test_reference_value(self):
        # 628.3 / (4 pi 343 * 10) = 1.458e-2, straight from the formula
        obs = ObserverConfig(position=[0, 0, 10.0], c0=343.0)
        p = fwh_pressure([0, 0, 628.3], obs, np.zeros(3))
        assert p == pytest.approx(628.3 / (4 * math.pi * 343.0 * 10.0), rel=1e-12)
        assert p == pytest.approx(1.458e-2, rel=1e-3)

    def test_linearity(self, rng):
        obs = ObserverConfig(position=[2.0, -1.0, 5.0])
        g1, g2 = rng.normal(size=3), rng.normal(size=3)
        a, b = 2.5, -0.75
        lhs = fwh_pressure(a * g1 + b * g2, obs, np.zeros(3))
        rhs = a * fwh_pressure(g1, obs, np.zeros(3)) + b * fwh_pressure(g2, obs, np.zeros(3))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_inverse_distance_decay(self):
        dfdt = np.array([10.0, -3.0, 7.0])
        near = ObserverConfig(position=[0, 0, 5.0])
        far = ObserverConfig(position=[0, 0, 10.0])
        p_near = fwh_pressure(dfdt, near, np.zeros(3))
        p_far = fwh_pressure(dfdt, far, np.zeros(3))
        assert p_far == pytest.approx(p_near / 2.0, rel=1e-12)

    def test_retarded_delay_line(self):
        line = RetardedDelayLine()
        line.push(emit_time=0.0, travel_time=0.03, value=1.0)
        line.push(emit_time=0.01, travel_time=0.03, value=2.0)
        assert line.pop_ready(0.02) == []
        ready = line.pop_ready(0.035)
        assert ready == [(0.03, 1.0)]
        assert line.pop_ready(1.0) == [(0.04, 2.0)]


class TestSlidingSpectrum:
    W = 256
    dt = 1.0 / 960.0  # 3.75 Hz bins: 120 Hz and 300 Hz are exact bins

    def filled_history(self, signal):
        hist = ForceHistory(self.W)
        for i in range(self.W):
            hist.append(ForceSample(t=i * self.dt, F=signal[i]))
        return hist

    def test_not_ready_until_full(self):
        hist = ForceHistory(self.W)
        hist.append(ForceSample(t=0.0, F=[0, 0, 0]))
        with pytest.raises(ValueError):
            sliding_spectrum(hist)

    def test_zero_signal_zero_bins(self):
        spec = sliding_spectrum(self.filled_history(np.zeros((self.W, 3))))
        assert np.max(spec.magnitudes) == 0.0

    def test_bin_mapping_and_sidelobes(self):
        # integrate a 60 Hz derivative target: F with dF/dt = cos(2 pi 60 t)
        f0 = 60.0
        w0 = 2 * math.pi * f0
        t = np.arange(self.W) * self.dt
        F = np.column_stack([np.sin(w0 * t) / w0, np.zeros(self.W), np.zeros(self.W)])
        spec = sliding_spectrum(self.filled_history(F))
        k0 = int(round(f0 * self.W * self.dt))
        assert spec.omegas[k0] == pytest.approx(w0, rel=1e-12)
        assert np.argmax(spec.magnitudes) == k0
        peak = spec.magnitudes[k0]
        away = np.ones(len(spec.magnitudes), bool)
        away[max(0, k0 - 3):k0 + 4] = False
        away[0] = False
        # Hann sidelobes at least 31 dB down away from the mainlobe
        assert np.max(spec.magnitudes[away]) <= peak * 10 ** (-31.0 / 20.0)

    def test_parseval_identity(self, rng):
        F = np.cumsum(rng.normal(size=(self.W, 3)), axis=0) * 1e-3
        hist = self.filled_history(F)
        spec = sliding_spectrum(hist)
        dfdt = hist.derivative_series()
        tapered = dfdt * hann_window(self.W)[:, None]
        energy_time = np.sum(tapered**2)
        mags2 = spec.magnitudes**2
        # one-sided rfft: double every interior bin, DC and Nyquist once
        energy_spec = (mags2[0] + 2 * np.sum(mags2[1:-1]) + mags2[-1]) / self.W
        assert energy_spec == pytest.approx(energy_time, rel=1e-9)


class TestDetectPeaks:
    # 15 Hz bins put 120 and 300 Hz exactly on bins, and the rate is high
    # enough that the centered-difference sinc rolloff distorts the two-tone
    # weight ratio by only ~1%
    W = 256
    dt = 1.0 / 3840.0

    def spectrum_of(self, fn):
        t = np.arange(self.W) * self.dt
        F = np.column_stack([fn(t), np.zeros(self.W), np.zeros(self.W)])
        hist = ForceHistory(self.W)
        for i in range(self.W):
            hist.append(ForceSample(t=t[i], F=F[i]))
        return sliding_spectrum(hist)

    def test_flat_spectrum_no_peaks(self):
        spec = self.spectrum_of(lambda t: np.zeros_like(t))
        peaks = detect_peaks(spec)
        assert len(peaks) == 0

    def test_single_sinusoid_single_peak(self):
        w0 = 2 * math.pi * 120.0
        spec = self.spectrum_of(lambda t: np.sin(w0 * t) / w0)
        peaks = detect_peaks(spec, max_peaks=8, min_prominence=0.1)
        assert len(peaks) == 1
        assert peaks.peaks[0].omega == pytest.approx(w0, rel=1e-12)
        assert peaks.peaks[0].weight == pytest.approx(1.0, abs=1e-12)

    def test_two_tone_weights(self):
        # dF/dt = 1.0 cos(2 pi 120 t) + 0.5 cos(2 pi 300 t): weights 2/3, 1/3
        w1, w2 = 2 * math.pi * 120.0, 2 * math.pi * 300.0
        spec = self.spectrum_of(lambda t: np.sin(w1 * t) / w1 + 0.5 * np.sin(w2 * t) / w2)
        peaks = detect_peaks(spec, max_peaks=8, min_prominence=0.1)
        assert len(peaks) == 2
        freqs = sorted(p.omega / (2 * math.pi) for p in peaks.peaks)
        assert freqs[0] == pytest.approx(120.0, rel=1e-9)
        assert freqs[1] == pytest.approx(300.0, rel=1e-9)
        assert peaks.peaks[0].weight == pytest.approx(2.0 / 3.0, rel=0.05)
        assert peaks.peaks[1].weight == pytest.approx(1.0 / 3.0, rel=0.05)

    def test_weights_sum_to_one(self, rng):
        t = np.arange(self.W) * self.dt
        sig = sum(a * np.sin(2 * math.pi * f * t)
                  for a, f in [(1.0, 60), (0.7, 150), (0.4, 240), (0.2, 390)])
        spec = self.spectrum_of(lambda _t: sig)
        peaks = detect_peaks(spec, max_peaks=3, min_prominence=0.01)
        assert 0 < len(peaks) <= 3
        assert peaks.weights.sum() == pytest.approx(1.0, abs=1e-9)

    def test_max_peaks_respected(self):
        t = np.arange(self.W) * self.dt
        sig = sum(np.sin(2 * math.pi * f * t) for f in (60, 120, 180, 240, 300))
        spec = self.spectrum_of(lambda _t: sig)
        peaks = detect_peaks(spec, max_peaks=2, min_prominence=0.0)
        assert len(peaks) == 2
