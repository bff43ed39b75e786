"""Aerodynamic force, compact far-field pressure, and force spectra.

The unsteady surface force is integrated on a Fibonacci lattice; its time
derivative drives the compact low-Mach loading model p' = (i_r . dF/dt) /
(4 pi c0 r); sliding Hann-windowed transforms of dF/dt deliver the dominant
angular frequencies that the synthesis stage turns into oscillators.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .fields import trilinear_interpolate
from .geometry import NarrowBand, SphereSurface


@dataclass(frozen=True)
class ObserverConfig:
    position: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 10.5]))
    c0: float = 343.0
    use_retarded_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.c0 <= 0:
            raise ValueError("speed of sound must be positive")

    def validate_outside(self, surface: SphereSurface):
        if np.linalg.norm(self.position - surface.center) <= surface.radius:
            raise ValueError("observer must lie strictly outside the sphere")


@dataclass(frozen=True)
class ForceSample:
    t: float
    F: np.ndarray  # (3,) newtons

    def __post_init__(self):
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        if not np.all(np.isfinite(self.F)):
            raise ValueError("force sample has non-finite components")


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors (golden-angle spiral lattice)."""
    i = np.arange(n, dtype=float) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    azimuth = 2.0 * np.pi * i / golden
    return np.column_stack([
        np.cos(azimuth) * np.sin(polar),
        np.sin(azimuth) * np.sin(polar),
        np.cos(polar),
    ])


class QuadratureCoverageError(RuntimeError):
    """A quadrature node has no interpolation stencil inside the band."""


@dataclass(frozen=True)
class SurfaceQuadrature:
    """Equal-weight lattice on the sphere: w_i = 4 pi R^2 / N_q per node."""

    points: np.ndarray  # (n_q, 3) on the sphere
    normals: np.ndarray  # (n_q, 3) unit outward
    weight: float

    @classmethod
    def build(cls, surface: SphereSurface, n_points: int = 2000):
        directions = fibonacci_sphere(n_points)
        points = surface.center + surface.radius * directions
        weight = 4.0 * np.pi * surface.radius**2 / n_points
        return cls(points=points, normals=directions, weight=weight)

    def sample_pressure(self, band: NarrowBand, p_values):
        from .fields import OutOfBandError

        try:
            return trilinear_interpolate(band, p_values, self.points)
        except OutOfBandError as exc:
            raise QuadratureCoverageError(
                f"quadrature node outside band coverage: {exc}"
            ) from exc

    def force(self, band: NarrowBand, p_values) -> np.ndarray:
        """F = sum_i p(y_i) n_i w_i; only the sphere itself is integrated."""
        p_surf = self.sample_pressure(band, p_values)
        return self.weight * (p_surf[:, None] * self.normals).sum(axis=0)

    def force_sample(self, band: NarrowBand, p_values, t: float) -> ForceSample:
        return ForceSample(t=t, F=self.force(band, p_values))


def surface_force(p_values, band: NarrowBand, quadrature: SurfaceQuadrature, t: float = 0.0) -> ForceSample:
    """Surface-quadrature aerodynamic force of a CP-extended pressure field."""
    return quadrature.force_sample(band, p_values, t)


class ForceHistory:
    """Ring buffer of uniformly spaced force samples (capacity = window length)."""

    def __init__(self, capacity: int):
        if capacity < 4:
            raise ValueError("force history needs a capacity of at least 4 samples")
        self.capacity = capacity
        self._t = np.zeros(capacity)
        self._F = np.zeros((capacity, 3))
        self._count = 0
        self._head = 0  # next write slot

    def __len__(self):
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def append(self, sample: ForceSample):
        if self._count >= 2:
            dt = self.times()[-1] - self.times()[-2]
            new_dt = sample.t - self.times()[-1]
            if abs(new_dt - dt) > 1e-12 * max(abs(dt), 1.0):
                raise ValueError("force history requires uniform sample spacing")
        elif self._count == 1 and sample.t <= self.times()[-1]:
            raise ValueError("force history times must strictly increase")
        self._t[self._head] = sample.t
        self._F[self._head] = sample.F
        self._head = (self._head + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def _order(self):
        if self._count < self.capacity:
            return np.arange(self._count)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def times(self) -> np.ndarray:
        return self._t[self._order()]

    def forces(self) -> np.ndarray:
        return self._F[self._order()]

    @property
    def dt(self) -> float:
        t = self.times()
        if len(t) < 2:
            raise ValueError("need at least two samples to know the spacing")
        return float(t[1] - t[0])

    def derivative(self):
        """Latest dF/dt: centered over the three most recent samples when
        available, one-sided otherwise; None when fewer than 2 samples."""
        if self._count < 2:
            return None
        F = self.forces()
        t = self.times()
        if self._count >= 3:
            return (F[-1] - F[-3]) / (t[-1] - t[-3])
        return (F[-1] - F[-2]) / (t[-1] - t[-2])

    def derivative_series(self) -> np.ndarray:
        """dF/dt at every buffered sample: centered interior, one-sided ends."""
        if self._count < 2:
            raise ValueError("need at least two samples for a derivative series")
        F = self.forces()
        dt = self.dt
        d = np.empty_like(F)
        d[1:-1] = (F[2:] - F[:-2]) / (2.0 * dt)
        d[0] = (F[1] - F[0]) / dt
        d[-1] = (F[-1] - F[-2]) / dt
        return d


def fwh_pressure(dFdt, observer: ObserverConfig, source_position) -> float:
    """Compact loading-noise pressure at the observer for the given dF/dt."""
    rel = observer.position - np.asarray(source_position, dtype=float)
    r = float(np.linalg.norm(rel))
    if r <= 0:
        raise ValueError("observer coincides with the compact source")
    i_r = rel / r
    return float(i_r @ np.asarray(dFdt, dtype=float)) / (4.0 * np.pi * observer.c0 * r)


class RetardedDelayLine:
    """Opt-in retarded-time bookkeeping: emissions surface at t + r/c0."""

    def __init__(self):
        self._queue: list[tuple[float, int, float]] = []
        self._seq = 0

    def push(self, emit_time: float, travel_time: float, value: float):
        heapq.heappush(self._queue, (emit_time + travel_time, self._seq, value))
        self._seq += 1

    def pop_ready(self, now: float):
        """All values whose arrival time has passed, in arrival order."""
        out = []
        while self._queue and self._queue[0][0] <= now:
            arrival, _, value = heapq.heappop(self._queue)
            out.append((arrival, value))
        return out


@dataclass(frozen=True)
class SpectralPeak:
    omega: float  # rad/s
    magnitude: float
    phase: float
    weight: float  # normalized across the set


@dataclass(frozen=True)
class SpectralPeakSet:
    peaks: tuple[SpectralPeak, ...]  # sorted by magnitude descending
    window_length: int
    hop: int
    taper: str = "hann"

    def __len__(self):
        return len(self.peaks)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.peaks])


@dataclass(frozen=True)
class ForceSpectrum:
    """One-sided combined spectrum of the windowed dF/dt signal.

    magnitudes[k] is the Euclidean norm across the three axis transforms at
    bin k; phases[k] comes from the axis with the largest magnitude there.
    """

    omegas: np.ndarray
    magnitudes: np.ndarray
    phases: np.ndarray
    window_length: int
    dt: float


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann taper."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def sliding_spectrum(history: ForceHistory) -> ForceSpectrum:
    """DFT of the Hann-tapered dF/dt window; bin k maps to 2 pi k / (W dt)."""
    if not history.full:
        raise ValueError("force window not full yet")
    dfdt = history.derivative_series()
    w = hann_window(history.capacity)
    tapered = dfdt * w[:, None]
    spec = np.fft.rfft(tapered, axis=0)
    mags = np.linalg.norm(np.abs(spec), axis=1)
    dominant = np.argmax(np.abs(spec), axis=1)
    phases = np.angle(spec[np.arange(spec.shape[0]), dominant])
    omegas = 2.0 * np.pi * np.arange(spec.shape[0]) / (history.capacity * history.dt)
    return ForceSpectrum(
        omegas=omegas, magnitudes=mags, phases=phases,
        window_length=history.capacity, dt=history.dt,
    )


def detect_peaks(spectrum: ForceSpectrum, max_peaks: int = 8,
                 min_prominence: float = 0.1, hop: int = 64) -> SpectralPeakSet:
    """Strict local maxima above min_prominence * global max, top-k by magnitude.

    An empty result is legitimate (laminar regime); the synthesis stage then
    falls back to its default tone.
    """
    m = spectrum.magnitudes
    peaks = []
    if len(m) >= 3:
        top = float(m.max())
        if top > 0.0:
            k = np.arange(1, len(m) - 1)
            is_peak = (m[k] > m[k - 1]) & (m[k] > m[k + 1]) & (m[k] >= min_prominence * top)
            for idx in k[is_peak]:
                peaks.append((float(m[idx]), float(spectrum.omegas[idx]), float(spectrum.phases[idx])))
    peaks.sort(reverse=True)
    peaks = peaks[:max_peaks]
    total = sum(p[0] for p in peaks)
    entries = tuple(
        SpectralPeak(omega=om, magnitude=mag, phase=ph, weight=mag / total)
        for mag, om, ph in peaks
    )
    return SpectralPeakSet(peaks=entries, window_length=spectrum.window_length, hop=hop)
