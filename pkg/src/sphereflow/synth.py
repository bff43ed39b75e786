"""Additive sound synthesis with hysteresis-smoothed oscillator retuning.

The far-field pressure magnitude drives a tanh amplitude envelope; detected
spectral peaks drive a bank of sinusoidal oscillators whose membership and
frequencies change only through hysteresis rules (attack threshold, hold
window, slew limiting), suppressing zipper and flutter artifacts. With no
peaks available the bank falls back to a single default tone so audio output
never stops.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np

from .acoustics import SpectralPeakSet

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class HysteresisSpec:
    attack_ratio: float = 1.25     # new peak must exceed this multiple of the weakest weight
    hold_blocks: int = 4           # blocks a retired/just-placed oscillator persists
    slew_limit: float = 0.03       # max relative frequency change per block
    amplitude_smoothing: float = 0.05  # seconds, exponential weight smoothing

    def __post_init__(self):
        if self.attack_ratio <= 1.0:
            raise ValueError("attack_ratio must be > 1")
        if self.hold_blocks < 0:
            raise ValueError("hold_blocks must be >= 0")
        if not 0.0 < self.slew_limit < 1.0:
            raise ValueError("slew_limit must lie in (0, 1)")

    @property
    def match_window(self) -> float:
        """Relative frequency distance within which a peak retunes an oscillator."""
        return 3.0 * self.slew_limit


@dataclass(frozen=True)
class SynthConfig:
    alpha: float = 500.0           # pressure-to-amplitude scale, 1/Pa
    sample_rate: int = 44100
    block_size: int = 512
    max_oscillators: int = 8
    fallback_omega: float = TWO_PI * 220.0
    hysteresis: HysteresisSpec = field(default_factory=HysteresisSpec)

    def __post_init__(self):
        if self.alpha <= 0 or self.sample_rate <= 0 or self.block_size <= 0:
            raise ValueError("alpha, sample_rate and block_size must be positive")
        if self.max_oscillators < 1:
            raise ValueError("max_oscillators must be >= 1")


_BELOW_ONE = math.nextafter(1.0, 0.0)


def amplitude_envelope(p_prime: float, alpha: float) -> float:
    """A = tanh(alpha * |p'|): monotone, sign-blind, strictly below 1.

    tanh saturates to 1.0 exactly in doubles for large arguments; clamp one
    ulp down so the strict bound (and the sample bound |s| <= A < 1) holds.
    """
    return min(math.tanh(alpha * abs(p_prime)), _BELOW_ONE)


@dataclass
class Oscillator:
    omega: float
    weight: float
    base_phase: float = 0.0
    sample_offset: int = 0  # samples rendered since base_phase was folded
    age: int = 0            # blocks since creation or membership change
    hold: int = 0           # >0 while retiring
    expired: bool = False   # retirement finished; removed at end of update
    is_fallback: bool = False

    @property
    def retiring(self) -> bool:
        return self.hold > 0

    def phase_at(self, sample_rate: float) -> float:
        """Current effective phase (for parameter snapshots)."""
        return (self.base_phase + self.omega * self.sample_offset / sample_rate) % TWO_PI

    def retune(self, new_omega: float, sample_rate: float):
        """Fold the accumulated phase so the waveform stays continuous."""
        self.base_phase = self.phase_at(sample_rate)
        self.sample_offset = 0
        self.omega = new_omega


class OscillatorBank:
    """Oscillator set plus the persistent fallback phase and last amplitude."""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.oscillators: list[Oscillator] = []
        self.fallback_engaged = False
        self._fallback_phase = 0.0
        self.last_amplitude = 0.0
        self._samples_rendered = 0

    def __len__(self):
        return len(self.oscillators)

    @property
    def weights(self) -> np.ndarray:
        return np.array([o.weight for o in self.oscillators])

    def live(self):
        return [o for o in self.oscillators if not o.retiring]

    def parameter_snapshot(self):
        """(freq_hz, weight, phase) triples for streaming to clients."""
        sr = self.config.sample_rate
        return [
            {"freq_hz": o.omega / TWO_PI, "weight": o.weight, "phase": o.phase_at(sr)}
            for o in self.oscillators
        ]


def fallback_tone(config: SynthConfig, bank: OscillatorBank | None = None):
    """Default-tone parameters: (omega_d, weight 1, persistent phase)."""
    phase = bank._fallback_phase if bank is not None else 0.0
    return config.fallback_omega, 1.0, phase


def _smoothing_coefficient(spec: HysteresisSpec, hop_seconds: float) -> float:
    if spec.amplitude_smoothing <= 0:
        return 1.0
    return 1.0 - math.exp(-hop_seconds / spec.amplitude_smoothing)


def update_bank(bank: OscillatorBank, peaks: SpectralPeakSet | None,
                spec: HysteresisSpec | None = None, hop_seconds: float | None = None) -> OscillatorBank:
    """Advance the bank one analysis block under the hysteresis rules.

    Matched oscillators retune toward their peak (slew-limited) and smooth
    toward its weight; unmatched ones retire over the hold window; new peaks
    displace the weakest aged oscillator only past the attack threshold. An
    empty peak set with an empty bank engages the fallback tone.
    """
    cfg = bank.config
    spec = spec or cfg.hysteresis
    if hop_seconds is None:
        hop_seconds = cfg.block_size / cfg.sample_rate
    coef = _smoothing_coefficient(spec, hop_seconds)
    sr = cfg.sample_rate
    incoming = list(peaks.peaks) if peaks is not None else []

    for osc in bank.oscillators:
        osc.age += 1

    matched: dict[int, float] = {}  # oscillator index -> target weight
    unclaimed = []
    taken = set()
    for peak in incoming:  # already sorted by magnitude descending
        best, best_dist = None, None
        for i, osc in enumerate(bank.oscillators):
            if i in taken or osc.omega <= 0:
                continue
            dist = abs(peak.omega - osc.omega) / osc.omega
            if dist <= spec.match_window and (best_dist is None or dist < best_dist):
                best, best_dist = i, dist
        if best is None:
            unclaimed.append(peak)
        else:
            taken.add(best)
            osc = bank.oscillators[best]
            ratio = np.clip(peak.omega / osc.omega, 1.0 - spec.slew_limit, 1.0 + spec.slew_limit)
            if ratio != 1.0:
                osc.retune(osc.omega * ratio, sr)
            matched[best] = peak.weight
            osc.hold = 0  # matched oscillators are (or become) live

    for i, osc in enumerate(bank.oscillators):
        if i in matched:
            osc.weight += coef * (matched[i] - osc.weight)
        elif not osc.retiring:
            osc.hold = max(spec.hold_blocks, 1)  # enter retirement
            osc.weight *= 0.5
        else:
            osc.hold -= 1
            osc.weight *= 0.5  # decaying weight while retired
            if osc.hold <= 0:
                osc.expired = True
    bank.oscillators = [o for o in bank.oscillators if not o.expired]

    for peak in unclaimed:
        live = [o for o in bank.oscillators if not o.retiring]
        if len(live) < cfg.max_oscillators:
            bank.oscillators.append(
                Oscillator(omega=peak.omega, weight=peak.weight, base_phase=peak.phase)
            )
            continue
        eligible = [o for o in live if o.age >= spec.hold_blocks]
        if not eligible:
            continue
        weakest = min(eligible, key=lambda o: o.weight)
        if peak.weight >= spec.attack_ratio * weakest.weight:
            weakest.hold = max(spec.hold_blocks, 1)  # retire, keep decaying
            bank.oscillators.append(
                Oscillator(omega=peak.omega, weight=peak.weight, base_phase=peak.phase)
            )

    if not bank.oscillators:
        bank.fallback_engaged = True
        omega_d, weight, phase = fallback_tone(cfg, bank)
        bank.oscillators.append(
            Oscillator(omega=omega_d, weight=weight, base_phase=phase, is_fallback=True)
        )
    else:
        bank.fallback_engaged = all(o.is_fallback for o in bank.oscillators)

    total = sum(o.weight for o in bank.oscillators)
    if total > 0:
        for osc in bank.oscillators:
            osc.weight /= total
    return bank


@dataclass(frozen=True)
class AudioBlock:
    samples: np.ndarray
    start_time: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if not np.all(np.isfinite(s)):
            raise ValueError("audio block contains non-finite samples")
        if np.any(np.abs(s) > 1.0):
            raise ValueError("audio block exceeds [-1, 1]")
        object.__setattr__(self, "samples", s)


def render_block(bank: OscillatorBank, amplitude: float, config: SynthConfig | None = None) -> AudioBlock:
    """Render one block: A(t) * sum_k w_k sin(omega_k t + phi_k).

    The amplitude is linearly interpolated from the previous block's value to
    avoid steps at block boundaries; oscillator phases advance continuously.
    """
    cfg = config or bank.config
    n = cfg.block_size
    sr = float(cfg.sample_rate)
    env = np.linspace(bank.last_amplitude, amplitude, n, endpoint=False)
    out = np.zeros(n)
    if bank.oscillators:
        for osc in bank.oscillators:
            t = (osc.sample_offset + np.arange(n)) / sr
            out += osc.weight * np.sin(osc.base_phase + osc.omega * t)
            osc.sample_offset += n
            if osc.is_fallback:
                bank._fallback_phase = osc.phase_at(sr)
    out *= env
    start = bank._samples_rendered / sr
    bank._samples_rendered += n
    bank.last_amplitude = amplitude
    return AudioBlock(samples=out, start_time=start)


def write_wav(path, samples, sample_rate: int = 44100):
    """Mono 16-bit little-endian PCM."""
    data = np.clip(np.asarray(samples, dtype=float), -1.0, 1.0)
    pcm = (data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    """Read back a mono 16-bit PCM file as (samples in [-1, 1], sample_rate)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError("expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(float) / 32767.0, rate
