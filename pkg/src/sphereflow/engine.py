"""Real-time orchestration: simulate, integrate forces, analyze, synthesize.

The engine owns the single mutable FlowState. Commands arrive through a
multi-producer queue and are drained atomically between steps; snapshots and
audio parameters are published through latest-wins mailboxes so slow
consumers never queue up behind the stepping loop.
"""

from __future__ import annotations

import collections
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fluid
from .acoustics import (ForceHistory, ObserverConfig, RetardedDelayLine,
                        SurfaceQuadrature, detect_peaks, fwh_pressure,
                        sliding_spectrum)
from .fields import trilinear_interpolate
from .fluid import FlowState, ForcingSpec, SolverConfig, SolverFailure
from .geometry import (GeometryError, GridSpec, Obstacle, SphereSurface,
                       build_narrow_band)
from .synth import OscillatorBank, SynthConfig, HysteresisSpec, amplitude_envelope, update_bank

log = logging.getLogger(__name__)


class CommandError(ValueError):
    """Rejected command; the message is the machine-readable reason."""


@dataclass(frozen=True)
class AnalysisConfig:
    window: int = 256
    hop: int = 64
    max_peaks: int = 8
    min_prominence: float = 0.1
    quadrature_points: int = 2000
    force_fifo_capacity: int = 1024

    def __post_init__(self):
        if self.window < 8 or self.hop < 1 or self.hop > self.window:
            raise ValueError("need window >= 8 and 1 <= hop <= window")


@dataclass(frozen=True)
class EngineConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(resolution=25))
    sphere: SphereSurface = field(default_factory=SphereSurface)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        dt=1e-3, forcing=ForcingSpec(strength=30.0)))
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    obstacles: tuple[Obstacle, ...] = ()
    band_half_width_cells: float = 3.0
    target_steps_per_second: int = 200
    snapshot_stride: int = 16
    listen_address: str = "127.0.0.1:8765"

    def __post_init__(self):
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if self.target_steps_per_second < 1:
            raise ValueError("target_steps_per_second must be >= 1")
        self.observer.validate_outside(self.sphere)
        for ob in self.obstacles:
            ob.validate_radius(self.sphere)

    # --- JSON round trip -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "grid": {
                "resolution": self.grid.resolution,
                "domain_min": list(self.grid.domain_min),
                "domain_max": list(self.grid.domain_max),
            },
            "sphere": {"radius": self.sphere.radius, "center": list(self.sphere.center)},
            "solver": {
                "dt": self.solver.dt,
                "rho0": self.solver.rho0,
                "direct_solver_threshold": self.solver.direct_solver_threshold,
                "cg_tolerance": self.solver.cg_tolerance,
                "cg_max_iterations": self.solver.cg_max_iterations,
                "forcing": {
                    "center_direction": list(self.solver.forcing.center_direction),
                    "angular_width": self.solver.forcing.angular_width,
                    "strength": self.solver.forcing.strength,
                    "direction_mode": self.solver.forcing.direction_mode,
                },
            },
            "observer": {
                "position": list(self.observer.position),
                "c0": self.observer.c0,
                "use_retarded_time": self.observer.use_retarded_time,
            },
            "synth": {
                "alpha": self.synth.alpha,
                "sample_rate": self.synth.sample_rate,
                "block_size": self.synth.block_size,
                "max_oscillators": self.synth.max_oscillators,
                "fallback_omega": self.synth.fallback_omega,
                "hysteresis": {
                    "attack_ratio": self.synth.hysteresis.attack_ratio,
                    "hold_blocks": self.synth.hysteresis.hold_blocks,
                    "slew_limit": self.synth.hysteresis.slew_limit,
                    "amplitude_smoothing": self.synth.hysteresis.amplitude_smoothing,
                },
            },
            "analysis": {
                "window": self.analysis.window,
                "hop": self.analysis.hop,
                "max_peaks": self.analysis.max_peaks,
                "min_prominence": self.analysis.min_prominence,
                "quadrature_points": self.analysis.quadrature_points,
                "force_fifo_capacity": self.analysis.force_fifo_capacity,
            },
            "obstacles": [
                {
                    "center_direction": list(ob.center_direction),
                    "geodesic_radius": ob.geodesic_radius,
                    "height": ob.height,
                }
                for ob in self.obstacles
            ],
            "band_half_width_cells": self.band_half_width_cells,
            "target_steps_per_second": self.target_steps_per_second,
            "snapshot_stride": self.snapshot_stride,
            "listen_address": self.listen_address,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        kw = {}
        if "grid" in data:
            kw["grid"] = GridSpec(**data["grid"])
        if "sphere" in data:
            kw["sphere"] = SphereSurface(**data["sphere"])
        if "solver" in data:
            s = dict(data["solver"])
            if "forcing" in s:
                s["forcing"] = ForcingSpec(**s["forcing"])
            kw["solver"] = SolverConfig(**s)
        if "observer" in data:
            kw["observer"] = ObserverConfig(**data["observer"])
        if "synth" in data:
            s = dict(data["synth"])
            if "hysteresis" in s:
                s["hysteresis"] = HysteresisSpec(**s["hysteresis"])
            kw["synth"] = SynthConfig(**s)
        if "analysis" in data:
            kw["analysis"] = AnalysisConfig(**data["analysis"])
        if "obstacles" in data:
            kw["obstacles"] = tuple(Obstacle(**ob) for ob in data["obstacles"])
        for key in ("band_half_width_cells", "target_steps_per_second",
                    "snapshot_stride", "listen_address"):
            if key in data:
                kw[key] = data[key]
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "EngineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


VALID_COMMANDS = ("add_obstacle", "remove_obstacle", "set_forcing", "set_observer",
                  "pause", "resume", "reset", "set_dt")


@dataclass(frozen=True)
class Command:
    op: str
    obstacle: Obstacle | None = None
    index: int | None = None
    forcing: ForcingSpec | None = None
    position: np.ndarray | None = None
    dt: float | None = None


class _Latest:
    """Latest-wins mailbox with a version counter for change detection."""

    def __init__(self):
        self._cond = threading.Condition()
        self._value = None
        self.version = 0

    def publish(self, value):
        with self._cond:
            self._value = value
            self.version += 1
            self._cond.notify_all()

    def get(self):
        with self._cond:
            return self.version, self._value

    def wait_newer(self, version: int, timeout: float = 0.25):
        """Block until a version above ``version`` exists (or timeout); returns
        (version, value) either way."""
        with self._cond:
            self._cond.wait_for(lambda: self.version > version, timeout=timeout)
            return self.version, self._value


class Engine:
    """Owns the pipeline: drain commands -> step -> force -> analysis -> publish."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self.band = build_narrow_band(config.grid, config.sphere, config.band_half_width_cells)
        self.op = fluid.assemble_laplacian(self.band)
        self.quadrature = SurfaceQuadrature.build(config.sphere, config.analysis.quadrature_points)
        self.solver = config.solver
        self.observer = config.observer
        self.state = FlowState.zeros(self.band, config.obstacles)
        self.history = ForceHistory(config.analysis.window)
        self.bank = OscillatorBank(config.synth)
        self.delay = RetardedDelayLine()
        self.epoch = 0
        self.paused = False
        self.amplitude = 0.0
        self.p_prime = 0.0
        self.latest_peaks = None
        self.overruns = 0
        self.dropped_forces = 0
        self.last_step_seconds = 0.0
        self._commands: queue.Queue = queue.Queue()
        self._seen_seqs: set[int] = set()
        self._force_fifo = collections.deque()
        self.snapshots = _Latest()
        self.audio_params = _Latest()
        self.timings: dict | None = None  # set by bench() for phase breakdowns
        self.force_listeners: list = []   # e.g. the CLI force log
        self.step_listeners: list = []    # e.g. the CLI diagnostics CSV

    # --- commands ---------------------------------------------------------
    def parse_command(self, payload) -> Command:
        if not isinstance(payload, dict):
            raise CommandError("payload must be an object")
        op = payload.get("op")
        if op not in VALID_COMMANDS:
            raise CommandError(f"unknown command op {op!r}")
        try:
            if op == "add_obstacle":
                spec = payload.get("obstacle")
                if not isinstance(spec, dict):
                    raise CommandError("add_obstacle requires an 'obstacle' object")
                ob = Obstacle(
                    center_direction=spec.get("center_direction", (0, 0, 1)),
                    geodesic_radius=float(spec.get("geodesic_radius", 0.0)),
                    height=float(spec.get("height", 0.0)),
                )
                ob.validate_radius(self.config.sphere)
                return Command(op=op, obstacle=ob)
            if op == "remove_obstacle":
                index = payload.get("index")
                if not isinstance(index, int) or index < 0:
                    raise CommandError("remove_obstacle requires a non-negative integer index")
                return Command(op=op, index=index)
            if op == "set_forcing":
                spec = payload.get("forcing")
                if not isinstance(spec, dict):
                    raise CommandError("set_forcing requires a 'forcing' object")
                return Command(op=op, forcing=ForcingSpec(**spec))
            if op == "set_observer":
                pos = np.asarray(payload.get("position", ()), dtype=float)
                if pos.shape != (3,):
                    raise CommandError("set_observer requires a 3-vector position")
                obs = replace(self.observer, position=pos)
                obs.validate_outside(self.config.sphere)
                return Command(op=op, position=pos)
            if op == "set_dt":
                dt = payload.get("dt")
                if not isinstance(dt, (int, float)) or dt <= 0:
                    raise CommandError("set_dt requires dt > 0")
                return Command(op=op, dt=float(dt))
        except CommandError:
            raise
        except (GeometryError, ValueError, TypeError) as exc:
            raise CommandError(str(exc)) from exc
        return Command(op=op)

    def handle_command(self, message) -> dict:
        """Validate one wire message; enqueue if valid. Returns the ack/reject."""
        if not isinstance(message, dict) or message.get("type") != "command":
            return {"type": "reject", "seq": message.get("seq") if isinstance(message, dict) else None,
                    "reason": "expected {type:'command', seq, payload}"}
        seq = message.get("seq")
        if not isinstance(seq, int):
            return {"type": "reject", "seq": seq, "reason": "seq must be an integer"}
        if seq in self._seen_seqs:
            return {"type": "ack", "seq": seq, "duplicate": True}
        try:
            command = self.parse_command(message.get("payload"))
        except CommandError as exc:
            return {"type": "reject", "seq": seq, "reason": str(exc)}
        self._seen_seqs.add(seq)
        self._commands.put(command)
        return {"type": "ack", "seq": seq}

    def submit(self, command: Command):
        self._commands.put(command)

    def _apply_command(self, cmd: Command):
        if cmd.op == "pause":
            self.paused = True
        elif cmd.op == "resume":
            self.paused = False
        elif cmd.op == "reset":
            self.reset()
        elif cmd.op == "add_obstacle":
            self.state.obstacles = self.state.obstacles + (cmd.obstacle,)
        elif cmd.op == "remove_obstacle":
            obs = list(self.state.obstacles)
            if 0 <= cmd.index < len(obs):  # stale indices are a no-op
                obs.pop(cmd.index)
                self.state.obstacles = tuple(obs)
        elif cmd.op == "set_forcing":
            self.solver = replace(self.solver, forcing=cmd.forcing)
        elif cmd.op == "set_dt":
            self.solver = replace(self.solver, dt=cmd.dt)
        elif cmd.op == "set_observer":
            self.observer = replace(self.observer, position=cmd.position)

    def drain_commands(self):
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                return
            self._apply_command(cmd)

    def reset(self):
        self.state = FlowState.zeros(self.band, self.config.obstacles)
        self.solver = self.config.solver
        self.observer = self.config.observer
        self.history = ForceHistory(self.config.analysis.window)
        self.bank = OscillatorBank(self.config.synth)
        self.delay = RetardedDelayLine()
        self._force_fifo.clear()
        self.amplitude = 0.0
        self.p_prime = 0.0
        self.latest_peaks = None
        self.epoch += 1

    # --- pipeline ---------------------------------------------------------
    def _push_force(self, sample):
        if len(self._force_fifo) >= self.config.analysis.force_fifo_capacity:
            self._force_fifo.popleft()
            self.dropped_forces += 1
        self._force_fifo.append(sample)
        for listener in self.force_listeners:
            listener(sample)

    def _analyze(self):
        """Consume queued force samples; refresh p', A, peaks and the bank at hops."""
        cfg = self.config.analysis
        while self._force_fifo:
            self.history.append(self._force_fifo.popleft())
        dfdt = self.history.derivative()
        if dfdt is None:
            return
        center = self.config.sphere.center
        p_now = fwh_pressure(dfdt, self.observer, center)
        if self.observer.use_retarded_time:
            travel = float(np.linalg.norm(self.observer.position - center)) / self.observer.c0
            self.delay.push(self.state.time, travel, p_now)
            ready = self.delay.pop_ready(self.state.time)
            if ready:
                self.p_prime = ready[-1][1]
        else:
            self.p_prime = p_now
        self.amplitude = amplitude_envelope(self.p_prime, self.config.synth.alpha)

        if self.state.step_count % cfg.hop == 0 and self.history.full:
            spectrum = sliding_spectrum(self.history)
            self.latest_peaks = detect_peaks(
                spectrum, max_peaks=cfg.max_peaks,
                min_prominence=cfg.min_prominence, hop=cfg.hop,
            )
            hop_seconds = cfg.hop * self.solver.dt
            update_bank(self.bank, self.latest_peaks, self.config.synth.hysteresis, hop_seconds)
            self.audio_params.publish(self.audio_message())

    def audio_message(self) -> dict:
        return {
            "type": "audio_params",
            "time": self.state.time,
            "amplitude": self.amplitude,
            "peaks": self.bank.parameter_snapshot(),
        }

    def step_once(self) -> bool:
        """Drain commands and advance one step; False while paused."""
        self.drain_commands()
        if self.paused:
            return False
        t0 = time.perf_counter()
        try:
            self.state = fluid.step(
                self.state, self.solver, self.band, self.op,
                quadrature=self.quadrature, force_sink=self._push_force,
                timings=self.timings,
            )
        except SolverFailure as exc:
            log.error("solver failure: %s; engine paused", exc)
            self.paused = True
            self.snapshots.publish(self.snapshot(error=str(exc)))
            return False
        t_an = time.perf_counter()
        self._analyze()
        if self.timings is not None:
            self.timings["analysis"] = self.timings.get("analysis", 0.0) + (
                time.perf_counter() - t_an)
        for listener in self.step_listeners:
            listener(self.state)
        self.last_step_seconds = time.perf_counter() - t0
        if self.state.step_count % self.config.snapshot_stride == 0:
            self.snapshots.publish(self.snapshot())
        return True

    def snapshot(self, error: str | None = None) -> dict:
        """Immutable, self-consistent view of the current step for clients."""
        p_surface = self.quadrature.sample_pressure(self.band, self.state.p)
        speed = np.zeros(len(p_surface))
        u = self.state.u
        comps = [trilinear_interpolate(self.band, u[:, k], self.quadrature.points) for k in range(3)]
        speed = np.sqrt(comps[0]**2 + comps[1]**2 + comps[2]**2)
        diag = self.state.diagnostics
        snap = {
            "type": "snapshot",
            "epoch": self.epoch,
            "step": self.state.step_count,
            "time": self.state.time,
            "pressure": np.asarray(p_surface, dtype=np.float32),
            "speed": np.asarray(speed, dtype=np.float32),
            "obstacles": [
                {"center_direction": list(map(float, ob.center_direction)),
                 "geodesic_radius": ob.geodesic_radius, "height": ob.height}
                for ob in self.state.obstacles
            ],
            "p_prime": self.p_prime,
            "amplitude": self.amplitude,
            "peaks": self.bank.parameter_snapshot(),
            "paused": self.paused,
            "diagnostics": {
                "div_l2": diag.div_l2,
                "div_max": diag.div_max,
                "solver_iterations": diag.solver_iterations,
                "solver_residual": diag.solver_residual,
                "max_backtrack_cells": diag.max_backtrack_cells,
                "step_seconds": self.last_step_seconds,
                "overruns": self.overruns,
                "dropped_force_samples": self.dropped_forces,
            },
        }
        if error is not None:
            snap["error"] = error
        return snap

    def run_loop(self, stop: threading.Event):
        """Paced stepping until ``stop`` is set; overruns are counted, physics
        is never skipped."""
        budget = 1.0 / self.config.target_steps_per_second
        while not stop.is_set():
            t0 = time.perf_counter()
            self.step_once()
            elapsed = time.perf_counter() - t0
            remaining = budget - elapsed
            if remaining > 0:
                stop.wait(remaining)
            else:
                self.overruns += 1

    def start(self):
        """Run the loop in a daemon thread; returns (thread, stop_event)."""
        stop = threading.Event()
        thread = threading.Thread(target=self.run_loop, args=(stop,), daemon=True,
                                  name="sphereflow-engine")
        thread.start()
        return thread, stop


def run_headless(config: EngineConfig, steps: int):
    """Step without pacing; returns (engine, audio parameter messages)."""
    engine = Engine(config)
    params = []
    version = 0
    for _ in range(steps):
        engine.step_once()
        v, msg = engine.audio_params.get()
        if v != version and msg is not None:
            params.append(msg)
            version = v
    return engine, params


def bench(resolution: int, steps: int, config: EngineConfig | None = None) -> dict:
    """Measure steps/s with the acoustics pipeline enabled, plus a phase
    breakdown of where the time goes."""
    if config is None:
        config = EngineConfig(grid=GridSpec(resolution=resolution))
    else:
        config = replace(config, grid=GridSpec(resolution=resolution))
    engine = Engine(config)
    engine.step_once()  # warm the caches (extension matrix, neighbors, factorization)

    timings: dict = {}
    engine.timings = timings
    t_total = time.perf_counter()
    for _ in range(steps):
        engine.step_once()
    total = time.perf_counter() - t_total
    engine.timings = None

    return {
        "resolution": resolution,
        "band_points": engine.band.size,
        "steps": steps,
        "seconds": total,
        "steps_per_second": steps / total,
        "breakdown": dict(sorted(timings.items(), key=lambda kv: -kv[1])),
        "solver_info": dict(engine.op.last_solve_info),
    }
