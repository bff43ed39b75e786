"""Command-line entry points.

Subcommands: run (live engine + WebSocket service), verify-mms (manufactured
solution harness), analyze (offline force-log spectra), record-audio
(server-side PCM rendering), bench (steps/s with solver breakdown).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading

import numpy as np

from .acoustics import ForceHistory, ForceSample, detect_peaks, fwh_pressure, sliding_spectrum
from .engine import Engine, EngineConfig, bench, run_headless
from .mms import MMSConfig, run_verification
from .synth import amplitude_envelope, render_block, update_bank, write_wav


def _load_config(path) -> EngineConfig:
    if path is None:
        return EngineConfig()
    return EngineConfig.from_json(path)


def _attach_force_log(engine: Engine, path):
    fh = open(path, "w")

    def listener(sample):
        fh.write(json.dumps({"t": sample.t, "F": list(map(float, sample.F))}) + "\n")

    engine.force_listeners.append(listener)
    return fh


def _attach_diag_csv(engine: Engine, path):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "time", "div_l2", "div_max", "solver_iterations",
                     "solver_residual", "max_backtrack_cells"])

    def listener(state):
        d = state.diagnostics
        writer.writerow([state.step_count, f"{state.time:.6f}", f"{d.div_l2:.6e}",
                         f"{d.div_max:.6e}", d.solver_iterations,
                         f"{d.solver_residual:.3e}", f"{d.max_backtrack_cells:.3f}"])

    engine.step_listeners.append(listener)
    return fh


def cmd_run(args) -> int:
    config = _load_config(args.config)
    engine = Engine(config)
    handles = []
    if args.force_log:
        handles.append(_attach_force_log(engine, args.force_log))
    if args.diag_csv:
        handles.append(_attach_diag_csv(engine, args.diag_csv))

    try:
        if args.headless:
            if args.steps:
                for _ in range(args.steps):
                    engine.step_once()
                print(f"ran {engine.state.step_count} steps, "
                      f"t={engine.state.time:.4f}s, overruns={engine.overruns}")
                return 0
            stop = threading.Event()
            signal.signal(signal.SIGINT, lambda *_: stop.set())
            print("headless engine running; Ctrl-C to stop")
            engine.run_loop(stop)
            return 0

        from .server import ServerHandle, parse_listen_address

        host, port = parse_listen_address(args.listen or config.listen_address)
        handle = ServerHandle(engine, host, port).start()
        print(f"engine + service on ws://{handle.host}:{handle.port}; Ctrl-C to stop")
        stop = threading.Event()
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        try:
            stop.wait()
        finally:
            handle.stop()
        return 0
    finally:
        for fh in handles:
            fh.close()


def cmd_verify_mms(args) -> int:
    resolutions = tuple(int(r) for r in args.resolutions.split(","))
    kwargs = {"resolutions": resolutions}
    if args.dt is not None:
        kwargs["dt"] = args.dt
    report = run_verification(MMSConfig(**kwargs))
    print(report.console())
    if args.csv:
        report.to_csv(args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_analyze(args) -> int:
    config = _load_config(args.config)
    acfg = config.analysis
    observer = config.observer
    center = config.sphere.center
    history = ForceHistory(acfg.window)

    rows = []
    with open(args.input) as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            history.append(ForceSample(t=float(rec["t"]), F=rec["F"]))
            if not history.full or (line_no + 1) % acfg.hop != 0:
                continue
            spectrum = sliding_spectrum(history)
            peaks = detect_peaks(spectrum, max_peaks=acfg.max_peaks,
                                 min_prominence=acfg.min_prominence, hop=acfg.hop)
            p_prime = fwh_pressure(history.derivative(), observer, center)
            row = [f"{rec['t']:.6f}", f"{abs(p_prime):.6e}"]
            for peak in peaks.peaks:
                row += [f"{peak.omega / (2 * np.pi):.3f}", f"{peak.weight:.4f}"]
            rows.append(row)

    max_peak_cols = max((len(r) - 2 for r in rows), default=0) // 2
    header = ["time", "abs_p_prime"]
    for i in range(max_peak_cols):
        header += [f"peak{i + 1}_hz", f"peak{i + 1}_weight"]
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {args.csv} ({len(rows)} windows)")
    return 0


def cmd_record_audio(args) -> int:
    config = _load_config(args.config)
    engine = Engine(config)
    synth_cfg = config.synth
    params_fh = open(args.params_out, "w") if args.params_out else None

    samples = []
    rendered = 0
    params_version = 0
    target_samples = int(args.seconds * synth_cfg.sample_rate)
    step_guard = int(args.seconds / config.solver.dt) + config.analysis.window + 16

    for _ in range(step_guard):
        if rendered >= target_samples:
            break
        engine.step_once()
        v, msg = engine.audio_params.get()
        if v != params_version and msg is not None:
            params_version = v
            if params_fh:
                params_fh.write(json.dumps(msg) + "\n")
        # keep the audio clock caught up with the simulation clock
        while rendered / synth_cfg.sample_rate < engine.state.time and rendered < target_samples:
            block = render_block(engine.bank, engine.amplitude, synth_cfg)
            samples.append(block.samples)
            rendered += len(block.samples)

    while rendered < target_samples:
        block = render_block(engine.bank, engine.amplitude, synth_cfg)
        samples.append(block.samples)
        rendered += len(block.samples)

    audio = np.concatenate(samples)[:target_samples] if samples else np.zeros(target_samples)
    write_wav(args.wav, audio, synth_cfg.sample_rate)
    if params_fh:
        params_fh.close()
        print(f"wrote {args.params_out}")
    print(f"wrote {args.wav}: {len(audio)} samples at {synth_cfg.sample_rate} Hz "
          f"({engine.state.step_count} solver steps)")
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    result = bench(args.grid, args.steps, config)
    print(f"resolution {result['resolution']} ({result['band_points']} band points): "
          f"{result['steps_per_second']:.1f} steps/s over {result['steps']} steps")
    total = result["seconds"]
    print("breakdown:")
    for name, seconds in result["breakdown"].items():
        print(f"  {name:16s} {seconds:8.3f}s  ({100.0 * seconds / total:5.1f}%)")
    info = result["solver_info"]
    print(f"pressure solve: method={info.get('method')}, iterations={info.get('iterations')}, "
          f"residual={info.get('residual', 0.0):.2e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sphereflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the live engine and WebSocket service")
    p.add_argument("--config", help="JSON engine config")
    p.add_argument("--headless", action="store_true", help="no service, just the loop")
    p.add_argument("--listen", help="host:port override")
    p.add_argument("--steps", type=int, help="headless: stop after N steps")
    p.add_argument("--force-log", help="write force samples (JSON lines)")
    p.add_argument("--diag-csv", help="write per-step diagnostics CSV")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("verify-mms", help="manufactured-solution verification")
    p.add_argument("--resolutions", default="11,13,15,17")
    p.add_argument("--csv", help="write the report as CSV")
    p.add_argument("--dt", type=float, help="override the calibrated time step")
    p.set_defaults(fn=cmd_verify_mms)

    p = sub.add_parser("analyze", help="per-window spectra from a force log")
    p.add_argument("--input", required=True, help="force log (JSON lines) from run --force-log")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--config", help="JSON engine config (observer, window, hop)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("record-audio", help="render the synthesized stream to WAV")
    p.add_argument("--seconds", type=float, required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--config", help="JSON engine config")
    p.add_argument("--params-out", help="also write the audio parameter stream (JSON lines)")
    p.set_defaults(fn=cmd_record_audio)

    p = sub.add_parser("bench", help="steps/s at a given resolution")
    p.add_argument("--grid", type=int, required=True, help="grid resolution per axis")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--config", help="JSON engine config")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
