"""WebSocket wire protocol for steering and observing a running engine.

Messages are JSON. Client to server: {"type": "command", "seq": n,
"payload": {...}}. Server to client: acks/rejects echoing the seq,
"snapshot" messages (field arrays as base64 little-endian float32), and
"audio_params" messages carrying the oscillator parameters the client
synthesizes from. Each client gets the newest snapshot only (latest-wins);
slow consumers never back-pressure the stepping loop.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import threading

import numpy as np

from .engine import Engine

log = logging.getLogger(__name__)


def encode_f32(arr) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(float)


def snapshot_to_wire(snap: dict) -> str:
    msg = dict(snap)
    msg["pressure"] = encode_f32(snap["pressure"])
    msg["speed"] = encode_f32(snap["speed"])
    return json.dumps(msg)


async def _client_session(engine: Engine, websocket, poll_seconds: float):
    async def sender():
        snap_version = 0
        params_version = 0
        while True:
            v, snap = await asyncio.to_thread(
                engine.snapshots.wait_newer, snap_version, poll_seconds)
            if v > snap_version and snap is not None:
                snap_version = v
                await websocket.send(snapshot_to_wire(snap))
            pv, params = engine.audio_params.get()
            if pv > params_version and params is not None:
                params_version = pv
                await websocket.send(json.dumps(params))

    send_task = asyncio.create_task(sender())
    try:
        async for raw in websocket:
            try:
                message = json.loads(raw)
            except json.JSONDecodeError:
                await websocket.send(json.dumps(
                    {"type": "reject", "seq": None, "reason": "malformed JSON"}))
                continue
            response = engine.handle_command(message)
            await websocket.send(json.dumps(response))
    finally:
        send_task.cancel()


async def serve(engine: Engine, host: str = "127.0.0.1", port: int = 8765,
                ready: threading.Event | None = None,
                stop: asyncio.Event | None = None, poll_seconds: float = 0.05):
    """Accept clients until ``stop`` is set (forever when stop is None)."""
    from websockets.asyncio.server import serve as ws_serve

    stop = stop or asyncio.Event()

    async def handler(websocket):
        try:
            await _client_session(engine, websocket, poll_seconds)
        except Exception as exc:  # client went away; keep serving others
            log.debug("client session ended: %s", exc)

    async with ws_serve(handler, host, port) as server:
        bound_port = server.sockets[0].getsockname()[1] if server.sockets else port
        log.info("listening on ws://%s:%d", host, bound_port)
        if ready is not None:
            ready.port = bound_port  # type: ignore[attr-defined]
            ready.set()
        await stop.wait()


class ServerHandle:
    """Engine loop plus WebSocket server running on background threads."""

    def __init__(self, engine: Engine, host: str, port: int):
        self.engine = engine
        self.host = host
        self.port = port
        self._engine_thread = None
        self._engine_stop = None
        self._ws_thread = None
        self._loop = None
        self._ws_stop = None

    def start(self):
        self._engine_thread, self._engine_stop = self.engine.start()
        ready = threading.Event()

        def run():
            self._loop = asyncio.new_event_loop()
            asyncio.set_event_loop(self._loop)
            self._ws_stop = asyncio.Event()
            self._loop.run_until_complete(
                serve(self.engine, self.host, self.port, ready=ready, stop=self._ws_stop))

        self._ws_thread = threading.Thread(target=run, daemon=True, name="sphereflow-server")
        self._ws_thread.start()
        if not ready.wait(timeout=10.0):
            raise RuntimeError("server did not start in time")
        self.port = getattr(ready, "port", self.port)
        return self

    def stop(self):
        if self._engine_stop is not None:
            self._engine_stop.set()
        if self._loop is not None and self._ws_stop is not None:
            self._loop.call_soon_threadsafe(self._ws_stop.set)
        if self._engine_thread is not None:
            self._engine_thread.join(timeout=5.0)
        if self._ws_thread is not None:
            self._ws_thread.join(timeout=5.0)


def parse_listen_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {text!r}")
    return host, int(port)
