"""Real-time serving: a generation loop owns the engine, a network reader
ingests control messages (latest wins at each token enqueue), and a writer
paces frames out over a WebSocket. Uplink is JSON control messages, downlink
is binary frames; bounded queues sit between the roles and the frame queue
drops oldest under backpressure so a slow client sees index gaps, never an
unbounded buffer.
"""

from __future__ import annotations

import json
import struct
import threading
import time
from collections import deque

import numpy as np
from websockets.sync.server import serve as ws_serve

from .control import UNKNOWN

FRAME_MAGIC = b"FRM1"
_FRAME_HEADER = "<4sIHHI"          # magic, frame_index, W, H, reserved
VALID_KEYS = ("forward", "left", "right")


def pack_frame(index: int, frame: np.ndarray) -> bytes:
    h, w = frame.shape
    return struct.pack(_FRAME_HEADER, FRAME_MAGIC, index, w, h, 0) + frame.tobytes()


def unpack_frame(data: bytes):
    magic, index, w, h, _ = struct.unpack_from(_FRAME_HEADER, data, 0)
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic!r}")
    payload = data[struct.calcsize(_FRAME_HEADER):]
    if len(payload) != w * h:
        raise ValueError("frame payload size mismatch")
    return index, np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def keys_to_symbol(keys) -> str:
    """Key set -> one vocabulary symbol; left beats right, unknown keys ignored."""
    held = {k for k in keys if k in VALID_KEYS}
    if "forward" not in held:
        return UNKNOWN
    if "left" in held:
        return "DL"
    if "right" in held:
        return "DR"
    return "D"


def pace_schedule(produce_times, target_fps: float) -> list:
    """Emission times under the pacing policy: never earlier than production,
    never closer together than one frame period."""
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    period = 1.0 / target_fps
    out = []
    prev = None
    for t in produce_times:
        emit = t if prev is None else max(t, prev + period)
        out.append(emit)
        prev = emit
    return out


class Pacer:
    """Real-time form of pace_schedule with an injectable clock for tests."""

    def __init__(self, target_fps: float, clock=time.monotonic, sleeper=time.sleep):
        if target_fps <= 0:
            raise ValueError("target_fps must be positive")
        self.period = 1.0 / target_fps
        self.clock = clock
        self.sleep = sleeper
        self.next_t = None
        self.emitted = deque(maxlen=64)

    def wait(self) -> float:
        now = self.clock()
        if self.next_t is not None and now < self.next_t:
            self.sleep(self.next_t - now)
            now = self.next_t
        self.next_t = now + self.period
        self.emitted.append(now)
        return now

    def effective_fps(self) -> float:
        if len(self.emitted) < 2:
            return 0.0
        span = self.emitted[-1] - self.emitted[0]
        return (len(self.emitted) - 1) / span if span > 0 else 0.0


class LatestControl:
    """Single-producer latest-wins slot keyed by client sequence number."""

    def __init__(self):
        self._lock = threading.Lock()
        self._symbol = UNKNOWN
        self._seq = -1

    def update(self, symbol: str, seq: int) -> None:
        with self._lock:
            if seq > self._seq:
                self._symbol = symbol
                self._seq = seq

    def read(self) -> str:
        with self._lock:
            return self._symbol


class FrameQueue:
    """Bounded queue dropping oldest on overflow (real-time policy)."""

    def __init__(self, maxsize: int):
        self._items = deque()
        self.maxsize = maxsize
        self._cond = threading.Condition()
        self.dropped = 0

    def push(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.maxsize:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def pop(self, timeout: float):
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            return self._items.popleft() if self._items else None


class StreamServer:
    """One live session at a time over a WebSocket endpoint."""

    def __init__(self, engine_factory, fps: int = 16, queue_frames: int = 32):
        self.engine_factory = engine_factory
        self.fps = fps
        self.queue_frames = queue_frames
        self._session_slot = threading.Semaphore(1)
        self._server = None
        self._thread = None

    # -- lifecycle ----------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        """Start in a background thread; returns the bound port."""
        self._server = ws_serve(self._handler, host, port)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self._server.socket.getsockname()[1]

    def run(self, host: str, port: int) -> None:
        with ws_serve(self._handler, host, port) as server:
            self._server = server
            server.serve_forever()

    def shutdown(self) -> None:
        if self._server is not None:
            self._server.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)

    # -- session roles ------------------------------------------------------

    def _handler(self, ws) -> None:
        if not self._session_slot.acquire(blocking=False):
            ws.send(json.dumps({"type": "error", "message": "session busy"}))
            ws.close()
            return
        stop = threading.Event()
        try:
            engine = self.engine_factory()
            cfg = engine.model.cfg
            ws.send(json.dumps({
                "type": "session_info", "fps": self.fps, "H": cfg.frame_h,
                "W": cfg.frame_w, "omega": engine.model.ccfg.omega,
                "p": cfg.frames_per_token,
            }))
            latest = LatestControl()
            frames = FrameQueue(self.queue_frames)
            gen = threading.Thread(target=self._generate,
                                   args=(engine, stop, latest, frames), daemon=True)
            writer = threading.Thread(target=self._write_frames,
                                      args=(ws, stop, frames), daemon=True)
            gen.start()
            writer.start()
            self._read_controls(ws, latest)
        finally:
            stop.set()
            self._session_slot.release()

    def _read_controls(self, ws, latest: LatestControl) -> None:
        while True:
            try:
                msg = ws.recv()
            except Exception:
                return
            if isinstance(msg, bytes):
                self._protocol_error(ws, "binary uplink not allowed")
                return
            try:
                doc = json.loads(msg)
                if doc.get("type") != "control":
                    raise ValueError(f"unexpected message type {doc.get('type')!r}")
                symbol = keys_to_symbol(doc["keys"])
                seq = int(doc["seq"])
            except (ValueError, KeyError, TypeError) as e:
                self._protocol_error(ws, f"malformed control message: {e}")
                return
            latest.update(symbol, seq)

    def _protocol_error(self, ws, message: str) -> None:
        try:
            ws.send(json.dumps({"type": "error", "message": message}))
            ws.close()
        except Exception:
            pass

    def _generate(self, engine, stop, latest, frames) -> None:
        index = 0
        for _ in range(engine.warmup_strides):
            if stop.is_set():
                return
            engine.stride(latest.read())
        while not stop.is_set():  # teardown takes effect within one stride
            token = engine.stride(latest.read())
            for frame in engine.model.frames_u8(token):
                frames.push((index, frame))
                index += 1

    def _write_frames(self, ws, stop, frames) -> None:
        pacer = Pacer(self.fps)
        while not stop.is_set():
            item = frames.pop(timeout=0.2)
            if item is None:
                continue
            pacer.wait()
            try:
                ws.send(pack_frame(*item))
            except Exception:
                stop.set()
                return
