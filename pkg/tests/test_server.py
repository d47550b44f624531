"""Serving layer: protocol encoding, key mapping, pacing policy, backpressure
queue, and a live headless session over a real socket."""

import json
import threading
import time

import numpy as np
import pytest
from websockets.sync.client import connect

from streamworld.backbone import BackboneConfig
from streamworld.control import UNKNOWN, ControlConfig
from streamworld.server import (FrameQueue, LatestControl, Pacer, StreamServer,
                                keys_to_symbol, pace_schedule, pack_frame,
                                unpack_frame)


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------


def test_frame_roundtrip():
    frame = np.arange(12, dtype=np.uint8).reshape(3, 4)
    idx, back = unpack_frame(pack_frame(7, frame))
    assert idx == 7
    assert np.array_equal(back, frame)


def test_frame_bad_magic():
    data = bytearray(pack_frame(0, np.zeros((2, 2), dtype=np.uint8)))
    data[:4] = b"XXXX"
    with pytest.raises(ValueError):
        unpack_frame(bytes(data))


def test_keys_to_symbol_mapping():
    assert keys_to_symbol(["forward"]) == "D"
    assert keys_to_symbol(["forward", "left"]) == "DL"
    assert keys_to_symbol(["forward", "right"]) == "DR"
    assert keys_to_symbol(["forward", "left", "right"]) == "DL"  # left precedence
    assert keys_to_symbol([]) == UNKNOWN
    assert keys_to_symbol(["left"]) == UNKNOWN
    assert keys_to_symbol(["forward", "jump"]) == "D"  # unknown keys ignored


def test_latest_control_seq_ordering():
    lc = LatestControl()
    assert lc.read() == UNKNOWN
    lc.update("D", 1)
    lc.update("DL", 3)
    lc.update("DR", 2)  # stale, ignored
    assert lc.read() == "DL"


def test_frame_queue_drops_oldest():
    q = FrameQueue(maxsize=3)
    for i in range(5):
        q.push(i)
    assert q.dropped == 2
    assert q.pop(0.1) == 2  # 0 and 1 were dropped
    assert q.pop(0.1) == 3


# ---------------------------------------------------------------------------
# pacing
# ---------------------------------------------------------------------------


def test_pace_schedule_fast_producer():
    # production twice as fast as the 16 fps target
    period = 1.0 / 16
    prod = [i * period / 2 for i in range(8)]
    emits = pace_schedule(prod, 16.0)
    gaps = np.diff(emits)
    assert np.allclose(gaps, period, atol=1e-9)


def test_pace_schedule_slow_producer_passthrough():
    prod = [0.0, 0.5, 1.0, 1.5]  # 2 fps production, 16 fps target
    emits = pace_schedule(prod, 16.0)
    assert emits == prod  # effective fps equals generation fps


def test_pace_schedule_rejects_bad_fps():
    with pytest.raises(ValueError):
        pace_schedule([0.0], 0.0)


def test_pacer_with_fake_clock():
    clock = {"t": 0.0}

    def now():
        return clock["t"]

    def sleeper(dt):
        clock["t"] += dt

    pacer = Pacer(16.0, clock=now, sleeper=sleeper)
    times = []
    for _ in range(6):
        times.append(pacer.wait())
        clock["t"] += 0.01  # production takes 10 ms, faster than 62.5 ms period
    gaps = np.diff(times)
    assert np.allclose(gaps, 1.0 / 16, atol=1e-9)
    assert pacer.effective_fps() == pytest.approx(16.0, rel=1e-6)


# ---------------------------------------------------------------------------
# live session (stub engine over a real websocket)
# ---------------------------------------------------------------------------


class StubModel:
    def __init__(self):
        self.cfg = BackboneConfig(depth=2, dim=16, heads=2, patch=2,
                                  frames_per_token=2, prompt_vocab=4,
                                  frame_h=4, frame_w=4, window=2)
        self.ccfg = ControlConfig(omega=4)

    def frames_u8(self, token):
        return token


class StubEngine:
    warmup_strides = 1

    def __init__(self):
        self.model = StubModel()
        self.controls = []
        self.counter = 0

    def stride(self, control):
        self.controls.append(control)
        p = self.model.cfg.frames_per_token
        h, w = self.model.cfg.frame_h, self.model.cfg.frame_w
        frames = np.full((p, h, w), self.counter % 256, dtype=np.uint8)
        self.counter += 1
        time.sleep(0.002)
        return frames


@pytest.fixture()
def live_server():
    engine = StubEngine()
    server = StreamServer(lambda: engine, fps=200, queue_frames=16)
    port = server.start()
    yield engine, port
    server.shutdown()


def test_live_session_info_frames_and_controls(live_server):
    engine, port = live_server
    with connect(f"ws://127.0.0.1:{port}") as ws:
        info = json.loads(ws.recv(timeout=5))
        assert info["type"] == "session_info"
        assert info["fps"] == 200 and info["H"] == 4 and info["W"] == 4
        assert info["omega"] == 4 and info["p"] == 2
        indices = []
        for _ in range(6):
            msg = ws.recv(timeout=5)
            assert isinstance(msg, bytes)
            idx, frame = unpack_frame(msg)
            indices.append(idx)
            assert frame.shape == (4, 4)
        assert indices == sorted(indices)
        assert len(set(indices)) == len(indices)  # strictly increasing
        ws.send(json.dumps({"type": "control", "keys": ["forward", "left"], "seq": 1}))
        deadline = time.time() + 5
        while time.time() < deadline and "DL" not in engine.controls:
            time.sleep(0.02)
        assert "DL" in engine.controls
    # stream ran with UNKNOWN before any control arrived
    assert engine.controls[0] == UNKNOWN


def test_malformed_message_gets_error_frame(live_server):
    _, port = live_server
    with connect(f"ws://127.0.0.1:{port}") as ws:
        ws.recv(timeout=5)  # session info
        ws.send("this is not json")
        deadline = time.time() + 5
        saw_error = False
        while time.time() < deadline:
            try:
                msg = ws.recv(timeout=1)
            except Exception:
                break
            if isinstance(msg, str) and json.loads(msg).get("type") == "error":
                saw_error = True
                break
        assert saw_error


def test_second_session_rejected_while_busy(live_server):
    _, port = live_server
    with connect(f"ws://127.0.0.1:{port}") as first:
        first.recv(timeout=5)
        with connect(f"ws://127.0.0.1:{port}") as second:
            msg = json.loads(second.recv(timeout=5))
            assert msg["type"] == "error"


def test_teardown_frees_engine_quickly(live_server):
    engine, port = live_server
    with connect(f"ws://127.0.0.1:{port}") as ws:
        ws.recv(timeout=5)
        ws.recv(timeout=5)
    time.sleep(0.3)
    strides_after_close = engine.counter
    time.sleep(0.3)
    assert engine.counter <= strides_after_close + 1  # stopped within one stride
