"""Procedurally generated controllable world: a toroidal value-noise heightmap
viewed through a heading-locked camera. Produces frames, per-frame control
labels, and telemetry, and doubles as the ground-truth oracle for control
precision evaluation. Everything is deterministic under the seed: fixed-order
numpy arithmetic, no parallel reductions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SYMBOLS = ("D", "DL", "DR")
FRAMES_MAGIC = b"FRS1"


@dataclass
class WorldConfig:
    seed: int = 0
    terrain_size: int = 256
    frame_h: int = 32
    frame_w: int = 32
    speed: float = 2.0            # px per frame
    turn_rate: float = 0.1        # rad per frame
    fps: int = 16
    clip_seconds: int = 6
    lookahead: float = 8.0        # camera center this far ahead of pos
    octaves: int = 4
    caption_id: int = 1

    @property
    def clip_frames(self) -> int:
        return self.clip_seconds * self.fps


@dataclass
class WorldState:
    x: float
    y: float
    heading: float

    @property
    def pos(self):
        return np.array([self.x, self.y])


@dataclass
class ClipRecord:
    """Frames + aligned per-frame control labels and telemetry."""

    frames: np.ndarray            # (n, H, W) u8
    controls: list                # n symbols
    pos: np.ndarray               # (n, 2) unwrapped float positions
    vel: np.ndarray               # (n, 2) forward differences of pos
    acc: np.ndarray               # (n, 2) differences of vel
    caption_id: int = 1
    seed: int = 0
    fps: int = 16
    clip_id: str = ""

    def __len__(self) -> int:
        return self.frames.shape[0]


def _terrain(seed: int, size: int, octaves: int) -> np.ndarray:
    """Multi-octave value noise on a wrapping lattice, normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    out = np.zeros((size, size))
    amp = 1.0
    cell = size // 4
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(octaves):
        n = max(size // cell, 1)
        nodes = rng.random((n, n))
        fy = yy / cell
        fx = xx / cell
        y0 = np.floor(fy).astype(np.int64)
        x0 = np.floor(fx).astype(np.int64)
        wy = fy - y0
        wx = fx - x0
        y0 %= n
        x0 %= n
        y1 = (y0 + 1) % n
        x1 = (x0 + 1) % n
        out += amp * (nodes[y0, x0] * (1 - wy) * (1 - wx)
                      + nodes[y0, x1] * (1 - wy) * wx
                      + nodes[y1, x0] * wy * (1 - wx)
                      + nodes[y1, x1] * wy * wx)
        amp *= 0.55
        cell = max(cell // 2, 1)
    out -= out.min()
    out /= out.max()
    return out


class ToyWorld:
    """A terrain instance plus the motion and rendering rules."""

    def __init__(self, config: WorldConfig):
        if config.frame_h % 4 or config.frame_w % 4:
            raise ValueError("frame dims must be divisible by the backbone patch")
        if config.speed <= 0:
            raise ValueError("speed must be positive")
        self.config = config
        self.heightmap = _terrain(config.seed, config.terrain_size, config.octaves)

    def random_state(self, rng: np.random.Generator) -> WorldState:
        s = self.config.terrain_size
        return WorldState(x=float(rng.uniform(0, s)), y=float(rng.uniform(0, s)),
                          heading=float(rng.uniform(0, 2 * math.pi)))

    def step(self, state: WorldState, symbol: str) -> WorldState:
        """Apply one control: DL/DR turn then move, D moves straight."""
        if symbol not in SYMBOLS:
            raise ValueError(f"unknown control symbol {symbol!r}")
        heading = state.heading
        if symbol == "DL":
            heading += self.config.turn_rate
        elif symbol == "DR":
            heading -= self.config.turn_rate
        v = self.config.speed
        return WorldState(x=state.x + v * math.cos(heading),
                          y=state.y + v * math.sin(heading),
                          heading=heading)

    def render(self, state: WorldState) -> np.ndarray:
        """Bilinear-sampled, heading-rotated crop of the heightmap as u8."""
        cfg = self.config
        h, w = cfg.frame_h, cfg.frame_w
        fwd = np.array([math.cos(state.heading), math.sin(state.heading)])
        right = np.array([-math.sin(state.heading), math.cos(state.heading)])
        cx = state.x + cfg.lookahead * fwd[0]
        cy = state.y + cfg.lookahead * fwd[1]
        rows = (h / 2 - 0.5) - np.arange(h)          # top of frame is farthest ahead
        cols = np.arange(w) - (w / 2 - 0.5)
        off_f, off_r = np.meshgrid(rows, cols, indexing="ij")
        xs = cx + off_f * fwd[0] + off_r * right[0]
        ys = cy + off_f * fwd[1] + off_r * right[1]
        vals = self._sample(ys, xs)
        return np.clip(np.rint(vals * 255.0), 0, 255).astype(np.uint8)

    def _sample(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        grid = self.heightmap
        s = grid.shape[0]
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        wy = ys - y0
        wx = xs - x0
        y0 %= s
        x0 %= s
        y1 = (y0 + 1) % s
        x1 = (x0 + 1) % s
        return (grid[y0, x0] * (1 - wy) * (1 - wx) + grid[y0, x1] * (1 - wy) * wx
                + grid[y1, x0] * wy * (1 - wx) + grid[y1, x1] * wy * wx)

    def rollout(self, start: WorldState, controls) -> tuple[np.ndarray, np.ndarray]:
        """Frames and unwrapped positions for exactly this control sequence.

        frame[i] is rendered at the state reached before applying controls[i];
        control[i] drives the transition into frame[i+1].
        """
        states = [start]
        for sym in controls:
            states.append(self.step(states[-1], sym))
        frames = np.stack([self.render(s) for s in states[:len(controls)]]) if controls \
            else np.zeros((0, self.config.frame_h, self.config.frame_w), dtype=np.uint8)
        pos = np.array([[s.x, s.y] for s in states])
        return frames, pos


def oracle_rollout(world: ToyWorld, start: WorldState, controls) -> np.ndarray:
    """Ground-truth frames for a control script; the Move-PSNR reference."""
    frames, _ = world.rollout(start, list(controls))
    return frames


def random_walk_controls(rng: np.random.Generator, n: int, switch_prob: float = 0.1) -> list:
    controls = []
    sym = SYMBOLS[int(rng.integers(len(SYMBOLS)))]
    for _ in range(n):
        if rng.random() < switch_prob:
            sym = SYMBOLS[int(rng.integers(len(SYMBOLS)))]
        controls.append(sym)
    return controls


def generate_clip(world: ToyWorld, rng: np.random.Generator, policy="random",
                  n_frames: int | None = None, start: WorldState | None = None) -> ClipRecord:
    """One clip with aligned frames/controls/telemetry.

    policy is either "random" (symbol switches with prob 0.1 per frame) or an
    explicit list of symbols.
    """
    cfg = world.config
    n = n_frames if n_frames is not None else cfg.clip_frames
    if start is None:
        start = world.random_state(rng)
    if policy == "random":
        controls = random_walk_controls(rng, n)
    else:
        controls = list(policy)
        if len(controls) != n:
            raise ValueError("scripted policy length must match the frame count")
    # one extra step so velocity (forward diff) exists for the last frame
    frames, pos_all = world.rollout(start, controls + [controls[-1] if controls else "D"])
    frames = frames[:n]
    pos = pos_all[:n]
    vel = pos_all[1:n + 1] - pos_all[:n]
    acc = np.zeros_like(vel)
    acc[1:] = vel[1:] - vel[:-1]
    return ClipRecord(frames=frames, controls=controls, pos=pos, vel=vel, acc=acc,
                      caption_id=cfg.caption_id, seed=cfg.seed, fps=cfg.fps)


# ---------------------------------------------------------------------------
# Fault injection (filter fixtures)
# ---------------------------------------------------------------------------


def inject_fault(clip: ClipRecord, kind: str, frame: int | None = None) -> ClipRecord:
    """A perturbed copy of the clip exhibiting exactly one data defect."""
    f = frame if frame is not None else len(clip) // 2
    out = replace(clip, frames=clip.frames.copy(), controls=list(clip.controls),
                  pos=clip.pos.copy(), vel=clip.vel.copy(), acc=clip.acc.copy())
    if kind == "collision":
        out.acc[f] = np.array([50.0, 0.0])           # acceleration spike
    elif kind == "mismatch":
        out.acc[f] = -out.vel[f]                     # antiparallel to motion
    elif kind == "artifact":
        # half-range shift: every pixel moves by exactly 128 counts
        out.frames[f] = ((out.frames[f].astype(np.int32) + 128) % 256).astype(np.uint8)
    elif kind == "stuck":
        n = len(clip)
        ang = np.linspace(0, 4 * math.pi, n)
        out.pos = np.stack([clip.pos[0, 0] + 5.0 * np.cos(ang),
                            clip.pos[0, 1] + 5.0 * np.sin(ang)], axis=1)
        out.vel = np.zeros_like(out.vel)
        out.vel[:-1] = out.pos[1:] - out.pos[:-1]
        out.acc = np.zeros_like(out.acc)
        out.acc[1:] = out.vel[1:] - out.vel[:-1]
    else:
        raise ValueError(f"unknown fault kind {kind!r}")
    return out


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------


def write_clip(dirpath, clip: ClipRecord) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w = clip.frames.shape
    with open(d / "frames.bin", "wb") as fh:
        fh.write(struct.pack("<4sHHI", FRAMES_MAGIC, h, w, n))
        fh.write(clip.frames.tobytes())
    with open(d / "controls.jsonl", "w") as fh:
        for i, sym in enumerate(clip.controls):
            fh.write(json.dumps({"f": i, "sym": sym}) + "\n")
    with open(d / "telemetry.jsonl", "w") as fh:
        for i in range(n):
            fh.write(json.dumps({
                "f": i,
                "x": float(clip.pos[i, 0]), "y": float(clip.pos[i, 1]),
                "vx": float(clip.vel[i, 0]), "vy": float(clip.vel[i, 1]),
                "ax": float(clip.acc[i, 0]), "ay": float(clip.acc[i, 1]),
            }) + "\n")
    with open(d / "meta.json", "w") as fh:
        json.dump({"caption_id": clip.caption_id, "seed": clip.seed, "fps": clip.fps}, fh)


def read_clip(dirpath) -> ClipRecord:
    d = Path(dirpath)
    raw = (d / "frames.bin").read_bytes()
    magic, h, w, n = struct.unpack_from("<4sHHI", raw, 0)
    if magic != FRAMES_MAGIC:
        raise ValueError(f"bad frames.bin magic {magic!r}")
    body = raw[struct.calcsize("<4sHHI"):]
    if len(body) != n * h * w:
        raise ValueError("truncated frames.bin payload")
    frames = np.frombuffer(body, dtype=np.uint8).reshape(n, h, w).copy()
    controls = [json.loads(line)["sym"] for line in (d / "controls.jsonl").read_text().splitlines()]
    pos = np.zeros((n, 2))
    vel = np.zeros((n, 2))
    acc = np.zeros((n, 2))
    for line in (d / "telemetry.jsonl").read_text().splitlines():
        rec = json.loads(line)
        i = rec["f"]
        pos[i] = (rec["x"], rec["y"])
        vel[i] = (rec["vx"], rec["vy"])
        acc[i] = (rec["ax"], rec["ay"])
    meta = json.loads((d / "meta.json").read_text())
    return ClipRecord(frames=frames, controls=controls, pos=pos, vel=vel, acc=acc,
                      caption_id=meta["caption_id"], seed=meta["seed"], fps=meta["fps"],
                      clip_id=d.name)


def write_dataset(dirpath, clips, config: WorldConfig) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, clip in enumerate(clips):
        cid = f"clip_{i:05d}"
        clip.clip_id = cid
        write_clip(d / cid, clip)
        ids.append(cid)
    from dataclasses import asdict
    with open(d / "dataset.json", "w") as fh:
        json.dump({"clips": ids, "config": asdict(config)}, fh, indent=1)


def read_dataset(dirpath) -> list:
    d = Path(dirpath)
    meta = json.loads((d / "dataset.json").read_text())
    return [read_clip(d / cid) for cid in meta["clips"]]
