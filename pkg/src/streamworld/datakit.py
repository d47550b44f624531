"""Dataset pipeline: clip segmentation, control-signal balancing, and the four
telemetry/pixel quality filters (collision, stuck, mismatch, artifact).

All filters are pure predicates of a single clip, so verdicts are order
independent; balancing is a sequential reduction over the kept clips.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import replace

import numpy as np

from .toyworld import ClipRecord


class TooFewPoints(ValueError):
    """Not enough position samples for the stuck test to have evidence."""


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def segment(recording: ClipRecord, clip_seconds: int = 6) -> list[ClipRecord]:
    """Split a long recording into consecutive fixed-length clips.

    Non-overlapping, in order; the trailing remainder is dropped.
    """
    n_per = clip_seconds * recording.fps
    total = len(recording)
    if total < n_per:
        raise ValueError(f"recording has {total} frames, need at least {n_per}")
    out = []
    for k in range(total // n_per):
        lo, hi = k * n_per, (k + 1) * n_per
        out.append(replace(
            recording,
            frames=recording.frames[lo:hi].copy(),
            controls=list(recording.controls[lo:hi]),
            pos=recording.pos[lo:hi].copy(),
            vel=recording.vel[lo:hi].copy(),
            acc=recording.acc[lo:hi].copy(),
            clip_id=f"{recording.clip_id or 'seg'}_{k:04d}",
        ))
    return out


# ---------------------------------------------------------------------------
# Control-signal balancing
# ---------------------------------------------------------------------------


def control_histogram(clip: ClipRecord) -> dict:
    return dict(Counter(clip.controls))


def balance(histograms: dict, ratio_threshold: float = 1.5):
    """Iteratively drop clips dominated by the globally most frequent symbol.

    histograms: clip_id -> {symbol: count}. Each round finds the most frequent
    symbol overall and removes the single clip with the highest proportion of
    it (ties broken lexicographically on clip id) until max/min global symbol
    counts fall within ratio_threshold. Refuses a drop that would zero out a
    symbol class and returns best effort instead.

    Returns (kept_ids, dropped_ids, balanced_flag).
    """
    symbols = sorted({s for h in histograms.values() for s in h})
    if len(symbols) < 2:
        raise ValueError("cannot balance a dataset with fewer than two control symbols")
    kept = dict(histograms)
    dropped = []

    def totals():
        t = Counter()
        for h in kept.values():
            t.update(h)
        return {s: t.get(s, 0) for s in symbols}

    while True:
        t = totals()
        lo = min(t.values())
        hi = max(t.values())
        if lo > 0 and hi / lo <= ratio_threshold:
            return sorted(kept), dropped, True
        most = min((s for s in symbols if t[s] == hi))
        best_id, best_prop = None, -1.0
        for cid in sorted(kept):
            h = kept[cid]
            n = sum(h.values())
            prop = h.get(most, 0) / n if n else 0.0
            if prop > best_prop:
                best_id, best_prop = cid, prop
        if best_id is None or best_prop <= 0.0:
            return sorted(kept), dropped, False
        after = {s: t[s] - kept[best_id].get(s, 0) for s in symbols}
        if min(after.values()) <= 0:
            # dropping would empty a class; report best effort
            return sorted(kept), dropped, False
        dropped.append(best_id)
        del kept[best_id]


# ---------------------------------------------------------------------------
# Minimum enclosing circle (Welzl-style randomized incremental, exact)
# ---------------------------------------------------------------------------

_EPS = 1e-10


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _contains(c, p):
    return c is not None and _dist(c[0], p) <= c[1] * (1 + _EPS) + _EPS


def _circle_two(a, b):
    cx = (a[0] + b[0]) / 2.0
    cy = (a[1] + b[1]) / 2.0
    return ((cx, cy), max(_dist((cx, cy), a), _dist((cx, cy), b)))


def _circumcircle(a, b, c):
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2.0
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2.0
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by)) * 2.0
    if d == 0.0:
        return None
    x = ox + ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
              + (cx * cx + cy * cy) * (ay - by)) / d
    y = oy + ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
              + (cx * cx + cy * cy) * (bx - ax)) / d
    center = (x, y)
    return (center, max(_dist(center, p) for p in (a, b, c)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _circle_with_two_boundary(pts, p, q):
    circ = _circle_two(p, q)
    left = None
    right = None
    for r in pts:
        if _contains(circ, r):
            continue
        cross = _cross(p, q, r)
        c = _circumcircle(p, q, r)
        if c is None:
            continue
        if cross > 0 and (left is None or _cross(p, q, c[0]) > _cross(p, q, left[0])):
            left = c
        elif cross < 0 and (right is None or _cross(p, q, c[0]) < _cross(p, q, right[0])):
            right = c
    if left is None and right is None:
        return circ
    if left is None:
        return right
    if right is None:
        return left
    return left if left[1] <= right[1] else right


def _circle_with_one_boundary(pts, p):
    c = (p, 0.0)
    for j, q in enumerate(pts):
        if not _contains(c, q):
            c = _circle_two(p, q) if c[1] == 0.0 else _circle_with_two_boundary(pts[:j + 1], p, q)
    return c


def minimum_enclosing_circle(points):
    """Exact smallest circle covering the points: ((cx, cy), radius)."""
    pts = [(float(p[0]), float(p[1])) for p in points]
    if not pts:
        raise ValueError("no points")
    shuffled = list(pts)
    random.Random(0).shuffle(shuffled)
    c = None
    for i, p in enumerate(shuffled):
        if not _contains(c, p):
            c = _circle_with_one_boundary(shuffled[:i + 1], p)
    return c


# ---------------------------------------------------------------------------
# Filters (flagged means the clip should be dropped)
# ---------------------------------------------------------------------------


def filter_collision(clip: ClipRecord, jump_threshold: float = 20.0) -> bool:
    """Abrupt acceleration change anywhere in the clip."""
    if len(clip) < 2:
        return False
    jumps = np.linalg.norm(np.diff(clip.acc, axis=0), axis=1)
    return bool(np.max(jumps) > jump_threshold)


def stuck_points(clip: ClipRecord, window_points: int) -> np.ndarray:
    """The last `window_points` positions subsampled at one per second."""
    pts = clip.pos[:: max(clip.fps, 1)]
    if len(pts) < window_points:
        raise TooFewPoints(
            f"{len(pts)} positions at 1/s, need {window_points}")
    return pts[-window_points:]


def filter_stuck(clip: ClipRecord, radius: float = 80.0, window_points: int = 40) -> bool:
    """Last window of 1 Hz positions fits inside a circle of `radius`."""
    pts = stuck_points(clip, window_points)
    _, r = minimum_enclosing_circle(pts)
    return r <= radius * (1 + 1e-9) + 1e-9


def filter_mismatch(clip: ClipRecord, angle_threshold_deg: float = 90.0) -> bool:
    """Acceleration pointing away from motion while a drive control is active."""
    thr = math.radians(angle_threshold_deg)
    for i, sym in enumerate(clip.controls):
        if sym not in ("D", "DL", "DR"):
            continue
        v = clip.vel[i]
        a = clip.acc[i]
        nv = np.linalg.norm(v)
        na = np.linalg.norm(a)
        if nv < 1e-6 or na < 1e-12:
            continue
        cosang = float(np.dot(v, a) / (nv * na))
        angle = math.acos(max(-1.0, min(1.0, cosang)))
        if angle > thr:
            return True
    return False


def filter_artifact(clip: ClipRecord, delta_threshold: float = 0.5) -> bool:
    """Any consecutive frame pair with a large mean absolute pixel change."""
    if len(clip) < 2:
        raise ValueError("need at least two frames")
    f = clip.frames.astype(np.int32)
    deltas = np.abs(np.diff(f, axis=0)).mean(axis=(1, 2)) / 255.0
    return bool(np.max(deltas) > delta_threshold)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

DEFAULT_PARAMS = {
    "jump": 20.0,
    "radius": 80.0,
    "points": 40,
    "angle": 90.0,
    "delta": 0.5,
    "ratio": 1.5,
}


def clip_verdict(clip: ClipRecord, params: dict) -> str:
    """First failing filter in a fixed order, else kept.

    A clip too short for the stuck filter's evidence window is not judged
    stuck (the 1 Hz / 40-point rule needs 40 seconds of telemetry).
    """
    if filter_collision(clip, params["jump"]):
        return "collision"
    try:
        if filter_stuck(clip, params["radius"], params["points"]):
            return "stuck"
    except TooFewPoints:
        pass
    if filter_mismatch(clip, params["angle"]):
        return "mismatch"
    if filter_artifact(clip, params["delta"]):
        return "artifact"
    return "kept"


def run_pipeline(clips, params: dict | None = None) -> dict:
    """Filter verdicts for every clip, then balance the survivors.

    Returns the manifest document: per-clip histograms and verdicts plus
    before/after global histograms.
    """
    p = dict(DEFAULT_PARAMS)
    if params:
        p.update(params)
    clipmap = {}
    for i, clip in enumerate(clips):
        cid = clip.clip_id or f"clip_{i:05d}"
        clipmap[cid] = clip
    entries = {}
    before = Counter()
    for cid in sorted(clipmap):
        clip = clipmap[cid]
        hist = control_histogram(clip)
        before.update(hist)
        entries[cid] = {"histogram": hist, "verdict": clip_verdict(clip, p)}
    survivors = {cid: e["histogram"] for cid, e in entries.items() if e["verdict"] == "kept"}
    balanced = True
    if survivors:
        try:
            kept, dropped, balanced = balance(survivors, p["ratio"])
        except ValueError:
            kept, dropped, balanced = sorted(survivors), [], False
        for cid in dropped:
            entries[cid]["verdict"] = "balance-dropped"
    after = Counter()
    for cid, e in entries.items():
        if e["verdict"] == "kept":
            after.update(e["histogram"])
    total = sum(sum(h.values()) for h in (e["histogram"] for e in entries.values()))
    assert sum(before.values()) == total
    return {
        "params": p,
        "clips": entries,
        "histogram_before": dict(before),
        "histogram_after": dict(after),
        "balanced": balanced,
        "kept": sorted(cid for cid, e in entries.items() if e["verdict"] == "kept"),
    }
