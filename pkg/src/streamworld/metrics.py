"""Desk-scale evaluation: PSNR, Move-PSNR against the world oracle, and
throughput/latency benchmarks."""

from __future__ import annotations

import time

import numpy as np

from . import nd
from .backbone import frames_to_token
from .toyworld import ToyWorld, WorldState, oracle_rollout

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """20 log10(255 / sqrt(MSE)) on u8 frames; identical inputs cap at 99 dB."""
    if a.shape != b.shape:
        raise nd.ShapeError(f"psnr {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * np.log10(255.0 / np.sqrt(mse)))


def frames_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame PSNR, averaged in dB."""
    if a.shape != b.shape:
        raise nd.ShapeError(f"frames_psnr {a.shape} vs {b.shape}")
    return float(np.mean([psnr(a[i], b[i]) for i in range(a.shape[0])]))


def script_frames(script, p: int) -> list:
    """Per-token symbols expanded to per-frame symbols."""
    out = []
    for sym in script:
        out.extend([sym] * p)
    return out


def move_psnr(engine, world: ToyWorld, script, seed: int, shuffle_controls=None):
    """Move-PSNR for one held-out control script.

    The stream is primed with ground-truth context (the window's worth of
    oracle tokens are teacher-forced into the cache during warmup), then the
    engine generates under the script while the oracle renders the same
    script from the same start; per-frame PSNR is averaged in dB. When
    shuffle_controls is a Generator the generation-side script is shuffled
    first (the control-blind baseline) while the oracle keeps the true order.
    """
    p = engine.model.cfg.frames_per_token
    patch = engine.model.cfg.patch
    w = engine.warmup_strides
    rng = np.random.default_rng(seed)
    start = world.random_state(rng)
    context = ["D"] * w
    all_frames = oracle_rollout(world, start,
                                script_frames(context, p) + script_frames(script, p))
    ctx_frames = all_frames[: w * p]
    oracle_frames = all_frames[w * p:]
    prime = [frames_to_token(ctx_frames[i * p:(i + 1) * p], patch) for i in range(w)]
    gen_script = list(script)
    if shuffle_controls is not None:
        shuffle_controls.shuffle(gen_script)
    generated = np.concatenate(
        list(engine.generate_stream(iter(gen_script), n_tokens=len(script),
                                    prime_tokens=prime)))
    if generated.shape != oracle_frames.shape:
        raise nd.ShapeError(f"stream {generated.shape} vs oracle {oracle_frames.shape}")
    return frames_psnr(generated, oracle_frames)


def bench_stream(engine, n_tokens: int) -> dict:
    """Wall-clock throughput and per-token latency percentiles on a warm engine."""
    p = engine.model.cfg.frames_per_token
    if n_tokens == 0:
        return {"frames": 0, "fps": 0.0, "p50_ms": 0.0, "p95_ms": 0.0,
                "denoiser_evals_per_token": 0.0}
    for _ in range(engine.warmup_strides):
        engine.stride("D")
    evals0 = engine.denoiser_evals
    lat = []
    t0 = time.perf_counter()
    for _ in range(n_tokens):
        s = time.perf_counter()
        engine.stride("D")
        lat.append(time.perf_counter() - s)
    elapsed = time.perf_counter() - t0
    lat_ms = np.array(lat) * 1e3
    return {
        "frames": n_tokens * p,
        "fps": n_tokens * p / elapsed,
        "tokens_per_s": n_tokens / elapsed,
        "p50_ms": float(np.percentile(lat_ms, 50)),
        "p95_ms": float(np.percentile(lat_ms, 95)),
        "denoiser_evals_per_token": (engine.denoiser_evals - evals0) / n_tokens,
    }
