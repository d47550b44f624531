"""Sliding-window streaming denoiser: a queue of T tokens at staggered noise
levels is denoised jointly, k solver steps per stride; every stride the
leftmost (cleanest) token is dequeued and handed to the decoder, a fresh
pure-noise token joins on the right, and the dequeued token is re-attached at
noise level 0 as a single cache slot so continuity survives the window slide.

Inference runs with the tape disabled, so memory stays at window + cache for
any horizon; positions are window-relative, so the positional table never
overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .control import UNKNOWN
from .diffusion import SOLVER_STEP, NoiseSchedule, cfg_combine


@dataclass
class TokenSlot:
    token: np.ndarray          # (n_patches, d_token) pixel-space diffusion state
    remaining: int             # solver steps left; 0 only for the cache
    control: str
    state: str = "active"      # "active" | "cached"


class WindowQueue:
    """Exactly T active slots in strictly increasing `remaining`, plus an
    optional single cached slot at noise level 0."""

    def __init__(self, T: int, k: int, rng: np.random.Generator, token_shape):
        if T < 1 or k < 1 or SOLVER_STEP * k * T > 1000:
            raise ValueError(f"invalid window: T={T} k={k} needs 25*k*T <= 1000")
        self.T = T
        self.k = k
        self.rng = rng
        self.token_shape = tuple(token_shape)
        self.stride_count = 0
        self.cache: TokenSlot | None = None
        self.slots = [
            TokenSlot(self._fresh_noise(), remaining=(i + 1) * k, control=UNKNOWN)
            for i in range(T)
        ]

    def _fresh_noise(self) -> np.ndarray:
        return self.rng.standard_normal(self.token_shape).astype(np.float32)

    def ramp(self) -> list:
        return [s.remaining for s in self.slots]

    def check_invariants(self) -> None:
        assert len(self.slots) == self.T
        assert self.ramp() == [(i + 1) * self.k for i in range(self.T)]
        if self.cache is not None:
            assert self.cache.state == "cached" and self.cache.remaining == 0


def init_window(T: int, k: int, rng: np.random.Generator, token_shape) -> WindowQueue:
    """Steady-state ramp [k, 2k, ..., Tk] of pure-noise tokens; empty cache."""
    return WindowQueue(T, k, rng, token_shape)


class StreamEngine:
    """Shared streaming machinery: symbol-embedding cache, cache forcing, and
    the warmup-then-yield generation loop. Subclasses implement stride()."""

    model = None
    warmup_strides = 0

    def _symbol_embed(self, symbol: str) -> np.ndarray:
        # weights are frozen during generation, so rows are cacheable
        if symbol not in self._embed_cache:
            with nd.no_grad():
                self._embed_cache[symbol] = self.model.control.embed(symbol).data
        return self._embed_cache[symbol]

    def force_cache(self, token: np.ndarray, control: str = UNKNOWN) -> None:
        """Teacher-force the cache slot (context priming for evaluation)."""
        self.queue.cache = TokenSlot(np.asarray(token, dtype=np.float32), 0,
                                     control, state="cached")

    def stride(self, next_control: str = UNKNOWN):
        raise NotImplementedError

    def generate_stream(self, control_source, n_tokens: int, prompt_schedule=None,
                        prime_tokens=None, warmup: int | None = None):
        """Yield u8 frame groups (p frames per token) after discarding warmup.

        Controls are pulled once per enqueue; an exhausted source repeats its
        last symbol. prime_tokens, when given, are teacher-forced into the
        cache during warmup so generation continues real context.
        """
        feed = _control_feed(control_source)
        w = warmup if warmup is not None else self.warmup_strides
        for s in range(w):
            self.stride(next(feed))
            if prime_tokens is not None and s < len(prime_tokens):
                self.force_cache(prime_tokens[s])
        for i in range(n_tokens):
            if prompt_schedule is not None:
                self.prompt_id = prompt_schedule(i)
            token = self.stride(next(feed))
            yield self.model.frames_u8(token)


class SwinDpmEngine(StreamEngine):
    """Owns a model + queue and produces one decoded token per stride."""

    def __init__(self, model, T: int | None = None, k: int | None = None,
                 guidance: float = 2.0, prompt_id: int = 1, seed: int = 0,
                 use_cache: bool = True, schedule: NoiseSchedule | None = None,
                 lora_on: bool = True):
        self.model = model
        self.lora_on = lora_on
        cfg = model.cfg
        self.T = T if T is not None else cfg.window
        self.k = k if k is not None else 40 // self.T
        if self.T > cfg.window:
            raise ValueError("window T exceeds the model's positional table")
        self.guidance = guidance
        self.prompt_id = prompt_id
        self.use_cache = use_cache
        self.schedule = schedule or NoiseSchedule()
        self.rng = np.random.default_rng(seed)
        shape = (cfg.n_patches, cfg.d_token)
        self.queue = init_window(self.T, self.k, self.rng, shape)
        self.warmup_strides = self.T
        self.denoiser_evals = 0     # one per token per guided prediction
        self.network_forwards = 0
        self._embed_cache = {}

    def _window_inputs(self):
        q = self.queue
        slots = list(q.slots)
        include_cache = self.use_cache and q.cache is not None
        if include_cache:
            slots = [q.cache] + slots
        x = np.stack([s.token for s in slots])
        ts = [0 if s.state == "cached" else SOLVER_STEP * s.remaining for s in slots]
        embeds = np.stack([self._symbol_embed(s.control) for s in slots])
        base = self.model.cfg.window
        first = base - 1 if include_cache else base
        positions = np.arange(first, base + self.T)
        return slots, x, ts, embeds, positions, include_cache

    def _predict_eps(self, x, ts, embeds, positions) -> np.ndarray:
        """One guided epsilon prediction for every token in the window."""
        with nd.no_grad():
            cond = self.model.forward(x, ts, self.prompt_id, embeds,
                                      positions=positions, lora_on=self.lora_on).data
            self.network_forwards += 1
            if self.guidance == 1.0:
                return cond
            unk = np.stack([self._symbol_embed(UNKNOWN)] * x.shape[0])
            uncond = self.model.forward(x, ts, 0, unk, positions=positions).data
            self.network_forwards += 1
            return cfg_combine(cond, uncond, self.guidance)

    # -- scheduling ---------------------------------------------------------

    def stride(self, next_control: str = UNKNOWN):
        """k joint solver steps, one dequeue, one enqueue; returns the emitted
        pixel-space token."""
        q = self.queue
        for _ in range(self.k):
            slots, x, ts, embeds, positions, has_cache = self._window_inputs()
            eps = self._predict_eps(x, ts, embeds, positions)
            off = 1 if has_cache else 0
            for i, slot in enumerate(q.slots):
                t = SOLVER_STEP * slot.remaining
                slot.token = self.schedule.euler_step(slot.token, eps[off + i], t,
                                                      t - SOLVER_STEP)
                slot.remaining -= 1
            self.denoiser_evals += self.T
        done = q.slots.pop(0)
        assert done.remaining == 0
        done.state = "cached"
        q.cache = done
        q.slots.append(TokenSlot(q._fresh_noise(), remaining=self.k * self.T,
                                 control=next_control))
        q.stride_count += 1
        q.check_invariants()
        return done.token


def _control_feed(source):
    last = UNKNOWN
    it = iter(source)
    while True:
        try:
            last = next(it)
        except StopIteration:
            pass
        yield last


# ---------------------------------------------------------------------------
# Training-time window sampler
# ---------------------------------------------------------------------------


def token_controls(symbols, p: int) -> str:
    """Majority symbol over a token's p frames; earliest wins ties."""
    counts = {}
    for s in symbols:
        counts[s] = counts.get(s, 0) + 1
    best = max(counts.values())
    for s in symbols:
        if counts[s] == best:
            return s
    raise AssertionError("unreachable")


def sample_training_window(clip, T: int, k: int, rng: np.random.Generator,
                           patch: int, p: int):
    """2T consecutive clip tokens with the window's staggered noise levels.

    The last T tokens (the loss-masked replica) carry the inference ramp
    [k..Tk] in grid steps, shifted by one random within-stride phase; the
    first T tokens are the warmup context and stay clean (grid step 0),
    matching the cache the window attends to at generation time. The ramp
    rule, extended left of the window and clamped at the clean boundary,
    assigns exactly these levels to both replicas.
    """
    from .backbone import frames_to_token

    span = 2 * T * p
    if len(clip) < span:
        raise ValueError(f"clip has {len(clip)} frames, need {span}")
    start = int(rng.integers(0, len(clip) - span + 1))
    phase = int(rng.integers(0, k))
    x0 = []
    controls = []
    per_token_t = []
    for i in range(2 * T):
        lo = start + i * p
        x0.append(frames_to_token(clip.frames[lo:lo + p], patch))
        controls.append(token_controls(clip.controls[lo:lo + p], p))
        r = max(0, (i - T + 1) * k - phase)
        per_token_t.append(SOLVER_STEP * r)
    loss_mask = np.array([False] * T + [True] * T)
    return np.stack(x0), per_token_t, controls, loss_mask
