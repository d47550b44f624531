"""Stream consistency model: one-stage guided distillation of the windowed
teacher into a 4-step student, plus the fast windowed sampler.

The student maps (x_t, t) straight to a clean-token estimate through the skip
parameterization c_skip(t) x_t + c_out(t) F(x_t, t), whose coefficients hit
c_skip=1, c_out=0 at the clean boundary so f(x, 0) = x exactly. Guidance is
folded in during distillation: the teacher steps with CFG at a fixed scale,
the student needs a single forward per stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nd
from .control import UNKNOWN
from .diffusion import GRID, SOLVER_STEP, NoiseSchedule, cfg_combine
from .swindpm import StreamEngine, TokenSlot


@dataclass
class ScmConfig:
    n_steps: int = 4
    tau: tuple = (1000, 750, 500, 250)   # sampling grid steps, decreasing
    g_baked: float = 2.0
    ema_decay: float = 0.995
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.n_steps != 4 or len(self.tau) != 4:
            raise ValueError("the student samples in exactly four steps")
        if list(self.tau) != sorted(self.tau, reverse=True):
            raise ValueError("tau must be strictly decreasing")


def skip_coeffs(t: int, sigma_data: float = 0.5) -> tuple[float, float]:
    """(c_skip, c_out) with time measured as t/GRID; exact identity at t=0."""
    if t == 0:
        return 1.0, 0.0
    s = t / GRID
    c_skip = sigma_data ** 2 / (s ** 2 + sigma_data ** 2)
    c_out = sigma_data * s / math.sqrt(sigma_data ** 2 + s ** 2)
    return c_skip, c_out


def consistency_fn(model, x_t, per_token_t, prompt_id, control_embeds,
                   positions=None, sigma_data: float = 0.5,
                   lora_on: bool = True) -> nd.NdArray:
    """Clean-token estimate: c_skip(t) x_t + c_out(t) F(x_t, t) per token."""
    x = x_t if isinstance(x_t, nd.NdArray) else nd.NdArray(np.asarray(x_t, dtype=np.float32))
    n_tok = x.shape[0]
    f = model.forward(x, per_token_t, prompt_id, control_embeds, positions=positions,
                      lora_on=lora_on)
    csk = np.empty((n_tok, 1, 1), dtype=x.dtype)
    cot = np.empty((n_tok, 1, 1), dtype=x.dtype)
    for i in range(n_tok):
        csk[i], cot[i] = skip_coeffs(int(per_token_t[i]), sigma_data)
    csk_full = nd.NdArray(np.broadcast_to(csk, x.shape).copy())
    cot_full = nd.NdArray(np.broadcast_to(cot, x.shape).copy())
    return nd.add(nd.mul(csk_full, x), nd.mul(cot_full, f))


def ema_update(target, student, decay: float) -> None:
    """target <- decay * target + (1 - decay) * student, elementwise."""
    for name, p in target.params.items():
        sp = student.params[name].value.data
        p.value.data = decay * p.value.data + (1.0 - decay) * sp


def distill_step(teacher, student, target_ema, batch, scm_cfg: ScmConfig,
                 schedule: NoiseSchedule, rng: np.random.Generator,
                 lr: float = 1e-3) -> float:
    """One guided-distillation update.

    batch items are (x0_tokens, per_token_t, controls, loss_mask, prompt_id)
    windows from the training sampler. The teacher takes one CFG-guided
    solver step t -> t-25; the student's consistency output at (x_t, t) is
    pulled toward the EMA target's output at (x_{t-25}, t-25). The EMA target
    is refreshed after the optimizer step.
    """
    losses = []
    sd = scm_cfg.sigma_data
    for x0, ts, controls, mask, prompt_id in batch:
        n_tok = x0.shape[0]
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = np.stack([schedule.add_noise(x0[i], int(ts[i]), eps[i])
                        for i in range(n_tok)])
        # clean context tokens (t=0) take no solver step
        ts_prev = [max(int(t) - SOLVER_STEP, 0) for t in ts]
        with nd.no_grad():
            t_embeds = teacher.control.embed_sequence(controls).data
            cond = teacher.forward(x_t, ts, prompt_id, t_embeds, lora_on=True).data
            unk = np.stack([teacher.control.embed(UNKNOWN).data] * n_tok)
            unc = teacher.forward(x_t, ts, 0, unk, lora_on=True).data
            eps_hat = cfg_combine(cond, unc, scm_cfg.g_baked)
            x_prev = np.stack([
                x_t[i] if ts_prev[i] == int(ts[i]) else
                schedule.euler_step(x_t[i], eps_hat[i], int(ts[i]), ts_prev[i])
                for i in range(n_tok)
            ])
            tgt_embeds = target_ema.control.embed_sequence(controls)
            target_out = consistency_fn(target_ema, x_prev, ts_prev, prompt_id,
                                        tgt_embeds, sigma_data=sd).data
        student_out = consistency_fn(student, x_t, ts, prompt_id,
                                     student.control.embed_sequence(controls),
                                     sigma_data=sd)
        idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
        flat = nd.reshape(student_out, (n_tok, -1))
        diff = nd.sub(nd.gather_rows(flat, idx),
                      nd.NdArray(target_out.reshape(n_tok, -1)[idx]))
        losses.append(nd.scale(nd.sum_sq(diff), 1.0 / len(idx)))
    total = nd.scale(losses[0] if len(losses) == 1 else
                     _sum_nodes(losses), 1.0 / len(batch))
    nd.backward(total)
    for p in student.params.values():
        if p.value.grad is not None:
            nd.adam_step(p, lr)
    student.zero_grads()
    ema_update(target_ema, student, scm_cfg.ema_decay)
    return float(total.data)


def _sum_nodes(nodes):
    acc = nodes[0]
    for n in nodes[1:]:
        acc = nd.add(acc, n)
    return acc


class ScmEngine(StreamEngine):
    """Four-token window sampled with one joint consistency call per stride.

    Multistep consistency sampling: the leftmost estimate is emitted and
    cached, survivors are re-noised to the next (lower) grid step with fresh
    noise, and a pure-noise token joins at tau[0].
    """

    def __init__(self, student, scm_cfg: ScmConfig | None = None, prompt_id: int = 1,
                 seed: int = 0, use_cache: bool = True,
                 schedule: NoiseSchedule | None = None):
        self.model = student
        self.cfg = scm_cfg or ScmConfig()
        if student.cfg.window < self.cfg.n_steps:
            raise ValueError("student positional table too small for a 4-token window")
        self.prompt_id = prompt_id
        self.use_cache = use_cache
        self.schedule = schedule or NoiseSchedule()
        self.rng = np.random.default_rng(seed)
        self.queue = _ScmQueue(self.cfg, self.rng,
                               (student.cfg.n_patches, student.cfg.d_token))
        self.warmup_strides = self.cfg.n_steps
        self.denoiser_evals = 0
        self.network_forwards = 0
        self._embed_cache = {}

    def _consistency(self, x, ts, embeds, positions) -> np.ndarray:
        with nd.no_grad():
            out = consistency_fn(self.model, x, ts, self.prompt_id, embeds,
                                 positions=positions, sigma_data=self.cfg.sigma_data)
        self.network_forwards += 1
        return out.data

    def stride(self, next_control: str = UNKNOWN):
        q = self.queue
        taus = list(reversed(self.cfg.tau))          # left -> right: low to high
        slots = list(q.slots)
        include_cache = self.use_cache and q.cache is not None
        if include_cache:
            slots = [q.cache] + slots
        x = np.stack([s.token for s in slots])
        ts = [0 if s.state == "cached" else taus[i - (1 if include_cache else 0)]
              for i, s in enumerate(slots)]
        embeds = np.stack([self._symbol_embed(s.control) for s in slots])
        base = self.model.cfg.window
        first = base - 1 if include_cache else base
        positions = np.arange(first, base + len(q.slots))
        x0_hat = self._consistency(x, ts, embeds, positions)
        self.denoiser_evals += len(q.slots)
        off = 1 if include_cache else 0
        done = q.slots.pop(0)
        done.token = x0_hat[off]
        done.state = "cached"
        q.cache = done
        # survivors drop to the next lower grid step with fresh noise
        for j, slot in enumerate(q.slots):
            lower = taus[j]
            eps = self.rng.standard_normal(slot.token.shape).astype(np.float32)
            slot.token = self.schedule.add_noise(x0_hat[off + 1 + j], lower, eps)
            slot.remaining = lower // SOLVER_STEP
        q.slots.append(TokenSlot(self.rng.standard_normal(q.token_shape)
                                 .astype(np.float32),
                                 remaining=self.cfg.tau[0] // SOLVER_STEP,
                                 control=next_control))
        q.stride_count += 1
        return done.token


class _ScmQueue:
    def __init__(self, cfg: ScmConfig, rng, token_shape):
        self.token_shape = tuple(token_shape)
        self.stride_count = 0
        self.cache = None
        taus = list(reversed(cfg.tau))
        self.slots = [
            TokenSlot(rng.standard_normal(token_shape).astype(np.float32),
                      remaining=t // SOLVER_STEP, control=UNKNOWN)
            for t in taus
        ]
