"""Noise schedule, forward noising, deterministic Euler/DDIM stepping on a
1000-step grid (solver moves in increments of 25), and classifier-free
guidance. The schedule is a variance-preserving linear-beta DDPM grid with
epsilon prediction; alpha_bar[0] is defined as 1 so grid step 0 is clean data.
"""

from __future__ import annotations

import numpy as np

from . import nd

GRID = 1000
SOLVER_STEP = 25


class NoiseSchedule:
    """Linear betas 1e-4..0.02 over 1000 steps; alpha_bar indexed 0..1000."""

    def __init__(self, n_grid: int = GRID, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.n_grid = n_grid
        self.beta = np.linspace(beta_start, beta_end, n_grid, dtype=np.float64)
        ab = np.empty(n_grid + 1, dtype=np.float64)
        ab[0] = 1.0
        ab[1:] = np.cumprod(1.0 - self.beta)
        self.alpha_bar = ab
        assert np.all(np.diff(ab) < 0) and ab[-1] > 0.0

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.n_grid:
            raise ValueError(f"grid step {t} outside [0, {self.n_grid}]")
        return t

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[self._check_t(t)]))

    def sqrt_one_minus_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[self._check_t(t)]))

    def add_noise(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
        if eps.shape != x0.shape:
            raise nd.ShapeError(f"eps {eps.shape} vs x0 {x0.shape}")
        t = self._check_t(t)
        return (self.sqrt_ab(t) * x0 + self.sqrt_one_minus_ab(t) * eps).astype(x0.dtype)

    def euler_step(self, x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int) -> np.ndarray:
        """Deterministic DDIM update from grid step t down to t_next < t."""
        t = self._check_t(t)
        t_next = self._check_t(t_next)
        if t_next >= t:
            raise ValueError(f"t_next {t_next} must be below t {t}")
        x0_hat = (x_t - self.sqrt_one_minus_ab(t) * eps_hat) / self.sqrt_ab(t)
        out = self.sqrt_ab(t_next) * x0_hat + self.sqrt_one_minus_ab(t_next) * eps_hat
        return out.astype(x_t.dtype)

    def x0_from_eps(self, x_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
        t = self._check_t(t)
        if t == 0:
            return x_t
        return ((x_t - self.sqrt_one_minus_ab(t) * eps_hat) / self.sqrt_ab(t)).astype(x_t.dtype)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, g: float) -> np.ndarray:
    """eps_uncond + g * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise nd.ShapeError(f"cfg {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + g * (eps_cond - eps_uncond)


def denoising_loss(model, schedule: NoiseSchedule, x0_tokens: np.ndarray, per_token_t,
                   control_embeds, prompt_id: int, rng: np.random.Generator,
                   loss_mask, positions=None, lora_on: bool = True) -> nd.NdArray:
    """Epsilon-MSE over loss-masked tokens.

    x0_tokens: (n_tok, n_patches, d) clean tokens; returns the scalar
    mean over masked tokens of ||eps_hat - eps||^2 as a graph node.
    """
    mask = np.asarray(loss_mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss_mask selects no tokens")
    n_tok, n_patches, d = x0_tokens.shape
    eps = rng.standard_normal(x0_tokens.shape).astype(x0_tokens.dtype)
    x_t = np.stack([
        schedule.add_noise(x0_tokens[i], int(per_token_t[i]), eps[i]) for i in range(n_tok)
    ])
    eps_hat = model.forward(nd.NdArray(x_t), per_token_t, prompt_id, control_embeds,
                            positions=positions, lora_on=lora_on)
    idx = np.nonzero(mask)[0]
    flat = nd.reshape(eps_hat, (n_tok, n_patches * d))
    diff = nd.sub(nd.gather_rows(flat, idx), nd.NdArray(eps.reshape(n_tok, -1)[idx]))
    return nd.scale(nd.sum_sq(diff), 1.0 / len(idx))
