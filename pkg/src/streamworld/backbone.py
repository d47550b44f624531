"""Toy-scale DiT denoiser: patch embedding, sinusoidal timestep embedding with
an FFN, a learned scene-prompt table, N transformer blocks (self-attention +
GELU FFN, pre-norm), LoRA adapters on the attention output projections, a
LayerNorm + linear epsilon head, and the control cross-attention injected
after every block pair.

Video tokens live in raw pixel-patch space: one token is p frames patchified
to (n_patches, d_token) with d_token = p * patch * patch, pixel values scaled
to [0, 1]. The denoiser input/output and the diffusion state share this shape.
Positional encodings are window-relative so generation can run unbounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nd
from .control import ControlConfig, ControlModule, mask_from_positions

GRID_MAX = 1000


@dataclass
class BackboneConfig:
    depth: int = 8                 # block count; control attaches per block pair
    dim: int = 128
    heads: int = 4
    patch: int = 4                 # spatial patch edge
    frames_per_token: int = 4      # p
    prompt_vocab: int = 8          # row 0 reserved as the null prompt
    frame_h: int = 32
    frame_w: int = 32
    window: int = 4                # T: scheduler window, sizes the positional table
    lora_rank: int = 8
    lora_scale: float = 1.0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.depth % 2:
            raise ValueError("depth must be even (control attaches per block pair)")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.frame_h % self.patch or self.frame_w % self.patch:
            raise ValueError("frame dims must be divisible by patch")

    @property
    def n_patches(self) -> int:
        return (self.frame_h // self.patch) * (self.frame_w // self.patch)

    @property
    def d_token(self) -> int:
        return self.frames_per_token * self.patch * self.patch

    @property
    def n_positions(self) -> int:
        return 2 * self.window


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(p, H, W) floats -> (n_patches, p*patch*patch), pure reshape."""
    p, h, w = frames.shape
    gh, gw = h // patch, w // patch
    x = frames.reshape(p, gh, patch, gw, patch)
    x = x.transpose(1, 3, 0, 2, 4)            # (gh, gw, p, patch, patch)
    return np.ascontiguousarray(x.reshape(gh * gw, p * patch * patch))


def unpatchify(token: np.ndarray, p: int, h: int, w: int, patch: int) -> np.ndarray:
    """Exact spatial inverse of patchify."""
    gh, gw = h // patch, w // patch
    x = token.reshape(gh, gw, p, patch, patch)
    x = x.transpose(2, 0, 3, 1, 4)            # (p, gh, patch, gw, patch)
    return np.ascontiguousarray(x.reshape(p, h, w))


def frames_to_token(frames_u8: np.ndarray, patch: int) -> np.ndarray:
    """u8 frames -> float32 pixel-space token in [0, 1]."""
    return patchify(frames_u8.astype(np.float32) / 255.0, patch)


def sinusoid(t: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos ladder at geometric frequencies; f64."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


class WorldModel:
    """The full denoiser: backbone blocks plus the control module."""

    def __init__(self, cfg: BackboneConfig, ccfg: ControlConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.ccfg = ccfg or ControlConfig()
        self.dtype = dtype
        self.params: dict[str, nd.Param] = {}
        rng = np.random.default_rng(seed)
        d, dt = cfg.dim, cfg.d_token

        def reg(name: str, arr: nd.NdArray) -> nd.Param:
            p = nd.Param(arr)
            self.params[name] = p
            return p

        def init(shape, scale):
            return nd.NdArray((rng.standard_normal(shape) * scale).astype(dtype),
                              requires_grad=True)

        def zeros(shape):
            return nd.NdArray(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(shape):
            return nd.NdArray(np.ones(shape, dtype=dtype), requires_grad=True)

        self.patch_w = reg("backbone.patch.w", init((dt, d), dt ** -0.5))
        self.patch_b = reg("backbone.patch.b", zeros(d))
        self.pos_token = reg("backbone.pos_token.w", init((cfg.n_positions, d), 0.02))
        self.pos_patch = reg("backbone.pos_patch.w", init((cfg.n_patches, d), 0.02))
        self.tstep1_w = reg("backbone.tstep.ffn1.w", init((d, d), d ** -0.5))
        self.tstep1_b = reg("backbone.tstep.ffn1.b", zeros(d))
        self.tstep2_w = reg("backbone.tstep.ffn2.w", init((d, d), d ** -0.5))
        self.tstep2_b = reg("backbone.tstep.ffn2.b", zeros(d))
        self.prompt_table = reg("backbone.prompt.table", init((cfg.prompt_vocab, d), 0.02))
        self.blocks = []
        for i in range(cfg.depth):
            b = {
                "ln1_w": reg(f"backbone.block{i}.ln1.w", ones(d)),
                "ln1_b": reg(f"backbone.block{i}.ln1.b", zeros(d)),
                "qkv_w": reg(f"backbone.block{i}.qkv.w", init((d, 3 * d), d ** -0.5)),
                "qkv_b": reg(f"backbone.block{i}.qkv.b", zeros(3 * d)),
                "proj_w": reg(f"backbone.block{i}.proj.w", init((d, d), d ** -0.5)),
                "proj_b": reg(f"backbone.block{i}.proj.b", zeros(d)),
                "ln2_w": reg(f"backbone.block{i}.ln2.w", ones(d)),
                "ln2_b": reg(f"backbone.block{i}.ln2.b", zeros(d)),
                "ffn1_w": reg(f"backbone.block{i}.ffn1.w", init((d, cfg.ffn_mult * d), d ** -0.5)),
                "ffn1_b": reg(f"backbone.block{i}.ffn1.b", zeros(cfg.ffn_mult * d)),
                "ffn2_w": reg(f"backbone.block{i}.ffn2.w",
                              init((cfg.ffn_mult * d, d), (cfg.ffn_mult * d) ** -0.5)),
                "ffn2_b": reg(f"backbone.block{i}.ffn2.b", zeros(d)),
                # up starts at zero so lora_on is initially a no-op
                "lora_down": reg(f"backbone.lora.{i}.down", init((d, cfg.lora_rank), d ** -0.5)),
                "lora_up": reg(f"backbone.lora.{i}.up", zeros((cfg.lora_rank, d))),
            }
            self.blocks.append(b)
        self.head_ln_w = reg("backbone.head.ln.w", ones(d))
        self.head_ln_b = reg("backbone.head.ln.b", zeros(d))
        self.head_w = reg("backbone.head.out.w", init((d, dt), d ** -0.5))
        self.head_b = reg("backbone.head.out.b", zeros(dt))
        self.decode_w = reg("backbone.decode.w",
                            nd.NdArray(np.eye(dt, dtype=dtype), requires_grad=True))
        self.decode_b = reg("backbone.decode.b", zeros(dt))
        self.control = ControlModule(self.ccfg, d, cfg.depth // 2, reg, rng, dtype)

    # -- embeddings ---------------------------------------------------------

    def patch_embed(self, frames: np.ndarray) -> nd.NdArray:
        """p frames (H, W) in [0, 1] -> (n_patches, dim) learned token features."""
        cfg = self.cfg
        if frames.shape != (cfg.frames_per_token, cfg.frame_h, cfg.frame_w):
            raise nd.ShapeError(f"expected {(cfg.frames_per_token, cfg.frame_h, cfg.frame_w)}"
                                f", got {frames.shape}")
        raw = nd.NdArray(patchify(frames.astype(self.dtype), cfg.patch))
        return nd.add_bias(nd.matmul(raw, self.patch_w.value), self.patch_b.value)

    def timestep_embed(self, t: int) -> nd.NdArray:
        return nd.reshape(self.timestep_embed_batch([t]), (self.cfg.dim,))

    def timestep_embed_batch(self, ts) -> nd.NdArray:
        for t in ts:
            if not 0 <= int(t) <= GRID_MAX:
                raise ValueError(f"timestep {t} outside [0, {GRID_MAX}]")
        raw = nd.NdArray(np.stack([sinusoid(int(t), self.cfg.dim) for t in ts])
                         .astype(self.dtype))
        h = nd.add_bias(nd.matmul(raw, self.tstep1_w.value), self.tstep1_b.value)
        h = nd.activation(h, "silu")
        return nd.add_bias(nd.matmul(h, self.tstep2_w.value), self.tstep2_b.value)

    def prompt_embed(self, prompt_id: int) -> nd.NdArray:
        if not 0 <= prompt_id < self.cfg.prompt_vocab:
            raise IndexError(f"prompt id {prompt_id} outside vocab")
        return nd.reshape(nd.gather_rows(self.prompt_table.value, [prompt_id]),
                          (self.cfg.dim,))

    # -- denoiser -----------------------------------------------------------

    def forward(self, noisy_tokens, per_token_t, prompt_id: int, control_embeds,
                lora_on: bool = False, positions=None) -> nd.NdArray:
        """Joint epsilon prediction over a window of tokens.

        noisy_tokens: (n_tok, n_patches, d_token); per_token_t gives each
        token its own grid step; control_embeds is (n_tok, dim) from the
        control module (or appropriate UNKNOWN rows). positions are the
        window-relative slots (default 0..n_tok-1). Output shape == input.
        """
        cfg = self.cfg
        x = noisy_tokens if isinstance(noisy_tokens, nd.NdArray) else nd.NdArray(
            np.asarray(noisy_tokens, dtype=self.dtype))
        n_tok, n_patches, dt = x.shape
        if n_patches != cfg.n_patches or dt != cfg.d_token:
            raise nd.ShapeError(f"token shape {x.shape} does not match config")
        if len(per_token_t) != n_tok:
            raise nd.ShapeError("per_token_t length mismatch")
        if not 0 <= prompt_id < cfg.prompt_vocab:
            raise IndexError(f"prompt id {prompt_id} outside vocab")
        ce = control_embeds if isinstance(control_embeds, nd.NdArray) else nd.NdArray(
            np.asarray(control_embeds, dtype=self.dtype))
        if ce.shape != (n_tok, cfg.dim):
            raise nd.ShapeError(f"control_embeds {ce.shape} != ({n_tok}, {cfg.dim})")
        if positions is None:
            positions = np.arange(n_tok)
        positions = np.asarray(positions, dtype=np.int64)
        if np.any(positions < 0) or np.any(positions >= cfg.n_positions):
            raise IndexError("window position outside the positional table")

        seq = n_tok * n_patches
        tok_of_seq = np.repeat(np.arange(n_tok), n_patches)
        h = nd.add_bias(nd.matmul(nd.reshape(x, (seq, dt)), self.patch_w.value),
                        self.patch_b.value)
        h = nd.add(h, nd.gather_rows(self.pos_token.value, positions[tok_of_seq]))
        h = nd.add(h, nd.gather_rows(self.pos_patch.value,
                                     np.tile(np.arange(n_patches), n_tok)))
        h = nd.add(h, nd.gather_rows(self.prompt_table.value, np.full(seq, prompt_id)))

        t_emb = self.timestep_embed_batch(per_token_t)
        t_seq = nd.gather_rows(t_emb, tok_of_seq)
        token_mask = mask_from_positions(positions, self.ccfg.omega)

        for i, blk in enumerate(self.blocks):
            h = nd.add(h, t_seq)  # per-token timestep conditioning before each block
            a = nd.layer_norm(h, blk["ln1_w"].value, blk["ln1_b"].value)
            qkv = nd.add_bias(nd.matmul(a, blk["qkv_w"].value), blk["qkv_b"].value)
            q, k, v = nd.split(qkv, 3, axis=-1)
            att = self._heads(nd.attention(self._split_heads(q), self._split_heads(k),
                                           self._split_heads(v)))
            out = nd.add_bias(nd.matmul(att, blk["proj_w"].value), blk["proj_b"].value)
            if lora_on:
                delta = nd.matmul(nd.matmul(att, blk["lora_down"].value),
                                  blk["lora_up"].value)
                out = nd.add(out, nd.scale(delta, cfg.lora_scale))
            h = nd.add(h, out)
            f = nd.layer_norm(h, blk["ln2_w"].value, blk["ln2_b"].value)
            f = nd.add_bias(nd.matmul(f, blk["ffn1_w"].value), blk["ffn1_b"].value)
            f = nd.activation(f, "gelu")
            f = nd.add_bias(nd.matmul(f, blk["ffn2_w"].value), blk["ffn2_b"].value)
            h = nd.add(h, f)
            if i % 2 == 1:
                h = self.control.inject(h, ce, token_mask, i // 2, n_patches)

        y = nd.layer_norm(h, self.head_ln_w.value, self.head_ln_b.value)
        y = nd.add_bias(nd.matmul(y, self.head_w.value), self.head_b.value)
        return nd.reshape(y, (n_tok, n_patches, dt))

    def _split_heads(self, x: nd.NdArray) -> nd.NdArray:
        seq, d = x.shape
        hd = d // self.cfg.heads
        return nd.transpose(nd.reshape(x, (seq, self.cfg.heads, hd)), (1, 0, 2))

    def _heads(self, x: nd.NdArray) -> nd.NdArray:
        heads, seq, hd = x.shape
        return nd.reshape(nd.transpose(x, (1, 0, 2)), (seq, heads * hd))

    # -- decode -------------------------------------------------------------

    def unpatch(self, token: np.ndarray) -> np.ndarray:
        """Pixel-space token -> p frames (H, W), clamped to [0, 1]."""
        cfg = self.cfg
        token = np.asarray(token, dtype=self.dtype)
        if token.shape != (cfg.n_patches, cfg.d_token):
            raise nd.ShapeError(f"token shape {token.shape} does not match config")
        decoded = token @ self.decode_w.value.data + self.decode_b.value.data
        frames = unpatchify(decoded, cfg.frames_per_token, cfg.frame_h, cfg.frame_w,
                            cfg.patch)
        return np.clip(frames, 0.0, 1.0)

    def frames_u8(self, token: np.ndarray) -> np.ndarray:
        return np.clip(np.rint(self.unpatch(token) * 255.0), 0, 255).astype(np.uint8)

    # -- parameter plumbing -------------------------------------------------

    def param_names(self):
        return list(self.params)

    def trainable(self, stage: str) -> dict:
        """The stage's unfrozen parameter subset, by checkpoint name."""
        if stage == "warmup":
            pick = lambda n: n.startswith("backbone.lora.")
        elif stage == "interactive":
            pick = lambda n: n.startswith("control.")
        elif stage in ("swindpm", "scm", "all"):
            pick = lambda n: True
        else:
            raise ValueError(f"unknown stage {stage!r}")
        return {n: p for n, p in self.params.items() if pick(n)}

    def state_arrays(self) -> dict:
        return {n: p.value.data for n, p in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for n, p in self.params.items():
            a = np.asarray(arrays[n], dtype=p.value.data.dtype)
            if a.shape != p.value.data.shape:
                raise ValueError(f"shape mismatch for {n}")
            p.value.data = a.copy()
            p.m = np.zeros_like(a)
            p.v = np.zeros_like(a)
            p.step_count = 0

    def clone(self, seed: int = 0) -> "WorldModel":
        twin = WorldModel(self.cfg, self.ccfg, seed=seed, dtype=self.dtype)
        twin.load_state(self.state_arrays())
        return twin

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.value.grad = None
