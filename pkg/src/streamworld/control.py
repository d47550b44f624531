"""Interactive control module: a learned symbol vocabulary whose embeddings
are injected into the denoiser through a causal cross-attention layer. The
additive mask limits each control to the token it was issued for plus the
next `omega` tokens; unlabeled data uses the dedicated UNKNOWN symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd

UNKNOWN = "UNKNOWN"
DRIVE_SYMBOLS = ("D", "DL", "DR", UNKNOWN)


@dataclass
class ControlConfig:
    symbols: tuple = DRIVE_SYMBOLS
    dim_in: int = 32              # embedding table width before the MLP
    omega: int = 4                # causal reach: current + next omega tokens
    dropout_q: float = 0.1

    def __post_init__(self):
        if UNKNOWN not in self.symbols:
            raise ValueError("control vocabulary must include UNKNOWN")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")

    @property
    def unknown_index(self) -> int:
        return self.symbols.index(UNKNOWN)

    def index_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown control symbol {symbol!r}") from None


def causal_mask(n_tokens: int, omega: int) -> np.ndarray:
    """Additive token-by-control mask: entry (i, j) is 0 iff j <= i <= j+omega."""
    return mask_from_positions(np.arange(n_tokens), omega)


def mask_from_positions(positions, omega: int) -> np.ndarray:
    """Same band structure for tokens at arbitrary window positions."""
    pos = np.asarray(positions, dtype=np.int64)
    i = pos[:, None]
    j = pos[None, :]
    ok = (j <= i) & (i <= j + omega)
    return np.where(ok, 0.0, nd.NEG_INF).astype(np.float32)


def control_dropout(symbols, q: float, rng: np.random.Generator) -> list:
    """Independently replace labeled symbols with UNKNOWN at probability q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must be in [0, 1]")
    draws = rng.random(len(symbols))
    return [UNKNOWN if (sym != UNKNOWN and draws[i] < q) else sym
            for i, sym in enumerate(symbols)]


class ControlModule:
    """Embedding block (table + two-linear SiLU MLP) and one cross-attention
    layer per injection site. Output projections start at zero so injection
    begins as the identity and the warmed-up backbone is undisturbed."""

    def __init__(self, cfg: ControlConfig, dim: int, n_sites: int, register, rng, dtype=np.float32):
        self.cfg = cfg
        self.dim = dim
        self.n_sites = n_sites
        c_in = cfg.dim_in

        def init(shape, scale):
            return nd.NdArray((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

        def zeros(shape):
            return nd.NdArray(np.zeros(shape, dtype=dtype), requires_grad=True)

        self.table = register("control.table", init((len(cfg.symbols), c_in), 0.5))
        self.mlp1_w = register("control.mlp1.w", init((c_in, dim), c_in ** -0.5))
        self.mlp1_b = register("control.mlp1.b", zeros(dim))
        self.mlp2_w = register("control.mlp2.w", init((dim, dim), dim ** -0.5))
        self.mlp2_b = register("control.mlp2.b", zeros(dim))
        self.xattn = []
        for s in range(n_sites):
            layer = {}
            for name in ("q", "k", "v", "o"):
                w = zeros((dim, dim)) if name == "o" else init((dim, dim), dim ** -0.5)
                layer[name + "_w"] = register(f"control.xattn{s}.{name}.w", w)
                layer[name + "_b"] = register(f"control.xattn{s}.{name}.b", zeros(dim))
            self.xattn.append(layer)

    def embed(self, symbol: str) -> nd.NdArray:
        """MLP(table[symbol]); deterministic given weights."""
        return nd.reshape(self.embed_sequence([symbol]), (self.dim,))

    def embed_sequence(self, symbols) -> nd.NdArray:
        idx = np.array([self.cfg.index_of(s) for s in symbols])
        h = nd.gather_rows(self.table.value, idx)
        h = nd.add_bias(nd.matmul(h, self.mlp1_w.value), self.mlp1_b.value)
        h = nd.activation(h, "silu")
        return nd.add_bias(nd.matmul(h, self.mlp2_w.value), self.mlp2_b.value)

    def inject(self, h: nd.NdArray, control_embeds: nd.NdArray, token_mask: np.ndarray,
               site: int, n_patches: int) -> nd.NdArray:
        """Residual cross-attention: token patches query the control embeddings.

        h: (seq, dim) with seq = n_tokens * n_patches; token_mask is the
        token-by-control additive mask, expanded here to patch granularity.
        """
        layer = self.xattn[site]
        q = nd.add_bias(nd.matmul(h, layer["q_w"].value), layer["q_b"].value)
        k = nd.add_bias(nd.matmul(control_embeds, layer["k_w"].value), layer["k_b"].value)
        v = nd.add_bias(nd.matmul(control_embeds, layer["v_w"].value), layer["v_b"].value)
        mask = nd.NdArray(np.repeat(token_mask, n_patches, axis=0))
        att = nd.attention(q, k, v, mask)
        out = nd.add_bias(nd.matmul(att, layer["o_w"].value), layer["o_b"].value)
        return nd.add(h, out)

    def attention_probe(self, h: np.ndarray, control_embeds: np.ndarray,
                        token_mask: np.ndarray, site: int, n_patches: int) -> np.ndarray:
        """Post-softmax cross-attention weights for mask verification."""
        layer = self.xattn[site]
        q = h @ layer["q_w"].value.data + layer["q_b"].value.data
        k = control_embeds @ layer["k_w"].value.data + layer["k_b"].value.data
        return nd.attention_weights(q, k, np.repeat(token_mask, n_patches, axis=0))
