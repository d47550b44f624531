"""Backbone: patch/timestep/prompt embeddings against naive oracles, forward
contracts (shape, LoRA no-op, determinism, permutation equivariance), decode
path, and a small end-to-end gradient check."""

import math

import numpy as np
import pytest

from conftest import fd_grad, max_rel_err

from streamworld import nd
from streamworld.backbone import (BackboneConfig, WorldModel, frames_to_token,
                                  patchify, sinusoid, unpatchify)
from streamworld.control import ControlConfig


def tiny_cfg(**kw):
    base = dict(depth=2, dim=16, heads=2, patch=2, frames_per_token=1,
                prompt_vocab=4, frame_h=4, frame_w=4, window=2, lora_rank=2)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture()
def model():
    return WorldModel(tiny_cfg(), ControlConfig(dim_in=8, omega=1), seed=1)


# ---------------------------------------------------------------------------
# patchify / unpatchify
# ---------------------------------------------------------------------------


def test_patchify_matches_naive_loop():
    rng = np.random.default_rng(0)
    frames = rng.random((3, 8, 8)).astype(np.float32)
    tok = patchify(frames, 4)
    assert tok.shape == (4, 48)
    for gy in range(2):
        for gx in range(2):
            want = frames[:, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4].reshape(-1)
            assert np.array_equal(tok[gy * 2 + gx], want)


def test_unpatchify_is_exact_inverse():
    rng = np.random.default_rng(1)
    frames = rng.random((4, 12, 8)).astype(np.float32)
    tok = patchify(frames, 4)
    assert np.array_equal(unpatchify(tok, 4, 12, 8, 4), frames)


def test_frames_to_token_scales_to_unit():
    frames = np.full((1, 4, 4), 255, dtype=np.uint8)
    tok = frames_to_token(frames, 2)
    assert np.allclose(tok, 1.0)


# ---------------------------------------------------------------------------
# patch_embed
# ---------------------------------------------------------------------------


def test_patch_embed_patch_count():
    cfg = BackboneConfig(depth=2, dim=32, heads=2, patch=4, frames_per_token=4,
                         prompt_vocab=4, frame_h=32, frame_w=32, window=2)
    m = WorldModel(cfg, ControlConfig(dim_in=8), seed=0)
    out = m.patch_embed(np.zeros((4, 32, 32), dtype=np.float32))
    assert out.shape == (64, 32)


def test_patch_embed_zero_in_zero_out(model):
    model.patch_b.value.data[:] = 0.0
    out = model.patch_embed(np.zeros((1, 4, 4), dtype=np.float32))
    assert np.all(out.data == 0.0)


def test_patch_embed_matches_naive_conv():
    m = WorldModel(tiny_cfg(), ControlConfig(dim_in=8), seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    frames = rng.random((1, 4, 4))
    out = m.patch_embed(frames).data
    w = m.patch_w.value.data  # (d_token, dim), rows ordered (frame, py, px)
    b = m.patch_b.value.data
    ps = m.cfg.patch
    for gy in range(2):
        for gx in range(2):
            acc = b.copy()
            r = 0
            for f in range(1):
                for py in range(ps):
                    for px in range(ps):
                        acc += frames[f, gy * ps + py, gx * ps + px] * w[r]
                        r += 1
            assert max_rel_err(out[gy * 2 + gx], acc, floor=1e-6) < 1e-12


def test_patch_embed_shape_errors(model):
    with pytest.raises(nd.ShapeError):
        model.patch_embed(np.zeros((1, 6, 4), dtype=np.float32))


# ---------------------------------------------------------------------------
# timestep / prompt embeddings
# ---------------------------------------------------------------------------


def test_sinusoid_t0():
    s = sinusoid(0, 16)
    assert np.array_equal(s[0::2], np.zeros(8))
    assert np.array_equal(s[1::2], np.ones(8))


def test_sinusoid_injective_over_grid():
    assert not np.array_equal(sinusoid(0, 16), sinusoid(1000, 16))


def test_sinusoid_frequency_ladder_f64():
    dim, t = 16, 137
    s = sinusoid(t, dim)
    for i in range(dim // 2):
        f = math.exp(-math.log(10000.0) * i / (dim // 2))
        assert s[2 * i] == pytest.approx(math.sin(t * f), abs=1e-12)
        assert s[2 * i + 1] == pytest.approx(math.cos(t * f), abs=1e-12)


def test_timestep_embed_range(model):
    with pytest.raises(ValueError):
        model.timestep_embed(-1)
    with pytest.raises(ValueError):
        model.timestep_embed(1001)
    assert model.timestep_embed(1000).shape == (16,)


def test_prompt_embed_rows(model):
    null = model.prompt_embed(0)
    assert np.array_equal(null.data, model.prompt_table.value.data[0])
    assert not np.array_equal(model.prompt_embed(1).data, model.prompt_embed(2).data)
    with pytest.raises(IndexError):
        model.prompt_embed(model.cfg.prompt_vocab)


def test_prompt_embed_gradient_single_row():
    m = WorldModel(tiny_cfg(), ControlConfig(dim_in=8), seed=3, dtype=np.float64)
    loss = nd.sum_sq(m.prompt_embed(2))
    nd.backward(loss)
    g = m.prompt_table.value.grad
    assert list(np.nonzero(np.abs(g).sum(axis=1))[0]) == [2]
    table = m.prompt_table.value.data

    def fwd():
        return np.sum(table[2] ** 2)

    (want,) = fd_grad(fwd, [table])
    assert max_rel_err(g, want, floor=1e-4) < 1e-4


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def toks(model, n_tok, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_tok, model.cfg.n_patches, model.cfg.d_token)).astype(np.float32)


def test_forward_shape_contract(model):
    x = toks(model, 1)
    ce = model.control.embed_sequence(["D"])
    out = model.forward(x, [500], 1, ce)
    assert out.shape == x.shape


def test_forward_validates_inputs(model):
    x = toks(model, 2)
    ce = model.control.embed_sequence(["D", "DL"])
    with pytest.raises(nd.ShapeError):
        model.forward(x, [500], 1, ce)  # t length mismatch
    with pytest.raises(IndexError):
        model.forward(x, [500, 500], 99, ce)  # unknown prompt


def test_forward_lora_zero_is_noop(model):
    x = toks(model, 2)
    ce = model.control.embed_sequence(["D", "DL"])
    a = model.forward(x, [100, 200], 1, ce, lora_on=False)
    b = model.forward(x, [100, 200], 1, ce, lora_on=True)
    assert np.array_equal(a.data, b.data)


def test_forward_lora_nonzero_changes_output(model):
    x = toks(model, 2)
    ce = model.control.embed_sequence(["D", "DL"])
    model.blocks[0]["lora_up"].value.data[:] = 0.05
    a = model.forward(x, [100, 200], 1, ce, lora_on=False)
    b = model.forward(x, [100, 200], 1, ce, lora_on=True)
    assert not np.array_equal(a.data, b.data)


def test_forward_deterministic(model):
    x = toks(model, 3, seed=5)
    ce = model.control.embed_sequence(["D", "DL", "DR"])
    a = model.forward(x, [25, 50, 75], 2, ce, positions=[0, 1, 2])
    b = model.forward(x, [25, 50, 75], 2, ce, positions=[0, 1, 2])
    assert np.array_equal(a.data, b.data)


def test_forward_permutation_equivariant():
    m = WorldModel(tiny_cfg(window=3), ControlConfig(dim_in=8, omega=1), seed=4,
                   dtype=np.float64)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, m.cfg.n_patches, m.cfg.d_token))
    ts = [100, 400, 700]
    syms = ["D", "DL", "DR"]
    pos = np.array([0, 1, 2])
    perm = np.array([2, 0, 1])
    base = m.forward(x, ts, 1, m.control.embed_sequence(syms), positions=pos).data
    permuted = m.forward(x[perm], [ts[i] for i in perm], 1,
                         m.control.embed_sequence([syms[i] for i in perm]),
                         positions=pos[perm]).data
    assert np.allclose(permuted, base[perm], atol=1e-10)


def test_forward_position_bounds(model):
    x = toks(model, 1)
    ce = model.control.embed_sequence(["D"])
    with pytest.raises(IndexError):
        model.forward(x, [0], 1, ce, positions=[model.cfg.n_positions])


# ---------------------------------------------------------------------------
# unpatch
# ---------------------------------------------------------------------------


def test_unpatch_zero_token(model):
    frames = model.unpatch(np.zeros((model.cfg.n_patches, model.cfg.d_token)))
    assert frames.shape == (1, 4, 4)
    assert np.all(frames == 0.0)


def test_unpatch_clamps_to_unit(model):
    tok = np.full((model.cfg.n_patches, model.cfg.d_token), 7.0)
    assert np.all(model.unpatch(tok) == 1.0)
    tok[:] = -3.0
    assert np.all(model.unpatch(tok) == 0.0)


def test_unpatch_reassembly_matches_naive(model):
    rng = np.random.default_rng(7)
    frames = rng.random((1, 4, 4)).astype(np.float32)
    tok = patchify(frames, 2)
    out = model.unpatch(tok)  # decode head initialized to identity
    assert np.allclose(out, frames, atol=1e-6)
    ps = model.cfg.patch
    for gy in range(2):
        for gx in range(2):
            want = tok[gy * 2 + gx].reshape(1, ps, ps)
            assert np.allclose(out[:, gy * ps:(gy + 1) * ps, gx * ps:(gx + 1) * ps],
                               np.clip(want, 0, 1), atol=1e-6)


# ---------------------------------------------------------------------------
# end-to-end gradient (module-level smoke; acceptance does every coordinate)
# ---------------------------------------------------------------------------


def test_end_to_end_gradient_sample():
    m = WorldModel(tiny_cfg(), ControlConfig(dim_in=8, omega=1), seed=8, dtype=np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, m.cfg.n_patches, m.cfg.d_token))
    ts = [250, 500]

    def loss_node():
        out = m.forward(x, ts, 1, m.control.embed_sequence(["D", "DL"]), lora_on=True)
        return nd.scale(nd.sum_sq(out), 1.0 / out.data.size)

    root = loss_node()
    nd.backward(root)
    for name in ("backbone.block0.qkv.w", "backbone.head.out.w", "control.mlp2.w",
                 "backbone.lora.0.up", "backbone.prompt.table"):
        p = m.params[name]
        got = p.value.grad
        assert got is not None, name
        flat = p.value.data.reshape(-1)
        probe = list(range(0, flat.size, max(1, flat.size // 6)))[:6]
        for i in probe:
            old = flat[i]
            h = 1e-5
            flat[i] = old + h
            fp = float(loss_node().data)
            flat[i] = old - h
            fm = float(loss_node().data)
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            assert max_rel_err(got.reshape(-1)[i], fd, floor=1e-5) < 1e-4, (name, i)
    m.zero_grads()
