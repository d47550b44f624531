"""Sliding-window scheduler: queue bookkeeping invariants, cache semantics,
bit-equivalence with a naive full-schedule reference, stream immutability,
and the training window sampler."""

import numpy as np
import pytest

from streamworld import nd
from streamworld.backbone import BackboneConfig, WorldModel
from streamworld.control import UNKNOWN, ControlConfig
from streamworld.diffusion import SOLVER_STEP, NoiseSchedule, cfg_combine
from streamworld.swindpm import (SwinDpmEngine, init_window, sample_training_window,
                                 token_controls)
from streamworld.toyworld import ToyWorld, WorldConfig, generate_clip


def tiny_model(window=4, seed=0, omega=1):
    cfg = BackboneConfig(depth=2, dim=16, heads=2, patch=2, frames_per_token=1,
                         prompt_vocab=4, frame_h=4, frame_w=4, window=window,
                         lora_rank=2)
    return WorldModel(cfg, ControlConfig(dim_in=8, omega=omega), seed=seed)


# ---------------------------------------------------------------------------
# init_window
# ---------------------------------------------------------------------------


def test_init_ramp_t4_k10():
    q = init_window(4, 10, np.random.default_rng(0), (4, 4))
    assert q.ramp() == [10, 20, 30, 40]
    assert q.cache is None


def test_init_degenerate_single_token():
    q = init_window(1, 40, np.random.default_rng(0), (4, 4))
    assert q.ramp() == [40]


def test_init_seeded_noise_reproducible():
    a = init_window(4, 10, np.random.default_rng(3), (4, 4))
    b = init_window(4, 10, np.random.default_rng(3), (4, 4))
    for sa, sb in zip(a.slots, b.slots):
        assert np.array_equal(sa.token, sb.token)


def test_init_rejects_overlong_schedule():
    with pytest.raises(ValueError):
        init_window(8, 10, np.random.default_rng(0), (4, 4))  # 25*80 > 1000
    with pytest.raises(ValueError):
        init_window(0, 10, np.random.default_rng(0), (4, 4))


# ---------------------------------------------------------------------------
# stride
# ---------------------------------------------------------------------------


def test_stride_preserves_ramp_and_emits():
    model = tiny_model()
    eng = SwinDpmEngine(model, T=4, k=10, guidance=1.0, seed=1)
    before = eng.queue.ramp()
    tok = eng.stride("D")
    assert eng.queue.ramp() == before == [10, 20, 30, 40]
    assert tok.shape == (model.cfg.n_patches, model.cfg.d_token)
    assert eng.queue.cache is not None and eng.queue.cache.remaining == 0
    assert eng.queue.slots[-1].control == "D"


def test_many_strides_invariants():
    model = tiny_model()
    eng = SwinDpmEngine(model, T=4, k=2, guidance=2.0, seed=2)
    emitted = 0
    for s in range(200):
        eng.stride("D" if s % 2 else "DR")
        emitted += 1
        assert len(eng.queue.slots) == 4
        assert eng.queue.ramp() == [2, 4, 6, 8]
    assert emitted == eng.queue.stride_count == 200
    assert eng.denoiser_evals == 200 * 2 * 4  # k steps x T tokens per stride


def test_call_counter_per_emitted_token():
    model = tiny_model()
    eng = SwinDpmEngine(model, T=4, k=10, guidance=2.0, seed=3)
    eng.stride("D")
    assert eng.denoiser_evals == 40          # k*T guided predictions
    assert eng.network_forwards == 20        # two forwards per step under CFG
    eng2 = SwinDpmEngine(model, T=4, k=10, guidance=1.0, seed=3)
    eng2.stride("D")
    assert eng2.network_forwards == 10       # no unconditional pass at g=1


class CacheEchoModel:
    """Probe: epsilon prediction equals the first window token, so the cache
    content propagates into every survivor."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.control = self

    def embed(self, symbol):
        return nd.NdArray(np.zeros(self.cfg.dim, dtype=np.float32))

    def forward(self, x, ts, prompt_id, embeds, positions=None, lora_on=False):
        data = x if isinstance(x, np.ndarray) else x.data
        out = np.broadcast_to(data[0], data.shape).copy()
        return nd.NdArray(out)


def test_cache_participates_in_denoising():
    cfg = BackboneConfig(depth=2, dim=16, heads=2, patch=2, frames_per_token=1,
                         prompt_vocab=4, frame_h=4, frame_w=4, window=4)
    a = SwinDpmEngine(CacheEchoModel(cfg), T=4, k=2, guidance=1.0, seed=4)
    b = SwinDpmEngine(CacheEchoModel(cfg), T=4, k=2, guidance=1.0, seed=4)
    a.stride("D")
    b.stride("D")
    b.force_cache(b.queue.cache.token + 1.0)  # perturb the cached emission
    ea = a.stride("D")
    eb = b.stride("D")
    assert not np.array_equal(ea, eb)

    # with the cache disabled the perturbation cannot reach the window
    c = SwinDpmEngine(CacheEchoModel(cfg), T=4, k=2, guidance=1.0, seed=4, use_cache=False)
    d = SwinDpmEngine(CacheEchoModel(cfg), T=4, k=2, guidance=1.0, seed=4, use_cache=False)
    c.stride("D")
    d.stride("D")
    d.force_cache(d.queue.cache.token + 1.0)
    assert np.array_equal(c.stride("D"), d.stride("D"))


# ---------------------------------------------------------------------------
# naive full-schedule reference (no queue, same call order, cache disabled)
# ---------------------------------------------------------------------------


def naive_full_schedule(model, T, k, guidance, prompt_id, seed, n_strides, controls):
    schedule = NoiseSchedule()
    rng = np.random.default_rng(seed)
    shape = (model.cfg.n_patches, model.cfg.d_token)
    tokens = [rng.standard_normal(shape).astype(np.float32) for _ in range(T)]
    ctrl = [UNKNOWN] * T
    remaining = [(i + 1) * k for i in range(T)]
    with nd.no_grad():
        unknowns = {s: model.control.embed(s).data
                    for s in (UNKNOWN, *{c for c in controls})}
    base = model.cfg.window
    positions = np.arange(base, base + T)
    emitted = []
    s = 0
    for stride_i in range(n_strides):
        active = list(range(s, s + T))
        for _ in range(k):
            x = np.stack([tokens[a] for a in active])
            ts = [SOLVER_STEP * remaining[a] for a in active]
            embeds = np.stack([unknowns[ctrl[a]] for a in active])
            with nd.no_grad():
                cond = model.forward(x, ts, prompt_id, embeds, positions=positions).data
                if guidance != 1.0:
                    unk = np.stack([unknowns[UNKNOWN]] * T)
                    unc = model.forward(x, ts, 0, unk, positions=positions).data
                    eps = cfg_combine(cond, unc, guidance)
                else:
                    eps = cond
            for i, a in enumerate(active):
                t = SOLVER_STEP * remaining[a]
                tokens[a] = schedule.euler_step(tokens[a], eps[i], t, t - SOLVER_STEP)
                remaining[a] -= 1
        emitted.append(tokens[s])
        tokens.append(rng.standard_normal(shape).astype(np.float32))
        ctrl.append(controls[stride_i])
        remaining.append(k * T)
        s += 1
    return emitted


def test_bit_equivalence_with_naive_reference():
    model = tiny_model(window=4)
    controls = (["D", "DL", "DR"] * 10)[:24]
    eng = SwinDpmEngine(model, T=4, k=2, guidance=2.0, prompt_id=1, seed=5,
                        use_cache=False)
    got = [eng.stride(c) for c in controls]
    want = naive_full_schedule(model, 4, 2, 2.0, 1, seed=5, n_strides=24,
                               controls=controls)
    assert len(got) == len(want)
    for a, b in zip(got, want):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# generate_stream
# ---------------------------------------------------------------------------


def test_stream_zero_tokens_runs_warmup_only():
    eng = SwinDpmEngine(tiny_model(), T=4, k=2, guidance=1.0, seed=6)
    out = list(eng.generate_stream(iter(["D"]), n_tokens=0))
    assert out == []
    assert eng.queue.stride_count == 4  # w = T warmup strides


def test_stream_frame_arithmetic():
    eng = SwinDpmEngine(tiny_model(), T=4, k=2, guidance=1.0, seed=7)
    groups = list(eng.generate_stream(iter(["D", "DL"]), n_tokens=8))
    assert len(groups) == 8
    for g in groups:
        assert g.shape == (1, 4, 4) and g.dtype == np.uint8


def test_stream_control_feed_repeats_last():
    eng = SwinDpmEngine(tiny_model(), T=2, k=2, guidance=1.0, seed=8)
    list(eng.generate_stream(iter(["DR"]), n_tokens=3))
    assert eng.queue.slots[-1].control == "DR"


def test_stream_immutability_before_control_change():
    """Frames emitted before a control transcript diverges are bit-identical."""
    ma = tiny_model(seed=9)
    rng = np.random.default_rng(10)
    for site in range(ma.cfg.depth // 2):
        ma.control.xattn[site]["o_w"].value.data = (
            rng.standard_normal((16, 16)).astype(np.float32) * 0.2)
    mb = ma.clone()
    a = SwinDpmEngine(ma, T=4, k=2, guidance=2.0, seed=11)
    b = SwinDpmEngine(mb, T=4, k=2, guidance=2.0, seed=11)
    ca = ["D"] * 12
    cb = ["D"] * 6 + ["DR"] * 6
    ea = [a.stride(c) for c in ca]
    eb = [b.stride(c) for c in cb]
    for i in range(7):  # control 6 is enqueued after emission 6
        assert np.array_equal(ea[i], eb[i]), i
    assert any(not np.array_equal(ea[i], eb[i]) for i in range(7, 12))


# ---------------------------------------------------------------------------
# training window sampler
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def clip():
    world = ToyWorld(WorldConfig(seed=5, frame_h=4, frame_w=4))
    return generate_clip(world, np.random.default_rng(0), n_frames=96)


def test_sample_window_mask_and_shapes(clip):
    x0, ts, controls, mask = sample_training_window(clip, T=4, k=10,
                                                    rng=np.random.default_rng(1),
                                                    patch=2, p=1)
    assert x0.shape == (8, 4, 4)
    assert list(mask) == [False] * 4 + [True] * 4
    assert len(ts) == len(controls) == 8


def test_sample_window_ramp_per_replica(clip):
    for seed in range(50):
        _, ts, _, _ = sample_training_window(clip, T=4, k=10,
                                             rng=np.random.default_rng(seed),
                                             patch=2, p=1)
        context, active = ts[:4], ts[4:]
        assert context == [0, 0, 0, 0]  # clean warmup replica, like the cache
        assert all(b > a for a, b in zip(active, active[1:]))  # rising ramp
        assert all(b - a == 10 * SOLVER_STEP for a, b in zip(active, active[1:]))
        assert all(SOLVER_STEP <= t <= 1000 for t in active)
        assert all(t % SOLVER_STEP == 0 for t in ts)


def test_sample_window_seed_reproducible(clip):
    a = sample_training_window(clip, 4, 10, np.random.default_rng(7), 2, 1)
    b = sample_training_window(clip, 4, 10, np.random.default_rng(7), 2, 1)
    assert np.array_equal(a[0], b[0])
    assert a[1] == b[1] and a[2] == b[2]


def test_sample_window_too_short(clip):
    with pytest.raises(ValueError):
        sample_training_window(clip, T=16, k=2, rng=np.random.default_rng(0),
                               patch=2, p=4)


def test_token_controls_majority():
    assert token_controls(["D", "DL", "DL", "DR"], 4) == "DL"
    assert token_controls(["D", "DL"], 2) == "D"  # tie: earliest wins
