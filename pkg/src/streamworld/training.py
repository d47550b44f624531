"""Four-stage training recipe and evaluation orchestration.

Stages: (1) warmup adapts the backbone to the world through LoRA only, on
control-unlabeled windows; (2) interactive trains just the control module on
labeled windows with control dropout; (3) swindpm unfreezes everything and
fine-tunes on staggered-noise 2T windows with the loss masked to the last T;
(4) scm distills the teacher into the 4-step consistency student.

Toy step budgets replace the full-scale recipe's 20k/20k/60k/10k steps, and
the toy learning rate is larger than the full-scale 1e-5; both are config
fields, documented side by side.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nd
from .backbone import BackboneConfig, WorldModel, frames_to_token
from .checkpoint import read_checkpoint, write_checkpoint
from .control import UNKNOWN, ControlConfig, control_dropout
from .diffusion import GRID, SOLVER_STEP, NoiseSchedule, denoising_loss
from .metrics import bench_stream, move_psnr
from .scm import ScmConfig, ScmEngine, distill_step
from .swindpm import SwinDpmEngine, sample_training_window, token_controls
from .toyworld import ToyWorld, WorldConfig, read_dataset

STAGES = ("warmup", "interactive", "swindpm", "scm")


class TrainAbort(RuntimeError):
    """Training hit a non-recoverable state (non-finite loss)."""


@dataclass
class TrainParams:
    seed: int = 0
    lr: float = 1e-3            # full-scale recipe: 1e-5
    batch: int = 8              # full-scale recipe: 32
    steps_warmup: int = 300     # full-scale: 20k
    steps_interactive: int = 300  # full-scale: 20k
    steps_swindpm: int = 600    # full-scale: 60k
    steps_scm: int = 300        # full-scale: 10k
    T: int = 4
    k: int = 10
    guidance: float = 2.0
    prompt_dropout: float = 0.1

    def steps_for(self, stage: str) -> int:
        return getattr(self, f"steps_{stage}")


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    train: TrainParams = field(default_factory=TrainParams)
    scm: ScmConfig = field(default_factory=ScmConfig)


_SECTIONS = {
    "world": WorldConfig,
    "backbone": BackboneConfig,
    "control": ControlConfig,
    "train": TrainParams,
    "scm": ScmConfig,
}


class ConfigError(ValueError):
    pass


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a JSON document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for section, cls in _SECTIONS.items():
        body = doc.get(section, {})
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - names
        if bad:
            raise ConfigError(f"unknown keys in {section}: {sorted(bad)}")
        if "symbols" in body:
            body = dict(body, symbols=tuple(body["symbols"]))
        if "tau" in body:
            body = dict(body, tau=tuple(body["tau"]))
        try:
            out[section] = cls(**body)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad {section} config: {e}") from e
    return RunConfig(**out)


def config_to_dict(cfg: RunConfig) -> dict:
    return {k: dataclasses.asdict(getattr(cfg, k)) for k in _SECTIONS}


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def sample_plain_window(clip, T: int, rng, patch: int, p: int):
    """T consecutive tokens with i.i.d. grid steps (multiples of 25)."""
    span = T * p
    if len(clip) < span:
        raise ValueError("clip too short for a training window")
    start = int(rng.integers(0, len(clip) - span + 1))
    x0, controls = [], []
    for i in range(T):
        lo = start + i * p
        x0.append(frames_to_token(clip.frames[lo:lo + p], patch))
        controls.append(token_controls(clip.controls[lo:lo + p], p))
    ts = [int(rng.integers(1, GRID // SOLVER_STEP + 1)) * SOLVER_STEP for _ in range(T)]
    return np.stack(x0), ts, controls, np.ones(T, dtype=bool)


def _batch(clips, stage: str, cfg: RunConfig, rng):
    p = cfg.backbone.frames_per_token
    patch = cfg.backbone.patch
    T = cfg.train.T
    items = []
    for _ in range(cfg.train.batch):
        clip = clips[int(rng.integers(len(clips)))]
        if stage in ("swindpm", "scm"):
            x0, ts, controls, mask = sample_training_window(
                clip, T, cfg.train.k, rng, patch, p)
            positions = None
        else:
            x0, ts, controls, mask = sample_plain_window(clip, T, rng, patch, p)
            offset = int(rng.integers(0, T + 1))  # cover the whole positional table
            positions = np.arange(offset, offset + T)
        if stage == "warmup":
            controls = [UNKNOWN] * len(controls)
        else:
            controls = control_dropout(controls, cfg.control.dropout_q, rng)
        prompt = clip.caption_id
        if rng.random() < cfg.train.prompt_dropout:
            prompt = 0
        items.append((x0, ts, controls, mask, prompt, positions))
    return items


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------


def train_denoising_stage(model: WorldModel, stage: str, clips, cfg: RunConfig,
                          log_every: int = 10, on_step=None) -> dict:
    """Warmup / interactive / swindpm stages share the epsilon-MSE loop."""
    rng = np.random.default_rng(cfg.train.seed + STAGES.index(stage))
    schedule = NoiseSchedule()
    trainable = model.trainable(stage)
    steps = cfg.train.steps_for(stage)
    losses = []
    t0 = time.time()
    for step in range(steps):
        batch = _batch(clips, stage, cfg, rng)
        try:
            nodes = []
            for x0, ts, controls, mask, prompt, positions in batch:
                ce = model.control.embed_sequence(controls)
                nodes.append(denoising_loss(model, schedule, x0, ts, ce, prompt, rng,
                                            mask, positions=positions))
            total = nodes[0]
            for n in nodes[1:]:
                total = nd.add(total, n)
            total = nd.scale(total, 1.0 / len(nodes))
            loss = float(total.data)
        except nd.NonFiniteError as e:
            raise TrainAbort(f"{stage}: non-finite loss at step {step}: {e}") from e
        if not np.isfinite(loss):
            raise TrainAbort(f"{stage}: non-finite loss at step {step}")
        nd.backward(total)
        for p in trainable.values():
            if p.value.grad is not None:
                nd.adam_step(p, cfg.train.lr)
        model.zero_grads()
        losses.append(loss)
        if on_step and step % log_every == 0:
            on_step(step, loss)
    return {"stage": stage, "steps": steps, "losses": losses,
            "wall_s": time.time() - t0, "lr": cfg.train.lr, "batch": cfg.train.batch}


def train_scm_stage(teacher: WorldModel, clips, cfg: RunConfig,
                    log_every: int = 10, on_step=None):
    """Distill the teacher into the consistency student (labeled data only)."""
    rng = np.random.default_rng(cfg.train.seed + STAGES.index("scm"))
    schedule = NoiseSchedule()
    student = teacher.clone()
    target = teacher.clone()
    steps = cfg.train.steps_for("scm")
    losses = []
    t0 = time.time()
    p = cfg.backbone.frames_per_token
    for step in range(steps):
        batch = []
        for _ in range(cfg.train.batch):
            clip = clips[int(rng.integers(len(clips)))]
            x0, ts, controls, mask = sample_training_window(
                clip, cfg.train.T, cfg.train.k, rng, cfg.backbone.patch, p)
            batch.append((x0, ts, controls, mask, clip.caption_id))
        try:
            loss = distill_step(teacher, student, target, batch, cfg.scm, schedule,
                                rng, lr=cfg.train.lr)
        except nd.NonFiniteError as e:
            raise TrainAbort(f"scm: non-finite loss at step {step}: {e}") from e
        if not np.isfinite(loss):
            raise TrainAbort(f"scm: non-finite loss at step {step}")
        losses.append(loss)
        if on_step and step % log_every == 0:
            on_step(step, loss)
    history = {"stage": "scm", "steps": steps, "losses": losses,
               "wall_s": time.time() - t0, "lr": cfg.train.lr,
               "batch": cfg.train.batch}
    return student, history


# ---------------------------------------------------------------------------
# checkpoint wiring
# ---------------------------------------------------------------------------


def build_model(cfg: RunConfig, seed: int | None = None) -> WorldModel:
    return WorldModel(cfg.backbone, cfg.control,
                      seed=cfg.train.seed if seed is None else seed)


def save_stage(path, model: WorldModel, cfg: RunConfig, history: dict,
               student: WorldModel | None = None) -> None:
    arrays = model.state_arrays()
    if student is not None:
        arrays.update({f"scm.{n}": a for n, a in student.state_arrays().items()})
    write_checkpoint(path, arrays)
    Path(str(path) + ".json").write_text(json.dumps(
        {"config": config_to_dict(cfg), "history": {k: v for k, v in history.items()
                                                    if k != "losses"},
         "losses": history.get("losses", [])}, indent=1))


def load_stage(path):
    """Returns (teacher model, student model or None, RunConfig)."""
    arrays = read_checkpoint(path)
    sidecar = Path(str(path) + ".json")
    cfg = config_from_dict(json.loads(sidecar.read_text())["config"])
    teacher = build_model(cfg)
    teacher.load_state({n: a for n, a in arrays.items() if not n.startswith("scm.")})
    student = None
    scm_arrays = {n[len("scm."):]: a for n, a in arrays.items() if n.startswith("scm.")}
    if scm_arrays:
        student = build_model(cfg)
        student.load_state(scm_arrays)
    return teacher, student, cfg


def run_training(stage: str, cfg: RunConfig, data_dir, out_path,
                 init_path=None, on_step=None) -> dict:
    """One CLI-visible training stage with prerequisite checking."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    clips = load_training_clips(data_dir)
    if stage == "warmup":
        model = build_model(cfg)
    else:
        if init_path is None:
            raise ValueError(f"stage {stage} requires --init (its prerequisite checkpoint)")
        model, _, prev_cfg = load_stage(init_path)
        cfg = dataclasses.replace(cfg, backbone=prev_cfg.backbone,
                                  control=prev_cfg.control)
    if stage == "scm":
        student, history = train_scm_stage(model, clips, cfg, on_step=on_step)
        save_stage(out_path, model, cfg, history, student=student)
    else:
        history = train_denoising_stage(model, stage, clips, cfg, on_step=on_step)
        save_stage(out_path, model, cfg, history)
    return history


def load_training_clips(data_dir):
    """All clips, or just the manifest's kept set when one is present."""
    data_dir = Path(data_dir)
    clips = read_dataset(data_dir)
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        kept = set(doc.get("kept", []))
        clips = [c for c in clips if c.clip_id in kept]
    if not clips:
        raise ValueError(f"no training clips in {data_dir}")
    return clips


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def make_scripts(seed: int, count: int, tokens: int) -> list:
    """Held-out control scripts, turn-heavy so control errors are visible."""
    rng = np.random.default_rng(seed)
    scripts = []
    for i in range(count):
        syms = []
        while len(syms) < tokens:
            sym = ("D", "DL", "DR")[int(rng.integers(3))]
            run = int(rng.integers(1, 4))
            syms.extend([sym] * run)
        scripts.append({"seed": int(rng.integers(2 ** 31)), "controls": syms[:tokens]})
    return scripts


def make_engine(teacher, student, cfg: RunConfig, mode: str, guidance: float,
                seed: int = 0, prompt_id: int = 1):
    if mode == "scm":
        if student is None:
            raise ValueError("checkpoint has no distilled student (run the scm stage)")
        return ScmEngine(student, cfg.scm, prompt_id=prompt_id, seed=seed)
    return SwinDpmEngine(teacher, T=cfg.train.T, k=cfg.train.k, guidance=guidance,
                         prompt_id=prompt_id, seed=seed)


def evaluate(ckpt_path, scripts, mode: str = "teacher", guidance: float | None = None,
             bench_tokens: int = 8) -> dict:
    """Move-PSNR vs the control-shuffled baseline, plus fps and call ratio."""
    teacher, student, cfg = load_stage(ckpt_path)
    world = ToyWorld(cfg.world)
    g = cfg.train.guidance if guidance is None else guidance
    per_script = []
    for i, script in enumerate(scripts):
        seed = script["seed"]
        eng = make_engine(teacher, student, cfg, mode, g, seed=seed,
                          prompt_id=cfg.world.caption_id)
        moved = move_psnr(eng, world, script["controls"], seed)
        eng_b = make_engine(teacher, student, cfg, mode, g, seed=seed,
                            prompt_id=cfg.world.caption_id)
        base = move_psnr(eng_b, world, script["controls"], seed,
                         shuffle_controls=np.random.default_rng(seed + 1))
        per_script.append({"seed": seed, "move_db": moved, "baseline_db": base})
    move_db = float(np.mean([s["move_db"] for s in per_script]))
    base_db = float(np.mean([s["baseline_db"] for s in per_script]))
    bench = bench_stream(make_engine(teacher, student, cfg, mode, g, seed=0), bench_tokens)
    teacher_evals = cfg.train.T * cfg.train.k
    return {
        "mode": mode,
        "move_psnr_db": move_db,
        "baseline_db": base_db,
        "margin_db": move_db - base_db,
        "fps": bench["fps"],
        "call_ratio": (4.0 / teacher_evals) if mode == "scm" else 1.0,
        "denoiser_evals_per_token": bench["denoiser_evals_per_token"],
        "per_script": per_script,
    }
