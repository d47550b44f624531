"""Command line entry points: dataset generation, filtering, the four-stage
training recipe, evaluation, serving, and benchmarks. Reports are JSON files
with matplotlib figures rendered alongside."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import report
from .datakit import run_pipeline
from .metrics import bench_stream
from .server import StreamServer
from .toyworld import ToyWorld, WorldConfig, generate_clip, read_dataset, write_dataset
from .training import (ConfigError, RunConfig, STAGES, TrainAbort, config_to_dict,
                       evaluate, load_config, load_stage, make_engine, make_scripts,
                       run_training)


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        raise SystemExit(2)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_world_gen(args) -> int:
    cfg = _load_run_config(args.config)
    world_cfg = cfg.world
    if args.seed is not None:
        world_cfg = dataclasses.replace(world_cfg, seed=args.seed)
    rng = np.random.default_rng(world_cfg.seed)
    clips = []
    scenes = []
    for s in range(args.scenes):
        scene_cfg = dataclasses.replace(world_cfg, seed=world_cfg.seed + s,
                                        caption_id=1 + s % (cfg.backbone.prompt_vocab - 1))
        scenes.append(ToyWorld(scene_cfg))
    for i in range(args.clips):
        world = scenes[i % len(scenes)]
        clips.append(generate_clip(world, rng, n_frames=args.frames))
    write_dataset(args.out, clips, world_cfg)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_world_scripts(args) -> int:
    scripts = make_scripts(args.seed, args.count, args.tokens)
    _write_json(args.out, {"tokens": args.tokens, "scripts": scripts})
    print(f"wrote {len(scripts)} scripts to {args.out}")
    return 0


def cmd_datakit_filter(args) -> int:
    clips = read_dataset(args.input)
    params = {"jump": args.jump, "radius": args.radius, "points": args.points,
              "angle": args.angle, "delta": args.delta, "ratio": args.ratio}
    manifest = run_pipeline(clips, params)
    _write_json(args.out, manifest)
    kept = len(manifest["kept"])
    print(f"kept {kept}/{len(clips)} clips; histogram after: "
          f"{manifest['histogram_after']}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train,
                                           **{f"steps_{args.stage}": args.steps}))
    try:
        history = run_training(args.stage, cfg, args.data, args.out,
                               init_path=args.init,
                               on_step=lambda s, l: print(f"[{args.stage}] step {s}: "
                                                          f"loss {l:.5f}"))
    except TrainAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    fig = Path(args.out).with_suffix(".loss.png")
    report.save_loss_curve(history["losses"], fig, title=f"{args.stage} loss")
    print(f"{args.stage}: {history['steps']} steps in {history['wall_s']:.1f}s, "
          f"final loss {history['losses'][-1]:.5f}; wrote {args.out} and {fig}")
    return 0


def cmd_eval(args) -> int:
    doc = json.loads(Path(args.scripts).read_text())
    rep = evaluate(args.checkpoint, doc["scripts"], mode=args.mode,
                   guidance=args.guidance)
    _write_json(args.out, rep)
    fig = Path(args.out).with_suffix(".png")
    report.save_eval_figure(rep, fig)
    print(f"move_psnr {rep['move_psnr_db']:.2f} dB vs baseline "
          f"{rep['baseline_db']:.2f} dB (margin {rep['margin_db']:+.2f} dB); "
          f"fps {rep['fps']:.1f}; wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    teacher, student, cfg = load_stage(args.checkpoint)
    host, port = args.bind.rsplit(":", 1)

    def factory():
        return make_engine(teacher, student, cfg, args.mode, args.guidance,
                           seed=args.seed, prompt_id=args.prompt)

    server = StreamServer(factory, fps=args.fps)
    actual = server.start(host, int(port))
    print(f"serving {args.mode} on ws://{host}:{actual} (fps {args.fps})", flush=True)
    try:
        while True:
            server._thread.join(timeout=3600)
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_bench(args) -> int:
    teacher, student, cfg = load_stage(args.checkpoint)
    results = {}
    modes = ["teacher", "scm"] if (args.mode == "both" and student is not None) \
        else [args.mode if args.mode != "both" else "teacher"]
    for mode in modes:
        eng = make_engine(teacher, student, cfg, mode, args.guidance, seed=0)
        results[mode] = bench_stream(eng, args.tokens)
    doc = {"results": results}
    if len(results) == 2:
        doc["call_ratio"] = (results["teacher"]["denoiser_evals_per_token"]
                             / results["scm"]["denoiser_evals_per_token"])
        doc["speedup"] = results["scm"]["fps"] / results["teacher"]["fps"]
    _write_json(args.out, doc)
    report.save_bench_figure(results, Path(args.out).with_suffix(".png"))
    for mode, r in results.items():
        print(f"{mode}: {r['fps']:.2f} fps, p50 {r['p50_ms']:.1f} ms, "
              f"p95 {r['p95_ms']:.1f} ms, {r['denoiser_evals_per_token']:.0f} evals/token")
    if "speedup" in doc:
        print(f"call ratio {doc['call_ratio']:.1f}x, wall-clock speedup "
              f"{doc['speedup']:.2f}x")
    return 0


def cmd_config_dump(args) -> int:
    _write_json(args.out, config_to_dict(RunConfig()))
    print(f"wrote default config to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamworld",
                                description="interactive streaming world simulator")
    sub = p.add_subparsers(dest="command", required=True)

    world = sub.add_parser("world", help="toy world data generation")
    wsub = world.add_subparsers(dest="world_command", required=True)
    gen = wsub.add_parser("gen", help="generate a clip dataset")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--clips", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None)
    gen.add_argument("--scenes", type=int, default=1)
    gen.add_argument("--frames", type=int, default=None)
    gen.set_defaults(func=cmd_world_gen)
    scripts = wsub.add_parser("scripts", help="generate held-out control scripts")
    scripts.add_argument("--seed", type=int, default=1234)
    scripts.add_argument("--count", type=int, default=32)
    scripts.add_argument("--tokens", type=int, default=6)
    scripts.add_argument("--out", required=True)
    scripts.set_defaults(func=cmd_world_scripts)

    dk = sub.add_parser("datakit", help="dataset filtering pipeline")
    dsub = dk.add_subparsers(dest="datakit_command", required=True)
    filt = dsub.add_parser("filter", help="filter + balance a dataset directory")
    filt.add_argument("--in", dest="input", required=True)
    filt.add_argument("--out", required=True)
    filt.add_argument("--radius", type=float, default=80.0)
    filt.add_argument("--points", type=int, default=40)
    filt.add_argument("--angle", type=float, default=90.0)
    filt.add_argument("--jump", type=float, default=20.0)
    filt.add_argument("--delta", type=float, default=0.5)
    filt.add_argument("--ratio", type=float, default=1.5)
    filt.set_defaults(func=cmd_datakit_filter)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--stage", choices=STAGES, required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--init", default=None, help="prerequisite stage checkpoint")
    tr.add_argument("--config", default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Move-PSNR against the world oracle")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scripts", required=True)
    ev.add_argument("--out", default="eval_report.json")
    ev.add_argument("--mode", choices=["teacher", "scm"], default="teacher")
    ev.add_argument("--guidance", type=float, default=None)
    ev.set_defaults(func=cmd_eval)

    sv = sub.add_parser("serve", help="serve a live session over WebSocket")
    sv.add_argument("--checkpoint", required=True)
    sv.add_argument("--bind", default="127.0.0.1:8080")
    sv.add_argument("--fps", type=int, default=16)
    sv.add_argument("--mode", choices=["teacher", "scm"], default="teacher")
    sv.add_argument("--prompt", type=int, default=1)
    sv.add_argument("--guidance", type=float, default=2.0)
    sv.add_argument("--seed", type=int, default=0)
    sv.set_defaults(func=cmd_serve)

    be = sub.add_parser("bench", help="throughput/latency benchmark")
    be.add_argument("--checkpoint", required=True)
    be.add_argument("--tokens", type=int, default=16)
    be.add_argument("--out", default="bench_report.json")
    be.add_argument("--mode", choices=["teacher", "scm", "both"], default="both")
    be.add_argument("--guidance", type=float, default=2.0)
    be.set_defaults(func=cmd_bench)

    cf = sub.add_parser("config", help="config utilities")
    csub = cf.add_subparsers(dest="config_command", required=True)
    dump = csub.add_parser("dump", help="write the default config JSON")
    dump.add_argument("--out", required=True)
    dump.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
