"""Umbrella command line: data generation, training, evaluation, serving.

Global flags: --seed applies to whichever subcommand runs; --config points at
a JSON file whose top-level sections are subcommand names (dashes or
underscores both accepted in keys) supplying defaults that explicit flags
still override. The EGWL_DATA_DIR environment variable is the default corpus
root wherever a --data or gen-data --out path is expected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

DATA_DIR_ENV = "EGWL_DATA_DIR"


def _env_data_dir() -> str | None:
    return os.environ.get(DATA_DIR_ENV)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise SystemExit("--config must contain a JSON object")
    return doc


def _section(doc: dict, name: str) -> dict:
    raw = doc.get(name) or doc.get(name.replace("-", "_")) or {}
    if not isinstance(raw, dict):
        raise SystemExit(f"config section {name!r} must be an object")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _model_config(args, strategy: str):
    from .backbone import ModelConfig

    return ModelConfig(
        depth=args.depth, width=args.width, heads=args.heads,
        patch=args.patch, image_size=(args.size, args.size),
        max_frames=args.max_frames, strategy=strategy,
        lora_rank=args.lora_rank,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--size", type=int, default=48, help="frame height and width")
    p.add_argument("--max-frames", type=int, default=16)
    p.add_argument("--lora-rank", type=int, default=0)


def _add_data_flag(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", default=_env_data_dir(),
                   required=required and _env_data_dir() is None,
                   help=f"dataset directory (default ${DATA_DIR_ENV})")


def _load_model(path: str):
    from .backbone import load_checkpoint

    model, extra = load_checkpoint(path)
    model.eval()
    return model, extra


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="egworld", description=__doc__.splitlines()[0])
    top.add_argument("--seed", type=int, default=0)
    top.add_argument("--config", default=None, help="JSON file with per-subcommand defaults")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic clip corpus")
    p.add_argument("--out", default=_env_data_dir(),
                   required=_env_data_dir() is None,
                   help=f"output directory (default ${DATA_DIR_ENV})")
    p.add_argument("--train-clips", type=int, default=256)
    p.add_argument("--eval-clips", type=int, default=32)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--focal", type=float, default=48.0)
    p.add_argument("--fps", type=float, default=16.0)

    p = sub.add_parser("train", help="train one conditioning strategy")
    _add_data_flag(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--strategy", default="none")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--frames", type=int, default=12)
    _add_model_flags(p)

    p = sub.add_parser("sample", help="generate one window and score it")
    p.add_argument("--checkpoint", required=True)
    _add_data_flag(p)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--steps", type=int, default=16, help="sampler steps")
    p.add_argument("--out", default="sample.npz")

    p = sub.add_parser("eval", help="score a checkpoint over the eval split")
    p.add_argument("--checkpoint", required=True)
    _add_data_flag(p)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--max-clips", type=int, default=None)
    p.add_argument("--out", default="report.csv")

    p = sub.add_parser("ablate", help="train and score several strategies")
    _add_data_flag(p)
    p.add_argument("--strategies", default="none,token_add,skeleton_video,hybrid")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--eval-frames", type=int, default=12)
    p.add_argument("--eval-steps", type=int, default=16)
    p.add_argument("--max-eval-clips", type=int, default=None)
    _add_model_flags(p)

    p = sub.add_parser("rollout", help="chunked autoregressive generation")
    p.add_argument("--checkpoint", required=True)
    _add_data_flag(p)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--chunks", type=int, default=3)
    p.add_argument("--chunk", type=int, default=12)
    p.add_argument("--context", type=int, default=4)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--out", default="rollout.npz")

    p = sub.add_parser("serve", help="live pose-steered streaming server")
    p.add_argument("--checkpoint", required=True)
    _add_data_flag(p, required=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--chunk", type=int, default=12)
    p.add_argument("--context", type=int, default=4)
    p.add_argument("--steps", type=int, default=8, help="sampler steps per chunk")
    p.add_argument("--capacity", type=int, default=64)
    p.add_argument("--pace-fps", type=float, default=16.0)

    p = sub.add_parser("bench", help="offline chunk latency benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chunks", type=int, default=8)
    p.add_argument("--chunk", type=int, default=12)
    p.add_argument("--context", type=int, default=4)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", default=None, help="write the full report as JSON")

    return top


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_gen_data(args) -> int:
    from .scene import DatasetConfig, generate_dataset

    cfg = DatasetConfig(train_clips=args.train_clips, eval_clips=args.eval_clips,
                        frames=args.frames, height=args.size, width=args.size,
                        focal=args.focal, fps=args.fps, seed=args.seed)
    manifest = generate_dataset(args.out, cfg)
    total = sum(len(v) for v in manifest["splits"].values())
    print(f"wrote {total} clips ({args.frames} frames at {args.size}x{args.size}) "
          f"to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .backbone import build_velocity_model
    from .conditioning import parse_strategy
    from .flow import BatchBuilder, ClipDataset, TrainConfig, Trainer

    strategy = parse_strategy(args.strategy)
    os.makedirs(args.out, exist_ok=True)
    ds = ClipDataset(args.data, "train")
    model = build_velocity_model(_model_config(args, strategy.value), seed=args.seed)
    builder = BatchBuilder(ds, model.strategy)
    cfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr,
                      frames=args.frames, seed=args.seed)
    ckpt = os.path.join(args.out, "model.egwt")
    trainer = Trainer(model, builder, cfg,
                      metrics_path=os.path.join(args.out, "train.jsonl"))
    last = trainer.run(checkpoint_path=ckpt)
    print(f"trained {strategy.value} for {args.steps} steps; "
          f"final loss {last.get('loss', float('nan')):.5f}; checkpoint {ckpt}")
    return 0


def _cmd_sample(args) -> int:
    from .evaluation import evaluate_window, format_metric
    from .flow import BatchBuilder, ClipDataset, SamplerConfig
    from .service import frames_to_uint8
    import torch

    model, _ = _load_model(args.checkpoint)
    ds = ClipDataset(args.data, args.split)
    builder = BatchBuilder(ds, model.strategy)
    scores, gen = evaluate_window(model, builder, args.clip, frames=args.frames,
                                  sampler=SamplerConfig(steps=args.steps),
                                  seed=args.seed)
    gt = ds.clips[args.clip].frames[:args.frames]
    np.savez_compressed(args.out,
                        generated=frames_to_uint8(torch.from_numpy(gen)),
                        ground_truth=frames_to_uint8(torch.from_numpy(gt)))
    print(f"clip {args.clip}: psnr {scores.psnr:.2f} dB, ssim {scores.ssim:.3f}, "
          f"l2 {format_metric(scores.l2_err_px)} px -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import csv

    from .evaluation import evaluate_model, format_metric
    from .flow import ClipDataset, SamplerConfig

    model, _ = _load_model(args.checkpoint)
    ds = ClipDataset(args.data, "eval")
    report = evaluate_model(model, ds, frames=args.frames,
                            sampler=SamplerConfig(steps=args.steps),
                            seed=args.seed, max_clips=args.max_clips)
    cols = list(report.keys())
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerow({k: ("" if v is None else v) for k, v in report.items()})
    md_path = os.path.splitext(args.out)[0] + ".md"
    with open(md_path, "w") as f:
        f.write("| " + " | ".join(cols) + " |\n")
        f.write("|" + "---|" * len(cols) + "\n")
        f.write("| " + " | ".join(
            format_metric(v) if isinstance(v, float) else str(v)
            for v in report.values()) + " |\n")
    pretty = ", ".join(f"{k}={format_metric(v) if isinstance(v, float) else v}"
                       for k, v in report.items())
    print(pretty)
    print(f"wrote {args.out} and {md_path}")
    return 0


def _cmd_ablate(args) -> int:
    from .evaluation import ablation_run
    from .flow import SamplerConfig, TrainConfig

    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows = ablation_run(
        args.data, strategies, _model_config(args, "none"),
        TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr,
                    frames=args.frames, seed=args.seed),
        args.out,
        eval_frames=args.eval_frames,
        sampler=SamplerConfig(steps=args.eval_steps),
        eval_seed=args.seed,
        max_eval_clips=args.max_eval_clips,
    )
    for row in rows:
        print(row)
    print(f"tables under {args.out}")
    return 0


def _cmd_rollout(args) -> int:
    import torch

    from .codec import decode_video, encode_video
    from .flow import (BatchBuilder, ClipDataset, RolloutConfig,
                       SamplerConfig, assemble_rollout, rollout_chunks)
    from .service import frames_to_uint8

    model, _ = _load_model(args.checkpoint)
    ds = ClipDataset(args.data, args.split)
    builder = BatchBuilder(ds, model.strategy)
    rec = ds.clips[args.clip]
    cfg = RolloutConfig(chunk=args.chunk, context=args.context,
                        sampler=SamplerConfig(steps=args.steps))
    stride = args.chunk - args.context
    needed = (args.chunks - 1) * stride + args.chunk
    if needed > rec.num_frames:
        max_chunks = 1 + max(0, (rec.num_frames - args.chunk) // stride)
        raise SystemExit(
            f"clip {args.clip} has {rec.num_frames} frames; {args.chunks} chunks "
            f"need {needed}. Use --chunks <= {max_chunks} or regenerate data "
            f"with more frames.")

    def provider(k: int):
        return builder.window(args.clip, k * stride, args.chunk)[1]

    first = encode_video(torch.from_numpy(rec.frames[:1]), 2)[None]
    chunks = [z for _, z in rollout_chunks(model, provider, first,
                                           args.chunks, cfg, seed=args.seed)]
    stream = assemble_rollout(chunks, cfg)
    video = frames_to_uint8(decode_video(stream, 2)[0])
    np.savez_compressed(args.out, frames=video)
    print(f"rolled out {video.shape[0]} frames "
          f"({args.chunks} chunks of {args.chunk}, context {args.context}) "
          f"-> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    from .scene import SceneSpec, load_manifest
    from .service import PoseStreamServer, ServeConfig

    model, _ = _load_model(args.checkpoint)
    scene = None
    if args.data:
        scene = SceneSpec.from_json(load_manifest(args.data)["scene"])
    cfg = ServeConfig(host=args.host, port=args.port, chunk=args.chunk,
                      context=args.context, capacity=args.capacity,
                      sampler_steps=args.steps, seed=args.seed,
                      pace_fps=args.pace_fps)
    server = PoseStreamServer(model, cfg, scene=scene)
    server.start()
    print(f"serving on {args.host}:{server.port} "
          f"(chunk {args.chunk}, context {args.context}, "
          f"strategy {model.strategy.value}); TCP framing or WebSocket /stream")
    server.serve_forever()
    return 0


def _cmd_bench(args) -> int:
    from .service import ServeConfig, bench_latency

    model, _ = _load_model(args.checkpoint)
    cfg = ServeConfig(chunk=args.chunk, context=args.context,
                      sampler_steps=args.steps, seed=args.seed)
    report = bench_latency(model, cfg, chunks=args.chunks, seed=args.seed)
    print(f"fps {report['fps']:.2f} | chunk median {report['chunk_ms_median']:.1f} ms "
          f"p95 {report['chunk_ms_p95']:.1f} ms | conditioning median "
          f"{report['cond_ms_median']:.2f} ms "
          f"({100 * report['cond_overhead_frac']:.1f}% of chunk)")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1)
        print(f"report -> {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "rollout": _cmd_rollout,
    "serve": _cmd_serve,
    "bench": _cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    config = _load_config(known.config)

    parser = build_parser()
    if config:
        # inject config-file defaults into every subparser section it names
        actions = next(a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction))
        for name, sp in actions.choices.items():
            section = _section(config, name)
            if section:
                known_dests = {a.dest for a in sp._actions}
                bad = set(section) - known_dests
                if bad:
                    raise SystemExit(f"config section {name!r} has unknown "
                                     f"keys: {sorted(bad)}")
                sp.set_defaults(**section)
                for action in sp._actions:
                    if action.dest in section:
                        action.required = False
        if "seed" in config and isinstance(config["seed"], int):
            parser.set_defaults(seed=config["seed"])

    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
