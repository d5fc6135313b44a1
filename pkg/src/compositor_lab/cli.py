"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, STAGES, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .masks import BBox, InvalidBBoxError
from .scene_synth import derive_seed, load_split, make_dataset, png_bytes, to_u8

log = logging.getLogger("compositor_lab")

CACHE_ENV = "COMPOSITOR_LAB_CACHE"
# named random sub-streams of the global seed
STREAM_DATASET, STREAM_PIPELINE, STREAM_TRAIN, STREAM_SAMPLE, STREAM_EVAL, STREAM_INIT = range(1, 7)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def dataset_root(cfg: RunConfig) -> Path:
    """``data.root``; relative roots live under ``$COMPOSITOR_LAB_CACHE`` when it is set."""
    cache = os.environ.get(CACHE_ENV)
    raw = Path(cfg["data.root"])
    if cache and not raw.is_absolute():
        return Path(cache) / raw
    return cfg.path("data.root")


def parse_bbox(text: str) -> BBox:
    try:
        x0, y0, x1, y1 = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--bbox expects x0,y0,x1,y1 integers, got {text!r}") from None
    try:
        return BBox(x0, y0, x1, y1)
    except InvalidBBoxError as exc:
        raise UsageError(f"--bbox: {exc}") from None


def _canvas(cfg: RunConfig) -> tuple[int, int]:
    return (cfg["data.canvas"], cfg["data.canvas"])


# ---------------------------------------------------------------- commands


def cmd_gen_scenes(cfg: RunConfig, args) -> int:
    n = args.n if args.n is not None else cfg["data.n"]
    if n < 1:
        raise UsageError("--n must be >= 1")
    root = Path(args.out) if args.out else dataset_root(cfg)
    manifest = make_dataset(n, derive_seed(cfg.seed, STREAM_DATASET), cfg["data.split"], root,
                            canvas=_canvas(cfg), jobs=args.jobs)
    cfg.write_resolved(root)
    print(f"wrote {len(manifest.records)} scenes to {root}")
    return 0


def cmd_run_pipeline(cfg: RunConfig, args) -> int:
    from .datagen import Backends, IdentityInpainter, MeanFillInpainter, OracleInpainter, run_pipeline, synthetic_source

    root = dataset_root(cfg)
    samples = load_split(root, args.split, limit=args.limit or None)
    oracle = OracleInpainter()
    remover = oracle if args.remover == "oracle" else MeanFillInpainter()
    backends = Backends(remover, IdentityInpainter(), cfg["pipeline.augment_strength"],
                        derive_seed(cfg.seed, STREAM_PIPELINE))
    out = Path(args.out) if args.out else cfg.path("pipeline.root")
    manifest = run_pipeline(synthetic_source(samples, oracle), backends, out, split=args.split)
    cfg.write_resolved(out)
    kept = sum(d["kept"] for d in manifest.decisions)
    print(f"pipeline: {kept}/{len(manifest.decisions)} entities kept -> {out}")
    return 0


def _load_train_data(cfg: RunConfig, limit: int | None):
    from .training import TrainData

    root = dataset_root(cfg)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {root}; run gen-scenes first")
    return TrainData(load_split(root, "train", limit=limit))


def _stage_input(cfg: RunConfig, stage: str, out: Path, init: str | None):
    from .model import init_checkpoint

    if init:
        return load_checkpoint(init)
    if stage == "S1":
        return init_checkpoint(cfg.model_config(), derive_seed(cfg.seed, STREAM_INIT), cfg.betas())
    if stage == "S2":
        return load_checkpoint(out / "ckpt_S1.bin")
    if stage == "S3":
        path = out / "ckpt_merged.bin"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run `merge` after S1 and S2")
        return load_checkpoint(path)
    return load_checkpoint(out / f"ckpt_{STAGES[STAGES.index(stage) - 1]}.bin")


def cmd_train(cfg: RunConfig, args) -> int:
    from .model import init_checkpoint
    from .training import run_schedule, train_stage

    out = Path(args.out) if args.out else cfg.path("out_dir")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    data = _load_train_data(cfg, args.limit)
    plans = {p.stage_tag: p for p in cfg.plans()}
    seed = derive_seed(cfg.seed, STREAM_TRAIN)
    t0 = time.perf_counter()
    if args.stage == "all":
        init = init_checkpoint(cfg.model_config(), derive_seed(cfg.seed, STREAM_INIT), cfg.betas())
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
        run_schedule(list(plans.values()), init, data, seed=seed, alpha=cfg["train.s3.alpha"], out_dir=out,
                     log_every=cfg["train.log_every"])
    else:
        if args.stage not in plans:
            raise UsageError(f"stage {args.stage} is not enabled in train.stages")
        start = _stage_input(cfg, args.stage, out, args.init)
        ckpt = train_stage(plans[args.stage], start, data, seed=seed, out_dir=out, log_every=cfg["train.log_every"])
        save_checkpoint(ckpt, out / f"ckpt_{args.stage}.bin")
    log.info("training took %.1fs", time.perf_counter() - t0)
    print(f"checkpoints written to {out}")
    return 0


def cmd_merge(cfg: RunConfig, args) -> int:
    from .training import merge_checkpoints

    out = cfg.path("out_dir")
    alpha = cfg["train.s3.alpha"] if args.alpha is None else args.alpha
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0, 1], got {alpha}")
    a = load_checkpoint(args.a or out / "ckpt_S1.bin")
    b = load_checkpoint(args.b or out / "ckpt_S2.bin")
    target = Path(args.output) if args.output else out / "ckpt_merged.bin"
    save_checkpoint(merge_checkpoints(a, b, alpha), target)
    print(f"merged {alpha}*a + {1 - alpha}*b -> {target}")
    return 0


def _checkpoint_path(cfg: RunConfig, given: str | None) -> Path:
    if given:
        return Path(given)
    out = cfg.path("out_dir")
    for tag in reversed(STAGES[1:]):
        if (out / f"ckpt_{tag}.bin").exists():
            return out / f"ckpt_{tag}.bin"
    raise FileNotFoundError(f"no trained checkpoint in {out}")


def trajectory_strip(traj) -> np.ndarray:
    return np.concatenate([m.astype(np.uint8) * 255 for _, m in traj], axis=1)


def cmd_sample(cfg: RunConfig, args) -> int:
    from .sampler import SampleRequest, sample_batch, diverse_requests

    bbox = parse_bbox(args.bbox) if args.bbox else None
    n = args.n if args.n is not None else 1
    if n < 1:
        raise UsageError("--n must be >= 1")
    ckpt = load_checkpoint(_checkpoint_path(cfg, args.ckpt))
    samples = load_split(dataset_root(cfg), args.split)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} outside split of {len(samples)} scenes")
    scene = samples[args.index]
    steps = args.steps or cfg["sampler.steps"]
    seed = args.seed if args.seed is not None else derive_seed(cfg.seed, STREAM_SAMPLE, args.index)
    base = SampleRequest(scene.background, scene.object_image, bbox, steps, seed, record_trajectory=args.trajectory)
    reqs = [base] if n == 1 else diverse_requests(base, n)
    results = sample_batch(reqs, ckpt)
    out = Path(args.out) if args.out else cfg.path("out_dir") / "samples"
    out.mkdir(parents=True, exist_ok=True)
    for k, res in enumerate(results):
        rid = scene.id if n == 1 else f"{scene.id}_{k}"
        (out / f"{rid}.png").write_bytes(png_bytes(to_u8(res.image)))
        (out / f"{rid}.mask.png").write_bytes(png_bytes(res.predicted_mask.astype(np.uint8) * 255))
        if res.mask_trajectory:
            (out / f"{rid}.traj.png").write_bytes(png_bytes(trajectory_strip(res.mask_trajectory)))
        meta = {"id": rid, "scene": scene.id, "seed": res.seed, "steps": steps,
                "bbox": list(bbox.as_tuple()) if bbox else None, "stage": ckpt.stage_tag,
                "timings": res.timings}
        (out / f"{rid}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(results)} sample(s) to {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .evaluation import evaluate

    mode = args.mode
    ckpt = load_checkpoint(_checkpoint_path(cfg, args.ckpt))
    limit = args.limit if args.limit is not None else cfg["eval.limit"]
    samples = load_split(dataset_root(cfg), cfg["eval.split"], limit=limit or None)
    if not samples:
        raise ValueError(f"split {cfg['eval.split']!r} is empty")
    out = Path(args.out) if args.out else cfg.path("out_dir") / f"eval_{mode}"
    report = evaluate(samples, ckpt, mode=mode, n=cfg["sampler.n"], steps=cfg["sampler.steps"],
                      seed=derive_seed(cfg.seed, STREAM_EVAL), identity_mask=cfg["eval.identity_mask"],
                      early_step=cfg["eval.early_step"], out_dir=out, contact_sheet=args.sheet)
    cfg.write_resolved(out)
    row = report.table_row()
    print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compositor-lab", description="Generative object compositing at desk scale.")
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--jobs", type=int, default=1, help="cap on worker processes / torch threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-scenes", help="render a synthetic dataset")
    g.add_argument("--n", type=int)
    g.add_argument("--out")

    r = sub.add_parser("run-pipeline", help="run the data-generation pipeline over rendered scenes")
    r.add_argument("--split", default="train")
    r.add_argument("--limit", type=int, default=0)
    r.add_argument("--remover", choices=("oracle", "mean"), default="oracle")
    r.add_argument("--out")

    t = sub.add_parser("train", help="train one stage or the whole schedule")
    t.add_argument("--stage", required=True, choices=list(STAGES[1:]) + ["all"])
    t.add_argument("--init", help="starting checkpoint (default: previous stage in out_dir)")
    t.add_argument("--limit", type=int, help="use only the first N training scenes")
    t.add_argument("--out")

    m = sub.add_parser("merge", help="alpha*a + (1-alpha)*b")
    m.add_argument("--alpha", type=float)
    m.add_argument("--a")
    m.add_argument("--b")
    m.add_argument("--output")

    s = sub.add_parser("sample", help="composite one scene")
    s.add_argument("--ckpt")
    s.add_argument("--split", default="test")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--bbox", help="x0,y0,x1,y1 (half-open)")
    s.add_argument("--n", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--trajectory", action="store_true", help="also write the per-step mask strip")
    s.add_argument("--out")

    e = sub.add_parser("eval", help="placement evaluation")
    e.add_argument("--mode", required=True, choices=("empty", "bbox"))
    e.add_argument("--ckpt")
    e.add_argument("--limit", type=int)
    e.add_argument("--out")
    e.add_argument("--sheet", action="store_true", help="also write contact.png (ground truth + samples per scene)")
    return p


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "run-pipeline": cmd_run_pipeline,
    "train": cmd_train,
    "merge": cmd_merge,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.values["seed"] = args.seed
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(args.jobs)
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
