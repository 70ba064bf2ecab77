"""``vapaad`` command-line entry point.

Commands::

    vapaad train   --config run.ini [--seed N] [--data SRC] [--out DIR] [--loss-mode M]
                   [--stop-grad] [--desk-scale] [--steps N] [--resume CKPT] [--record-wall-time]
    vapaad predict --checkpoint CKPT --input seq.npy [--horizon N] [--out DIR]
    vapaad eval    --checkpoint CKPT [--data SRC] [--split-fraction F] [--seed N]
    vapaad export  --input file.npy [--sequence I] [--out DIR] [--format pgm|png]

Exit status is 0 on success, 1 when the run fails and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from .config import ConfigError, RunConfig, load_run_config
from .export import export_frames, export_strip
from .model import build, build_instructor, rollout
from .tensor import Tensor
from .training import Trainer, evaluate, format_record

log = logging.getLogger("vapaad")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRICS_LOG = "metrics.jsonl"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> data_mod.SequenceDataset:
    d = cfg.data
    raw = data_mod.fetch_dataset(d.source, d.cache_dir or None,
                                 synthetic_sequences=d.synthetic_sequences or d.n_sequences,
                                 seed=d.synthetic_seed)
    ds = data_mod.make_shifted_pairs(raw, d.n_sequences)
    if d.downscale > 1:
        ds = data_mod.downscale_dataset(ds, d.downscale)
    if ds.frame_size != tuple(cfg.model.frame_size):
        raise UsageError(f"data frames are {ds.frame_size} after downscale={d.downscale}, "
                         f"model expects {tuple(cfg.model.frame_size)}")
    return ds


def make_trainer(cfg: RunConfig, train: data_mod.SequenceDataset) -> Trainer:
    rng = np.random.default_rng(cfg.train.seed)
    model = build(cfg.model, rng)
    inst = build_instructor(rng, cfg.model.channels) if cfg.train.mode.adversarial else None
    return Trainer(model, cfg.train, train.x, train.y, inst)


def model_from_checkpoint(ck: ckpt_mod.Checkpoint):
    cfg = RunConfig.from_dict(ck.meta["config"])
    model = build(cfg.model, np.random.default_rng(0))
    ckpt_mod.load_model_arrays(ck, "model", model)
    return cfg, model


def _start_log(path: Path, keep_through: int | None) -> None:
    """Truncate ``path`` to the step records <= ``keep_through`` (all of them if None)."""
    lines = []
    if keep_through is not None and path.exists():
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("event") is None and rec.get("step", keep_through + 1) <= keep_through:
                lines.append(line)
    path.write_text("".join(line + "\n" for line in lines))


def _append(path: Path, rec: dict) -> None:
    with open(path, "a") as fh:
        fh.write(format_record(rec) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides: dict = {"train": {}, "model": {}, "data": {}, "output": {}}
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    if args.loss_mode is not None:
        overrides["train"]["loss_mode"] = args.loss_mode
    if args.steps is not None:
        overrides["train"]["steps"] = args.steps
    if args.stop_grad:
        overrides["model"]["stop_grad"] = True
    if args.data is not None:
        overrides["data"]["source"] = args.data
    if args.record_wall_time:
        overrides["output"]["record_wall_time"] = True
    cfg = load_run_config(args.config, desk_scale=args.desk_scale, overrides=overrides)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    train, val = data_mod.split(ds, cfg.data.test_fraction, cfg.data.split_seed)
    trainer = make_trainer(cfg, train)
    resumed_at = None
    if args.resume is not None:
        ck = ckpt_mod.load_checkpoint(args.resume)
        saved = RunConfig.from_dict(ck.meta["config"])
        if saved.model.to_dict() != cfg.model.to_dict():
            raise UsageError("checkpoint model configuration differs from the requested one")
        ckpt_mod.restore(trainer, ck)
        resumed_at = trainer.step
        log.info("resumed from %s at step %d", args.resume, resumed_at)

    (out / "config.ini").write_text(cfg.to_ini())
    config_dict = cfg.to_dict()
    metrics_path = out / METRICS_LOG
    every = cfg.output.checkpoint_every
    _start_log(metrics_path, resumed_at)

    def on_step(tr: Trainer) -> None:
        if every and tr.step % every == 0:
            ckpt_mod.save_checkpoint(out / f"ckpt_{tr.step:06d}.vpad", ckpt_mod.capture(tr, config_dict))

    def on_record(rec: dict) -> None:
        _append(metrics_path, rec)
        log.info("step %d loss %.6f bce %.6f", rec["step"], rec["loss"], rec["bce"])

    trainer.run(on_record=on_record, record_wall_time=cfg.output.record_wall_time, on_step=on_step)
    val_m = evaluate(trainer.model, val.x, val.y, cfg.train.batch_size)
    summary = {"event": "summary", "step": trainer.step, "train_sequences": len(train),
               "val_sequences": len(val)}
    summary.update({f"val_{k}": v for k, v in val_m.record().items()})
    _append(metrics_path, summary)
    ckpt_mod.save_checkpoint(out / "final.vpad", ckpt_mod.capture(trainer, config_dict))
    print(format_record(summary))
    return EXIT_OK


def _load_sequence(path: str, frame_size: tuple) -> np.ndarray:
    arr = data_mod.load_npy(path, mmap=False).array()
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise UsageError(f"input must be (T, H, W) or (T, 1, H, W), got {arr.shape}")
    x = arr.astype(np.float32) / np.float32(255.0) if arr.dtype == np.uint8 else arr.astype(np.float32)
    if tuple(x.shape[-2:]) != tuple(frame_size):
        factor = x.shape[-1] // frame_size[-1]
        if factor < 2 or x.shape[-1] != factor * frame_size[-1] or x.shape[-2] != factor * frame_size[-2]:
            raise UsageError(f"input frames {x.shape[-2:]} do not match the model's {tuple(frame_size)}")
        x = data_mod.downscale(x, factor)
    return x


def cmd_predict(args) -> int:
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    cfg, model = model_from_checkpoint(ck)
    seq = _load_sequence(args.input, cfg.model.frame_size)
    fmt = args.format or cfg.output.image_format
    pred = rollout(model, Tensor(seq), args.horizon).data
    out = Path(args.out)
    ctx_files = export_frames(seq, out, fmt, prefix="context")
    pred_files = export_frames(pred, out, fmt, prefix="pred", start=len(seq))
    export_strip(seq, pred, out / f"strip.{fmt}", fmt)
    print(json.dumps({"context": len(ctx_files), "predicted": len(pred_files), "out": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    cfg, model = model_from_checkpoint(ck)
    if args.data is not None:
        cfg.data.source = args.data
    fraction = cfg.data.test_fraction if args.split_fraction is None else args.split_fraction
    seed = cfg.data.split_seed if args.seed is None else args.seed
    ds = load_dataset(cfg)
    _, val = data_mod.split(ds, fraction, seed)
    m = evaluate(model, val.x, val.y, cfg.train.batch_size)
    rec = {"sequences": len(val), **m.record()}
    print(format_record(rec))
    print(f"{'metric':<10}{'value':>12}")
    for k in ("bce", "mse", "accuracy"):
        print(f"{k:<10}{rec[k]:>12.6f}")
    return EXIT_OK


def cmd_export(args) -> int:
    arr = data_mod.load_npy(args.input, mmap=True).array()
    if arr.ndim == 4 and arr.shape[1] != 1:
        # raw dataset layout (frames, sequences, H, W)
        arr = arr[:, args.sequence]
    elif args.sequence:
        raise UsageError("--sequence only applies to (frames, sequences, H, W) input")
    frames = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr
    files = export_frames(frames, args.out, args.format or "pgm")
    print(json.dumps({"files": len(files), "out": str(args.out)}))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vapaad", description="Next-frame video prediction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="INI run configuration")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset path, URL, 'synthetic' or 'auto'")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--loss-mode", choices=["reconstruction", "adversarial", "adversarial+reconstruction"])
    t.add_argument("--stop-grad", action="store_true", help="freeze the attention query/key path")
    t.add_argument("--desk-scale", action="store_true", help="small preset: 32x32 frames, 8 filters")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--record-wall-time", action="store_true",
                   help="add wall_ms to metric records (logs are then not reproducible)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="roll a trained model forward")
    pr.add_argument("--config", help="ignored; the checkpoint carries its configuration")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="NPY of context frames")
    pr.add_argument("--horizon", type=int, default=10)
    pr.add_argument("--out", default="predictions")
    pr.add_argument("--format", choices=["pgm", "png"])
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="validation metrics for a checkpoint")
    e.add_argument("--config", help="ignored; the checkpoint carries its configuration")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split-fraction", type=float)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write frames of an NPY file as images")
    x.add_argument("--config", help="unused")
    x.add_argument("--input", required=True)
    x.add_argument("--sequence", type=int, default=0)
    x.add_argument("--out", default="frames")
    x.add_argument("--format", choices=["pgm", "png"])
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"vapaad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # report and fail, never a traceback by default
        if args.verbose:
            log.exception("command failed")
        print(f"vapaad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
