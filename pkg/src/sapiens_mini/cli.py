"""Command line entry point: ``sapiens-mini <pretrain|finetune|probe|eval|knn|synth|pca>``.

Every command reads a run config (TOML file or preset name) plus ``--set``
overrides and writes into a run directory::

    config.resolved  log.jsonl  ckpt_XXXXXX.bin  reports/*.json

Failures print a one-line JSON error record on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import CheckpointMismatchError, ConfigError, DegenerateInputError, UsageError
from .heads import TASKS

SEED_ENV = "SAPIENS_MINI_SEED"


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.set:
        cfg = cfg.with_overrides(args.set)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            cfg = cfg.with_overrides([f"seed={int(seed)}"])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
    return cfg


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {str(p)!r} does not exist")
    return p


def _prepare_run_dir(args, cfg: RunConfig) -> Path:
    run = Path(args.run_dir)
    (run / "reports").mkdir(parents=True, exist_ok=True)
    (run / "config.resolved").write_text(cfg.to_toml())
    return run


def _write_report(run: Path, name: str, report) -> Path:
    path = run / "reports" / f"{name}.json"
    path.write_text(report.to_json() + "\n")
    return path


def _final_ckpt(run: Path, trainer) -> Path:
    return trainer.save(run / f"ckpt_{trainer.iteration:06d}.bin")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg):
    from .io import read_images
    from .training import Pretrainer

    images = read_images(_existing(args.data, "data directory")) if args.data else None
    if args.resume:
        _existing(args.resume, "checkpoint")
    run = _prepare_run_dir(args, cfg)
    trainer = Pretrainer(cfg, images)
    if args.resume:
        trainer.load(args.resume)
    remaining = cfg.schedule.total_iters - trainer.iteration
    trainer.run(max(remaining, 0), run / "log.jsonl", run, cfg.ckpt_every)
    ckpt = _final_ckpt(run, trainer)
    from .evaluation import MetricReport

    hist = trainer.history
    metrics = {"iters": trainer.iteration}
    if hist:
        metrics.update(first_total=hist[0]["total"], final_total=hist[-1]["total"],
                       final_mae=hist[-1]["mae"], final_cl=hist[-1]["cl"])
    _write_report(run, "pretrain", MetricReport("pretrain", metrics, len(trainer.images), cfg.fingerprint(),
                                                {"checkpoint": ckpt.name}))
    return {"run_dir": str(run), "checkpoint": str(ckpt), "iters": trainer.iteration}


def _task_samples(args, cfg, count: int, seed_offset: int):
    from .io import read_dataset
    from .synth import generate_dataset

    if getattr(args, "data", None):
        return read_dataset(_existing(args.data, "data directory"))
    m = cfg.model
    return generate_dataset(count, cfg.seed + seed_offset, (m.image_height, m.image_width))


def cmd_finetune(args, cfg):
    from .evaluation import MetricReport
    from .training import FineTuner, load_backbone

    task = args.task or cfg.finetune.task
    if args.backbone:
        _existing(args.backbone, "backbone checkpoint")
    if args.resume:
        _existing(args.resume, "checkpoint")
    samples = _task_samples(args, cfg, cfg.finetune.synthetic_count, 2)
    backbone = load_backbone(args.backbone, cfg) if args.backbone else None
    run = _prepare_run_dir(args, cfg)
    tuner = FineTuner(cfg, task, samples, backbone)
    if args.resume:
        tuner.load(args.resume)
    tuner.run(max(cfg.finetune.iters - tuner.iteration, 0), run / "log.jsonl", run, cfg.ckpt_every)
    ckpt = _final_ckpt(run, tuner)
    report = MetricReport(task, tuner.evaluate(), len(samples), cfg.fingerprint(),
                          {"split": "train", "checkpoint": ckpt.name, "iters": tuner.iteration})
    _write_report(run, f"finetune_{task}", report)
    return {"run_dir": str(run), "checkpoint": str(ckpt), "metrics": report.metrics}


def cmd_probe(args, cfg):
    from .backbone import Backbone
    from .evaluation import dense_probe
    from .training import load_backbone

    task = args.task or cfg.finetune.task
    if args.backbone:
        _existing(args.backbone, "backbone checkpoint")
    p = cfg.probe
    samples = _task_samples(args, cfg, p.train_count + p.test_count, 3)
    if len(samples) < 2:
        raise DegenerateInputError("probing needs at least two samples")
    n_train = min(p.train_count, len(samples) - 1) if not args.data else max(1, int(round(0.75 * len(samples))))
    train, test = samples[:n_train], samples[n_train:]
    run = _prepare_run_dir(args, cfg)
    if args.backbone:
        backbone = load_backbone(args.backbone, cfg)
    else:
        import torch

        torch.manual_seed(cfg.seed)
        backbone = Backbone(cfg.model)
    report = dense_probe(backbone, task, p, train, test, seed=cfg.seed, mean=cfg.views.mean, std=cfg.views.std,
                         fingerprint=cfg.fingerprint())
    if not args.transcript:
        report.extra.pop("rng_transcript", None)
    _write_report(run, f"probe_{task}", report)
    return {"run_dir": str(run), "metrics": report.metrics}


def _checkpoint_predictions(ckpt, cfg, task, samples):
    from .checkpoint import load_checkpoint
    from .training import FineTuner

    _, meta = load_checkpoint(ckpt)
    if meta.get("kind") != "finetune" or meta.get("task") != task:
        raise ConfigError(f"{ckpt} is not a fine-tune checkpoint for task {task!r}")
    tuner = FineTuner(cfg, task, samples)
    tuner.load(ckpt, strict_config=False)
    return tuner.predict(samples)


def cmd_eval(args, cfg):
    from .evaluation import MetricReport
    from .io import read_dataset
    from .tasks import evaluate_predictions, prediction_of

    gt = read_dataset(_existing(args.data, "data directory"))
    if args.pred:
        pred_samples = read_dataset(_existing(args.pred, "prediction directory"))
        if len(pred_samples) != len(gt):
            raise ConfigError(f"{len(pred_samples)} predictions for {len(gt)} ground-truth samples")
    elif args.checkpoint:
        _existing(args.checkpoint, "checkpoint")
        pred_samples = None
    else:
        raise ConfigError("eval needs --pred DIR or --checkpoint FILE")
    run = _prepare_run_dir(args, cfg)
    rows = []
    for task in args.tasks:
        if pred_samples is not None:
            preds = [prediction_of(s, task) for s in pred_samples]
            if any(p is None for p in preds):
                raise ConfigError(f"prediction directory lacks {task!r} outputs")
        else:
            preds = _checkpoint_predictions(args.checkpoint, cfg, task, gt)
        report = MetricReport(task, evaluate_predictions(task, preds, gt), len(gt), cfg.fingerprint())
        _write_report(run, task, report)
        rows += [{"task": task, "metric": k, "value": v} for k, v in sorted(report.metrics.items())]
    with open(run / "reports" / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["task", "metric", "value"])
        w.writeheader()
        w.writerows(rows)
    return {"run_dir": str(run), "tasks": list(args.tasks)}


def _embed(ckpt, cfg, images):
    import torch

    from .augmentation import resize
    from .training import images_tensor, load_backbone

    enc = load_backbone(ckpt, cfg)
    enc.eval()
    m = cfg.model
    batch = [resize(torch.as_tensor(im, dtype=torch.float32), (m.image_height, m.image_width)).numpy()
             for im in images]
    with torch.no_grad():
        out = enc.encode(images_tensor(batch, cfg.views.mean, cfg.views.std))
    return enc, out


def cmd_knn(args, cfg):
    from .evaluation import knn_retrieve
    from .io import read_images

    _existing(args.checkpoint, "checkpoint")
    images = read_images(_existing(args.data, "data directory"))
    if not 0 <= args.query < len(images):
        raise ConfigError(f"query index {args.query} outside [0, {len(images)})")
    run = _prepare_run_dir(args, cfg)
    _, out = _embed(args.checkpoint, cfg, images)
    cls = out.cls.double().numpy()
    top = knn_retrieve(cls[args.query], cls, min(args.k, len(images))).tolist()
    result = {"query": args.query, "neighbours": top}
    (run / "reports" / "knn.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_pca(args, cfg):
    from PIL import Image

    from .evaluation import pca_features
    from .io import read_dataset

    _existing(args.checkpoint, "checkpoint")
    samples = read_dataset(_existing(args.data, "data directory"))
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"sample index {args.index} outside [0, {len(samples)})")
    s = samples[args.index]
    run = _prepare_run_dir(args, cfg)
    _, out = _embed(args.checkpoint, cfg, [s.image])
    grid = out.patch_features
    gh, gw = grid.grid_h, grid.grid_w
    fg = s.fg if s.fg is not None else np.ones(s.image.shape[-2:], dtype=bool)
    H, W = fg.shape
    cells = fg[: H // gh * gh, : W // gw * gw].reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3)) >= 0.5
    rgb = pca_features(grid.tokens[0].double().numpy().reshape(gh, gw, -1), cells)
    img = Image.fromarray((rgb * 255).round().astype(np.uint8), "RGB").resize((W, H), Image.NEAREST)
    out_path = Path(args.out) if args.out else run / "reports" / f"pca_{args.index:06d}.png"
    img.save(out_path)
    return {"image": str(out_path)}


def cmd_synth(args, cfg):
    from .io import write_dataset
    from .synth import generate_dataset

    if args.count < 1:
        raise ConfigError("--count must be positive")
    size = tuple(args.size) if args.size else (cfg.model.image_height, cfg.model.image_width)
    samples = generate_dataset(args.count, args.seed, size)
    write_dataset(args.out, samples, {"seed": args.seed})
    return {"out": str(args.out), "count": args.count}


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "probe": cmd_probe, "eval": cmd_eval,
            "knn": cmd_knn, "synth": cmd_synth, "pca": cmd_pca}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sapiens-mini", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="tiny", help="TOML run config or preset name (tiny, small, full-1b)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--run-dir", default=f"runs/{name}", help="output directory")
        return p

    p = add("pretrain", "joint masked-reconstruction + self-distillation pretraining")
    p.add_argument("--data", help="dataset or image directory (default: synthetic scenes)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("finetune", "train backbone + one task head")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data", help="dataset directory (default: synthetic scenes)")
    p.add_argument("--backbone", help="pretrain checkpoint to initialize the backbone")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("probe", "train a light decoder on a frozen backbone")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data", help="dataset directory, split 3:1 into train/test (default: synthetic)")
    p.add_argument("--backbone", help="checkpoint holding the backbone (default: random init)")
    p.add_argument("--transcript", action="store_true", help="keep the RNG transcript in the report")

    p = add("eval", "score predictions against a dataset with ground truth")
    p.add_argument("--data", required=True, help="ground-truth dataset directory")
    p.add_argument("--pred", help="dataset directory holding predictions")
    p.add_argument("--checkpoint", help="fine-tune checkpoint to predict with")
    p.add_argument("--tasks", nargs="+", default=list(TASKS), choices=TASKS)

    p = add("knn", "nearest neighbours by [CLS] embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query", type=int, default=0)
    p.add_argument("-k", type=int, default=5)

    p = add("synth", "write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))

    p = add("pca", "PCA visualization of patch features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", help="output PNG (default: reports/pca_NNNNNN.png)")
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (CheckpointMismatchError, DegenerateInputError, UsageError) as exc:
        return _fail("input", exc, 3)
    except Exception as exc:  # noqa: BLE001 - surface anything else as a record too
        return _fail("internal", exc, 1)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
