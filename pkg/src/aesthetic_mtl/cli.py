"""``aesthetic-mtl`` command line: synth, train, eval, predict, verify.

Exit codes: 0 success, 1 verification failure, 2 usage/config/input error,
3 numeric abort. Each command writes only into its output directory, which is
``--out`` if given, else ``$AESTHETIC_MTL_OUTPUT_ROOT/<command>``, else
``runs/<command>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, plotting, verify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, config_from_dict, dump_config, load_config
from .data import (DIMENSIONS, NOISE_LEVELS, PROFILES, FeatureResolver, SampleRecord, SplitSpec, load_manifest, split,
                   synth_generate, write_manifest, write_synth_dataset)
from .errors import InvalidInputError, ManifestError, NumericFailure
from .metrics import evaluate, scores_by_dimension
from .preprocess import load_image
from .score_dist import mean_score
from .trainer import ResumeState, TrainingAborted, TrainLog, predict, predict_records, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "AESTHETIC_MTL_OUTPUT_ROOT"
TOOL = "aesthetic-mtl"

log = logging.getLogger(TOOL)


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _noise(text):
    if text in NOISE_LEVELS:
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"noise must be one of {list(NOISE_LEVELS)} or a number") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError("noise must be non-negative")
    return v


def out_dir(args) -> Path:
    if args.out is not None:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs") / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(out: Path, command: str, seed, config: dict, artifacts: dict, status="ok") -> Path:
    """``run.json``: tool/version, command, seed, config snapshot and artifact paths relative to ``out``."""
    rel = {k: Path(v).relative_to(out).as_posix() for k, v in sorted(artifacts.items()) if v is not None}
    missing = [p for p in rel.values() if not (out / p).exists()]
    if missing:
        raise RuntimeError(f"run manifest references missing artifacts: {missing}")
    doc = {"tool": TOOL, "version": __version__, "command": command, "status": status, "seed": seed,
           "config": config, "artifacts": rel}
    path = out / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    records = synth_generate(args.n, feature_dim=args.feature_dim, profile=args.profile, noise=args.noise,
                             seed=args.seed)
    out = out_dir(args)
    paths = write_synth_dataset(out, records)
    cfg = {"n": args.n, "feature_dim": args.feature_dim, "profile": args.profile, "noise": args.noise}
    write_run_manifest(out, "synth", args.seed, cfg, paths)
    print(f"wrote {len(records)} records to {paths['manifest']}")
    return EXIT_OK


_FLAG_KEYS = ("mode", "lr", "momentum", "epochs", "batch_size", "seed", "lr_halve_every", "emd_r", "preprocessing")


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    if args.config:
        cfg = config_from_dict(load_config(args.config).to_dict())
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None}
    if args.weights is not None:
        overrides["weights"] = [float(x) for x in args.weights.split(",")]
    if args.tasks is not None:
        overrides["tasks"] = args.tasks.split(",")
    return config_from_dict(overrides, cfg)


def _split_records(records, cfg):
    spec = SplitSpec(1.0 - cfg.val_frac - cfg.test_frac, cfg.val_frac, cfg.test_frac, seed=cfg.seed)
    return split(records, spec)


def _write_splits(path: Path, parts) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        for name, recs in zip(("train", "val", "test"), parts):
            for r in recs:
                w.writerow([r.id, name])
    return path


def _read_splits(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {row["id"]: row["split"] for row in csv.DictReader(fh)}


def _ckpt_meta(cfg, epoch, best_val, best_epoch):
    return {"config": cfg.to_dict(), "tasks": list(cfg.tasks), "mode": cfg.mode, "epoch": epoch,
            "best_val": best_val if np.isfinite(best_val) else None, "best_epoch": best_epoch}


def cmd_train(args) -> int:
    resume = None
    base = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        base = config_from_dict(ck.meta.get("config", {}))
    cfg = _train_config(args, base)
    records = load_manifest(args.data)
    if not records:
        raise InvalidInputError(f"manifest {args.data} has no records")
    resolver = FeatureResolver(Path(args.data).parent, cfg.preprocessing, cfg.feature_grid, seed=cfg.seed)
    tr_recs, va_recs, te_recs = _split_records(records, cfg)
    train_set, _ = resolver.batch(tr_recs, cfg.tasks)
    val_set = resolver.batch(va_recs, cfg.tasks)[0] if va_recs else None

    out = out_dir(args)
    if args.resume:
        rdir = Path(args.resume).parent
        best_path = rdir / "best.ckpt"
        best = load_checkpoint(best_path).params if best_path.is_file() else None
        prev = TrainLog.read(rdir, cfg.tasks) if (rdir / "train_log.csv").is_file() else None
        if prev is not None:
            prev.epochs = [r for r in prev.epochs if r["epoch"] <= ck.meta["epoch"]]
            prev.deltas = [r for r in prev.deltas if r["epoch"] <= ck.meta["epoch"]]
            prev.best_epoch = ck.meta.get("best_epoch", prev.best_epoch)
        bv = ck.meta.get("best_val")
        resume = ResumeState(ck.params, ck.extras.get("momentum", np.zeros(ck.params.size)), int(ck.meta["epoch"]),
                             best, float("inf") if bv is None else float(bv), prev)
        if resume.epoch >= cfg.epochs:
            raise UsageError(f"checkpoint is at epoch {resume.epoch}; pass --epochs > {resume.epoch} to continue")

    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    splits = _write_splits(out / "splits.csv", (tr_recs, va_recs, te_recs))

    def on_epoch(epoch, params, v, best, best_val, tlog):
        meta = _ckpt_meta(cfg, epoch, best_val, tlog.best_epoch)
        save_checkpoint(out / "last.ckpt", params, meta, {"momentum": v})
        save_checkpoint(out / "best.ckpt", best, meta)
        if args.verbose:
            r = tlog.epochs[-1]
            print(f"epoch {epoch:4d}  lr {r['lr']:.3g}  train {r['train_mean']:.5f}  val {r['val_mean']:.5f}")

    try:
        result = train(cfg, train_set, val_set, resume=resume, on_epoch=on_epoch)
    except TrainingAborted as exc:
        meta = _ckpt_meta(cfg, exc.epoch - 1, float("inf"), exc.log.best_epoch)
        meta["aborted"] = str(exc)
        arts = {"last_good": save_checkpoint(out / "last_good.ckpt", exc.last_good, meta), "splits": splits,
                "config": out / "config.toml", **exc.log.write(out)}
        write_run_manifest(out, "train", cfg.seed, cfg.to_dict(), arts, status="numeric-abort")
        print(f"error: numeric failure, training aborted ({exc}); last finite parameters in "
              f"{out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC

    arts = {"best_checkpoint": out / "best.ckpt", "last_checkpoint": out / "last.ckpt", "config": out / "config.toml",
            "splits": splits, **result.log.write(out)}
    figs = out / "figures"
    arts["fig_training_curves"] = plotting.plot_training_curves(result.log, figs / "training_curves.png")
    arts["fig_lr_schedule"] = plotting.plot_lr_schedule(result.log, figs / "lr_schedule.png")
    arts["fig_task_weights"] = plotting.plot_task_weights(result.log, figs / "task_weights.png")
    write_run_manifest(out, "train", cfg.seed, cfg.to_dict(), arts)
    last = result.log.epochs[-1]
    print(f"mode {cfg.mode}: {result.epoch} epochs, best epoch {result.log.best_epoch} "
          f"(val EMD {result.best_val:.5f}), final train EMD {last['train_mean']:.5f}")
    print(f"checkpoints and logs in {out}")
    return EXIT_OK


def _truth(records):
    return {r.id: r.targets for r in records}


def _select(records, args):
    if args.split is None or args.split == "all":
        return records
    if not args.splits:
        raise UsageError("--split needs --splits (the splits.csv written by train)")
    which = _read_splits(args.splits)
    return [r for r in records if which.get(r.id) == args.split]


def _model_predictions(ckpt_path, records, manifest_path):
    ck = load_checkpoint(ckpt_path)
    cfg = config_from_dict(ck.meta.get("config", {}))
    resolver = FeatureResolver(Path(manifest_path).parent, cfg.preprocessing, cfg.feature_grid, seed=cfg.seed)
    return predict_records(ck.params, records, resolver, cfg.tasks), tuple(cfg.tasks)


def cmd_eval(args) -> int:
    records = _select(load_manifest(args.manifest), args)
    if not records:
        raise InvalidInputError("no records to evaluate")
    if args.checkpoint:
        preds, dims = _model_predictions(args.checkpoint, records, args.manifest)
    else:
        preds, dims = _truth(load_manifest(args.predictions)), DIMENSIONS
    truth = _truth(records)
    report = evaluate(preds, truth, dims)
    out = out_dir(args)
    table = out / "eval.csv"
    table.write_text(report.to_table(), encoding="utf-8")
    ids = sorted(truth)
    fig = plotting.plot_eval_scatter(scores_by_dimension(truth, ids, dims), scores_by_dimension(preds, ids, dims),
                                     report, out / "figures" / "eval_scatter.png")
    write_run_manifest(out, "eval", None, {"manifest": str(args.manifest), "split": args.split or "all"},
                       {"table": table, "fig_eval_scatter": fig})
    print(report.pretty())
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ck.meta.get("config", {}))
    if tuple(cfg.tasks) != DIMENSIONS:
        raise UsageError("predict writes all four dimensions; the checkpoint was trained on "
                         f"{list(cfg.tasks)}")
    if args.manifest:
        records = load_manifest(args.manifest)
        preds = predict_records(ck.params, records, FeatureResolver(Path(args.manifest).parent, cfg.preprocessing,
                                                                   cfg.feature_grid, seed=cfg.seed))
        rows = [SampleRecord(r.id, preds[r.id], path=r.path) for r in records]
    else:
        images = [load_image(p) for p in args.images]
        preds = predict(ck.params, images, cfg.preprocessing, grid=cfg.feature_grid, seed=cfg.seed)
        rows = [SampleRecord(Path(p).stem, d, path=str(p)) for p, d in zip(args.images, preds)]
    out = out_dir(args)
    path = write_manifest(out / "predictions.csv", rows)
    write_run_manifest(out, "predict", cfg.seed, {"checkpoint": str(args.checkpoint)}, {"predictions": path})
    print(f"{'id':12s}" + "".join(f"{d:>14s}" for d in DIMENSIONS))
    for r in rows:
        print(f"{r.id:12s}" + "".join(f"{mean_score(r.targets[d]):14.3f}" for d in DIMENSIONS))
    return EXIT_OK


def cmd_verify(args) -> int:
    verify.hooks.corrupt_gradient = args.corrupt_gradient
    try:
        checks = verify.run(args.only, seed=args.seed)
    finally:
        verify.hooks.corrupt_gradient = False
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=TOOL, description="Multi-task aesthetic score-distribution prediction.")
    p.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_out(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)")
        sp.add_argument("-v", "--verbose", action="store_true", help="progress output")
        return sp

    s = with_out(sub.add_parser("synth", help="write a synthetic dataset"))
    s.add_argument("--n", type=_positive_int, default=1000, help="number of records (default 1000)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=_noise, default="low", help=f"{'/'.join(NOISE_LEVELS)} or a score s.d.")
    s.add_argument("--feature-dim", type=_positive_int, default=48)
    s.add_argument("--profile", choices=sorted(PROFILES), default="default")
    s.set_defaults(func=cmd_synth)

    t = with_out(sub.add_parser("train", help="train a model on a manifest"))
    t.add_argument("--data", required=True, help="manifest.csv")
    t.add_argument("--config", help="flat TOML config; flags below override it")
    t.add_argument("--resume", help="last.ckpt of an earlier run")
    t.add_argument("--mode", choices=("linear", "mgda-ub"))
    t.add_argument("--weights", help="comma-separated linear-mode task weights")
    t.add_argument("--tasks", help="comma-separated subset of " + ",".join(DIMENSIONS))
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    t.add_argument("--lr-halve-every", dest="lr_halve_every", type=_positive_int)
    t.add_argument("--emd-r", dest="emd_r", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--preprocessing", choices=("pad-rescale", "mp", "mp-gp"))
    t.set_defaults(func=cmd_train)

    e = with_out(sub.add_parser("eval", help="PCC/SCC/RMSE per dimension"))
    e.add_argument("--manifest", required=True, help="ground-truth manifest")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="predicted distributions in manifest format")
    e.add_argument("--splits", help="splits.csv from a train run")
    e.add_argument("--split", choices=("train", "val", "test", "all"))
    e.set_defaults(func=cmd_eval)

    pr = with_out(sub.add_parser("predict", help="predict score distributions"))
    pr.add_argument("--checkpoint", required=True)
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--images", nargs="+")
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="gradient checks, solver oracle, metric and preprocessing suites")
    v.add_argument("--only", action="append", choices=sorted(verify.SUITES), help="run only this suite (repeatable)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    v.add_argument("-v", "--verbose", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidInputError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
