"""Command-line interface: ``loe {gen,train,eval,contour,grid}``.

Exit codes:
  0  success
  2  configuration error (bad flags, invalid or unknown config keys)
  3  data error (missing/unparsable files, undefined metrics, shape mismatch)
  4  training divergence (or, for ``grid``, any failed cell)
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .backbones import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, with_overrides
from .errors import ConfigurationError, DataError, LoeError, TrainingDivergence
from .experiment import (MODEL, TRAIN, build_model, derive_seed, evaluate_scores,
                         make_datasets, report_from_dict, sensitivity_grid)
from .trainer import test_scores, train, write_history_csv

log = logging.getLogger("loe")

EPILOG = """exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence (grid: any failed cell)"""


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def _parse_set(items) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    overrides = _parse_set(getattr(args, "set", None))
    for flag, key in (("strategy", "trainer.strategy"), ("alpha", "trainer.alpha"),
                      ("epochs", "trainer.epochs"), ("workers", "grid.workers")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return with_overrides(cfg, overrides) if overrides else cfg


def _load_labelled_csv(path, label_column="label") -> D.ContaminatedDataset:
    if not Path(path).is_file():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    return D.load_csv(path, label_column if label_column in header else None)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.eval.seeds[0]


# ----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = _outdir(args.output)
    if args.toy:
        ds = D.gen_toy(args.seed)
    elif args.csv:
        src = _load_labelled_csv(args.csv, args.label_column)
        if args.contaminate is None:
            raise ConfigurationError("--csv needs --contaminate ALPHA0")
        if src.labels is None:
            raise DataError(f"{args.csv}: label column {args.label_column!r} is required "
                            "to separate normals from the anomaly pool")
        ds = D.contaminate(src.features[src.labels == 0], src.features[src.labels == 1],
                           args.contaminate, args.seed)
        ds.feature_names = src.feature_names
        ds.seed = args.seed
    else:
        cfg = _config(args)
        ds, _ = make_datasets(cfg.dataset, args.seed)
        ds.seed = args.seed
    D.save_csv(ds, out / "data.csv")
    D.save_manifest(ds, out / "manifest.json")
    log.info("wrote %d samples to %s", ds.n, out / "data.csv")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    if args.data:
        train_set = _load_labelled_csv(args.data)
    else:
        train_set, _ = make_datasets(cfg.dataset, seed)
    out = _outdir(args.output or cfg.output.directory)
    (out / "config.json").write_text(cfg.echo())
    model = build_model(cfg.backbone, train_set.dim, derive_seed(seed, MODEL))
    tcfg = cfg.trainer.to_trainer_config(derive_seed(seed, TRAIN))
    try:
        trained, history = train(model, train_set, tcfg)
    except TrainingDivergence as exc:
        if exc.history is not None:
            write_history_csv(exc.history, out / "history.csv", cfg.output.record_time)
        raise
    save_checkpoint(trained, out / "checkpoint.json")
    write_history_csv(history, out / "history.csv", cfg.output.record_time)
    _write_json(out / "manifest.json", {"command": "train", "seed": seed,
                                         "n_train": train_set.n, "dim": train_set.dim})
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    if args.data:
        test = _load_labelled_csv(args.data)
    else:
        _, test = make_datasets(cfg.dataset, seed)
    if test.dim != model.input_dim:
        raise DataError(f"checkpoint expects {model.input_dim} features but the evaluation "
                        f"data has {test.dim}")
    out = _outdir(args.output or cfg.output.directory)
    scores = test_scores(model, test.features)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "score"] + (["label"] if test.labels is not None else []))
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s))] + ([int(test.labels[i])] if test.labels is not None else []))
    metrics = evaluate_scores(scores, test.labels, tuple(cfg.eval.metrics))
    report = {"seed": seed, "checkpoint": str(args.checkpoint), **metrics}
    _write_json(out / "report.json", report)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = sorted(metrics)
        w.writerow(["seed", *keys])
        w.writerow([seed, *(repr(metrics[k]) if isinstance(metrics[k], float) else metrics[k]
                            for k in keys)])
    (out / "config.json").write_text(cfg.echo())
    return 0


CONTOUR_QUANTILE = 0.9


def contour_level(train_scores, q: float = CONTOUR_QUANTILE) -> float:
    """Quantile with the midpoint convention between order statistics.

    For 100 scores and q = 0.9 this is (s_(90) + s_(91)) / 2 (1-based,
    ascending), numpy's ``averaged_inverted_cdf``.
    """
    return float(np.quantile(np.asarray(train_scores, dtype=np.float64), q,
                             method="averaged_inverted_cdf"))


def contour_lattice(xlim, ylim, resolution):
    nx, ny = resolution
    xs = np.linspace(xlim[0], xlim[1], nx)
    ys = np.linspace(ylim[0], ylim[1], ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def cmd_contour(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    if model.input_dim != 2:
        raise DataError(f"contour needs a 2D model, checkpoint has {model.input_dim} inputs")
    out = _outdir(args.output)
    pts = contour_lattice(args.xlim, args.ylim, args.resolution)
    scores = test_scores(model, pts)
    with open(out / "contour.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "score"])
        for (x, y), s in zip(pts, scores):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])
    meta = {"xlim": list(args.xlim), "ylim": list(args.ylim), "resolution": list(args.resolution)}
    if args.data:
        train_set = _load_labelled_csv(args.data)
        if train_set.dim != 2:
            raise DataError("contour training data must be 2D")
        meta["level_quantile"] = CONTOUR_QUANTILE
        meta["level"] = contour_level(test_scores(model, train_set.features))
    _write_json(out / "contour.json", meta)
    return 0


def _config_hash(cfg: ExperimentConfig) -> str:
    # output settings do not influence results
    body = cfg.model_dump(mode="json")
    body.pop("output", None)
    if body.get("grid"):
        body["grid"].pop("workers", None)
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def cmd_grid(args) -> int:
    cfg = _config(args)
    if cfg.grid is None:
        raise ConfigurationError("config has no 'grid' section (alphas, alpha0s)")
    out = _outdir(args.output or cfg.output.directory)
    cells_dir = _outdir(out / "cells")
    (out / "config.json").write_text(cfg.echo())
    digest = _config_hash(cfg)
    manifest_path = out / "grid_manifest.json"

    done = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_sha256") == digest:
            for i, j in manifest.get("completed", []):
                cell = cells_dir / f"cell_{i}_{j}.json"
                if cell.exists():
                    done[(i, j)] = report_from_dict(json.loads(cell.read_text())["report"])
        else:
            log.warning("config changed since the last run; recomputing every cell")
    skipped = len(done)

    def save_manifest():
        _write_json(manifest_path, {"config_sha256": digest,
                                    "completed": sorted([list(k) for k in done])})

    def on_cell(i, j, rep):
        _write_json(cells_dir / f"cell_{i}_{j}.json",
                    {"alpha": cfg.grid.alphas[j], "alpha0": cfg.grid.alpha0s[i],
                     "report": rep.to_dict()})
        done[(i, j)] = rep
        save_manifest()
        log.info("cell alpha0=%s alpha=%s: auc=%s", cfg.grid.alpha0s[i], cfg.grid.alphas[j],
                 rep.auc_mean)

    grid = sensitivity_grid(cfg, workers=cfg.grid.workers, done=done, on_cell=on_cell)
    save_manifest()
    if skipped:
        log.info("resumed: %d cells reused from %s", skipped, manifest_path)

    for metric in cfg.eval.metrics:
        name = "grid.csv" if metric == "auc" else f"grid_{metric}.csv"
        mat = grid.matrix(metric)
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha0\\alpha", *[repr(a) for a in grid.alphas]])
            for a0, row in zip(grid.alpha0s, mat):
                w.writerow([repr(a0), *["" if np.isnan(v) else repr(float(v)) for v in row]])
    with open(out / "grid_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha0", "alpha", "seed", "auc", "f1", "error"])
        for a0, row in zip(grid.alpha0s, grid.cells):
            for a, rep in zip(grid.alphas, row):
                for r in rep.per_seed:
                    w.writerow([repr(a0), repr(a), r.seed,
                                "" if r.auc is None else repr(r.auc),
                                "" if r.f1 is None else repr(r.f1), r.error or ""])
    return 0 if grid.ok else TrainingDivergence.exit_code


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loe", description="Latent Outlier Exposure experiments",
                                epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. trainer.alpha=0.05 (repeatable)")

    g = sub.add_parser("gen", help="generate or contaminate a dataset", epilog=EPILOG)
    src = g.add_mutually_exclusive_group()
    src.add_argument("--toy", action="store_true", help="2D toy set (90 normals, 10 anomalies)")
    src.add_argument("--csv", help="labelled CSV: label 0 rows are normals, label 1 the pool")
    g.add_argument("--label-column", default="label")
    g.add_argument("--contaminate", type=float, metavar="ALPHA0")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model", epilog=EPILOG)
    common(t)
    t.add_argument("--data", help="training CSV (default: generate from the config)")
    t.add_argument("--strategy")
    t.add_argument("--alpha", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a test set with a checkpoint", epilog=EPILOG)
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="test CSV (default: held-out set from the config)")
    e.add_argument("--seed", type=int)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("contour", help="score a 2D lattice", epilog=EPILOG)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", help="training CSV; adds the 90%% score quantile as the level")
    c.add_argument("--xlim", type=float, nargs=2, default=[-2.0, 2.5])
    c.add_argument("--ylim", type=float, nargs=2, default=[-1.0, 3.5])
    c.add_argument("--resolution", type=int, nargs=2, default=[100, 100])
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_contour)

    s = sub.add_parser("grid", help="alpha x alpha0 sensitivity grid", epilog=EPILOG)
    common(s, config_required=True)
    s.add_argument("--workers", type=int)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LoeError as exc:
        print(f"loe {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
