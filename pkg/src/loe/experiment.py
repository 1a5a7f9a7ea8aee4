"""Multi-seed experiments and the (alpha, alpha0) sensitivity grid."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .backbones import Backbone, make_backbone
from .config import BackboneSection, DatasetSection, ExperimentConfig, TrainerSection
from .errors import DataError, LoeError
from .metrics import auc, f1_top_k, top_k_threshold
from .trainer import test_scores, train

log = logging.getLogger(__name__)

# stream ids for derive_seed
DATA, TEST, MODEL, TRAIN = 0, 1, 2, 3


def derive_seed(seed: int, stream: int) -> int:
    """Independent 32-bit seed for one random stream of a run."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def make_datasets(ds: DatasetSection, seed: int):
    """Return (train, test) ContaminatedDatasets for one experiment seed."""
    if ds.kind == "toy":
        n_normal = ds.n_normal or 90
        train_set = D.gen_mixture(D.TOY_SPEC, n_normal, D.n_anomalies_for(ds.alpha0, n_normal),
                                  derive_seed(seed, DATA), provenance="toy")
        test = D.gen_mixture(D.TOY_SPEC, ds.test_normal or 900, ds.test_anomaly or 100,
                             derive_seed(seed, TEST), provenance="toy")
        return train_set, test
    if ds.kind == "synthetic-tabular":
        spec = D.two_cluster_spec(ds.dim, ds.offset, ds.shift, ds.normal_var, ds.anomaly_var)
        n_normal = ds.n_normal or 2000
        train_set = D.gen_tabular(spec, n_normal, ds.alpha0, derive_seed(seed, DATA))
        test_normal = ds.test_normal or n_normal // 2
        test_anomaly = ds.test_anomaly or max(1, D.n_anomalies_for(ds.alpha0 or 0.1, test_normal))
        test = D.gen_mixture(spec, test_normal, test_anomaly, derive_seed(seed, TEST))
        return train_set, test
    full = D.load_csv(ds.path, ds.label_column)
    train_set, test = D.split(full, ds.test_fraction, derive_seed(seed, DATA))
    if ds.contaminate:
        normals = train_set.features[train_set.labels == 0]
        pool = test.features[test.labels == 1]
        train_set = D.contaminate(normals, pool, ds.alpha0, derive_seed(seed, TEST))
    return train_set, test


def build_model(bb: BackboneSection, input_dim: int, seed: int) -> Backbone:
    hyper = bb.hyperparameters()
    if bb.kind == "dsvdd_rbf":
        hyper.setdefault("rbf_centers", D.TOY_SPEC.means if input_dim == 2 else None)
        if hyper["rbf_centers"] is None:
            raise DataError("dsvdd_rbf on non-2D data needs explicit rbf_centers")
    return make_backbone(bb.kind, input_dim, seed=seed, **hyper)


@dataclass
class SeedResult:
    seed: int
    auc: float | None = None
    f1: float | None = None
    n_test: int = 0
    threshold: float | None = None
    error: str | None = None


@dataclass
class MetricReport:
    seeds: list[int]
    per_seed: list[SeedResult]
    auc_mean: float | None = None
    auc_std: float | None = None
    f1_mean: float | None = None
    f1_std: float | None = None
    errors: list[str] = field(default_factory=list)

    @classmethod
    def aggregate(cls, per_seed: list[SeedResult]) -> "MetricReport":
        """Mean and population std (ddof=0) over the seeds that finished."""
        rep = cls([r.seed for r in per_seed], per_seed)
        for name in ("auc", "f1"):
            vals = [getattr(r, name) for r in per_seed if getattr(r, name) is not None]
            if vals:
                setattr(rep, f"{name}_mean", float(np.mean(vals)))
                setattr(rep, f"{name}_std", float(np.std(vals)))
        rep.errors = [f"seed {r.seed}: {r.error}" for r in per_seed if r.error]
        return rep

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, metrics=("auc", "f1")) -> dict:
    out = {"n_test": int(len(scores))}
    if "auc" in metrics:
        out["auc"] = auc(scores, labels)
    if "f1" in metrics:
        out["f1"] = f1_top_k(scores, labels)
        out["threshold"] = top_k_threshold(scores, int(np.count_nonzero(np.asarray(labels) == 1)))
    return out


def run_seed(ds: DatasetSection, bb: BackboneSection, tr: TrainerSection, seed: int,
             metrics=("auc", "f1")) -> SeedResult:
    train_set, test = make_datasets(ds, seed)
    model = build_model(bb, train_set.dim, derive_seed(seed, MODEL))
    trained, _ = train(model, train_set, tr.to_trainer_config(derive_seed(seed, TRAIN)))
    scores = test_scores(trained, test.features)
    return SeedResult(seed=seed, **evaluate_scores(scores, test.labels, metrics))


def run_experiment(ds: DatasetSection, bb: BackboneSection, tr: TrainerSection,
                   seeds: list[int], metrics=("auc", "f1")) -> MetricReport:
    """Train and score once per seed; a failing seed is recorded, not fatal."""
    results = []
    for seed in seeds:
        try:
            results.append(run_seed(ds, bb, tr, seed, metrics))
        except LoeError as exc:
            log.warning("seed %s failed: %s", seed, exc)
            results.append(SeedResult(seed=seed, error=str(exc)))
    return MetricReport.aggregate(results)


@dataclass
class SensitivityGrid:
    alphas: list[float]
    alpha0s: list[float]
    cells: list[list[MetricReport]]        # cells[row = alpha0][col = alpha]

    def matrix(self, metric: str = "auc") -> np.ndarray:
        return np.array([[getattr(c, f"{metric}_mean") if getattr(c, f"{metric}_mean") is not None
                          else math.nan for c in row] for row in self.cells])

    @property
    def ok(self) -> bool:
        return all(c.ok for row in self.cells for c in row)


def grid_cell_config(cfg: ExperimentConfig, alpha: float, alpha0: float):
    ds = cfg.dataset.model_copy(update={"alpha0": alpha0})
    tr = cfg.trainer.model_copy(update={"alpha": alpha})
    return ds, tr


def _run_cell(args):
    ds, bb, tr, seeds, metrics = args
    return run_experiment(ds, bb, tr, seeds, metrics)


def sensitivity_grid(cfg: ExperimentConfig, alphas=None, alpha0s=None, workers: int = 1,
                     done: dict | None = None, on_cell=None) -> SensitivityGrid:
    """One run_experiment per (alpha0, alpha) cell, all cells sharing the seed list.

    ``done`` maps (i, j) to an already computed MetricReport (resume);
    ``on_cell(i, j, report)`` is called as each new cell completes.
    """
    alphas = list(alphas if alphas is not None else cfg.grid.alphas)
    alpha0s = list(alpha0s if alpha0s is not None else cfg.grid.alpha0s)
    done = dict(done or {})
    todo = []
    for i, a0 in enumerate(alpha0s):
        for j, a in enumerate(alphas):
            if (i, j) not in done:
                ds, tr = grid_cell_config(cfg, a, a0)
                todo.append(((i, j), (ds, cfg.backbone, tr, cfg.eval.seeds, tuple(cfg.eval.metrics))))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (ij, _), rep in zip(todo, pool.map(_run_cell, [t[1] for t in todo])):
                done[ij] = rep
                if on_cell:
                    on_cell(*ij, rep)
    else:
        for ij, args in todo:
            done[ij] = _run_cell(args)
            if on_cell:
                on_cell(*ij, done[ij])
    cells = [[done[(i, j)] for j in range(len(alphas))] for i in range(len(alpha0s))]
    return SensitivityGrid(alphas, alpha0s, cells)


def report_from_dict(d: dict) -> MetricReport:
    per_seed = [SeedResult(**r) for r in d["per_seed"]]
    rep = MetricReport(d["seeds"], per_seed, d["auc_mean"], d["auc_std"], d["f1_mean"],
                       d["f1_std"], d.get("errors", []))
    return rep
