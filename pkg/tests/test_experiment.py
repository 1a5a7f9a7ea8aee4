import functools
import math

import numpy as np
import pytest

from loe.config import (BackboneSection, DatasetSection, ExperimentConfig, TrainerSection,
                        load_config, parse_config, with_overrides)
from loe.errors import ConfigurationError, DataError
from loe.backbones import batch_dual_losses
from loe.experiment import (MODEL, TRAIN, MetricReport, SeedResult, build_model, derive_seed,
                            make_datasets, report_from_dict, run_experiment, sensitivity_grid)
from loe.trainer import test_scores, train, training_scores

FAST = dict(epochs=8, batch_size=25)


def toy_cfg(**trainer):
    return parse_config({"dataset": {"kind": "toy", "test_normal": 180, "test_anomaly": 20},
                         "backbone": {"kind": "dsvdd_rbf"},
                         "trainer": {**FAST, **trainer},
                         "eval": {"seeds": [0, 1, 2]}})


def test_seed_streams_are_distinct_and_stable():
    seeds = {derive_seed(0, s) for s in range(4)}
    assert len(seeds) == 4
    assert derive_seed(5, 2) == derive_seed(5, 2)


def test_toy_datasets_shape():
    train, test = make_datasets(DatasetSection(kind="toy"), 0)
    assert train.n == 100 and int(train.labels.sum()) == 10
    assert test.n == 1000 and int(test.labels.sum()) == 100


def test_tabular_datasets_shape():
    train, test = make_datasets(DatasetSection(kind="synthetic-tabular", n_normal=200), 0)
    assert train.dim == 20 and int(train.labels.sum()) == 22
    assert test.n == 100 + 11


def test_csv_dataset_with_contamination(tmp_path):
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(100, 3)), rng.normal(4, 1, size=(30, 3))])
    y = np.r_[np.zeros(100), np.ones(30)].astype(int)
    f = tmp_path / "d.csv"
    f.write_text("a,b,c,label\n" + "\n".join(
        ",".join(map(repr, [*r, int(l)])) for r, l in zip(X.tolist(), y)) + "\n")
    ds = DatasetSection(kind="csv", path=str(f), label_column="label", contaminate=True,
                        alpha0=0.1, test_fraction=0.2)
    train, test = make_datasets(ds, 1)
    assert train.n == 80 + 9 and int(train.labels.sum()) == 9
    assert test.n == 26 and int(test.labels.sum()) == 6


def test_dsvdd_needs_centers_off_toy():
    with pytest.raises(DataError):
        build_model(BackboneSection(kind="dsvdd_rbf"), 5, 0)


def test_run_experiment_report():
    cfg = toy_cfg(strategy="loe_hard")
    rep = run_experiment(cfg.dataset, cfg.backbone, cfg.trainer, [0, 1, 2, 3, 4])
    assert rep.ok and len(rep.per_seed) == 5
    aucs = [r.auc for r in rep.per_seed]
    assert all(math.isfinite(a) and 0 <= a <= 1 for a in aucs)
    assert abs(rep.auc_mean - np.mean(aucs)) <= 1e-12
    assert abs(rep.auc_std - np.std(aucs)) <= 1e-12
    f1s = [r.f1 for r in rep.per_seed]
    assert abs(rep.f1_mean - np.mean(f1s)) <= 1e-12
    again = run_experiment(cfg.dataset, cfg.backbone, cfg.trainer, [0, 1, 2, 3, 4])
    assert again.to_dict() == rep.to_dict()
    assert report_from_dict(rep.to_dict()).to_dict() == rep.to_dict()


def test_failing_seed_does_not_abort_siblings(monkeypatch):
    import loe.experiment as E

    real = E.run_seed

    def flaky(ds, bb, tr, seed, metrics=("auc", "f1")):
        if seed == 1:
            raise E.LoeError("boom")
        return real(ds, bb, tr, seed, metrics)

    monkeypatch.setattr(E, "run_seed", flaky)
    cfg = toy_cfg()
    rep = E.run_experiment(cfg.dataset, cfg.backbone, cfg.trainer, [0, 1, 2])
    assert not rep.ok and rep.errors == ["seed 1: boom"]
    assert rep.per_seed[0].auc is not None and rep.per_seed[2].auc is not None
    assert rep.auc_mean == pytest.approx(np.mean([rep.per_seed[0].auc, rep.per_seed[2].auc]))


def test_aggregate_population_std():
    rep = MetricReport.aggregate([SeedResult(0, auc=0.5, f1=0.0), SeedResult(1, auc=1.0, f1=1.0)])
    assert rep.auc_mean == 0.75 and rep.auc_std == 0.25


def test_one_by_one_grid_equals_run_experiment():
    cfg = with_overrides(toy_cfg(), {"grid.alphas": [0.1], "grid.alpha0s": [0.1]})
    grid = sensitivity_grid(cfg)
    single = run_experiment(cfg.dataset, cfg.backbone, cfg.trainer, cfg.eval.seeds)
    assert grid.cells[0][0].to_dict() == single.to_dict()
    assert grid.matrix().shape == (1, 1)


def test_zero_alpha_cell_equals_blind():
    cfg = with_overrides(toy_cfg(strategy="loe_hard"),
                         {"grid.alphas": [0.0, 0.1], "grid.alpha0s": [0.1]})
    grid = sensitivity_grid(cfg)
    blind = run_experiment(cfg.dataset, cfg.backbone,
                           cfg.trainer.model_copy(update={"strategy": "blind"}), cfg.eval.seeds)
    assert grid.cells[0][0].to_dict() == blind.to_dict()


def test_grid_cell_count_and_resume_hook():
    cfg = with_overrides(toy_cfg(), {"grid.alphas": [0.05, 0.1, 0.15],
                                     "grid.alpha0s": [0.05, 0.1, 0.15],
                                     "eval.seeds": [0], "trainer.epochs": 3})
    seen = []
    grid = sensitivity_grid(cfg, on_cell=lambda i, j, r: seen.append((i, j)))
    assert len(seen) == 9 and grid.matrix().shape == (3, 3) and grid.ok
    again = sensitivity_grid(cfg, done={(i, j): grid.cells[i][j] for i in range(3) for j in range(3)},
                             on_cell=lambda *a: pytest.fail("cell recomputed"))
    assert np.array_equal(again.matrix(), grid.matrix())


def test_gtruth_beats_blind_on_toy():
    cfg = parse_config({"dataset": {"kind": "toy"}, "trainer": {"epochs": 200}})
    seeds = [0, 1, 2, 3, 4]
    g = run_experiment(cfg.dataset, cfg.backbone,
                       cfg.trainer.model_copy(update={"strategy": "gtruth"}), seeds)
    b = run_experiment(cfg.dataset, cfg.backbone,
                       cfg.trainer.model_copy(update={"strategy": "blind"}), seeds)
    assert g.auc_mean >= b.auc_mean


def test_config_is_strict(tmp_path):
    with pytest.raises(ConfigurationError):
        parse_config({"trainer": {"alpha": 0.1, "learning_rate": 0.1}})
    with pytest.raises(ConfigurationError):
        parse_config({"version": 2})
    with pytest.raises(ConfigurationError):
        parse_config({"backbone": {"kind": "ntl", "rbf_centers": [[0, 0]]}})
    with pytest.raises(ConfigurationError):
        parse_config({"trainer": {"epochs": 2, "warmup_epochs": 2}})
    with pytest.raises(ConfigurationError):
        with_overrides(ExperimentConfig(), {"trainer.nope": 1})
    with pytest.raises(ConfigurationError):
        with_overrides(ExperimentConfig(), {"nosection.alpha": 1})
    f = tmp_path / "c.json"
    f.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(f)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")


def test_config_echo_round_trips(tmp_path):
    cfg = with_overrides(ExperimentConfig(), {"trainer.alpha": 0.2, "grid.alphas": [0.1]})
    f = tmp_path / "echo.json"
    f.write_text(cfg.echo())
    assert load_config(f) == cfg
    assert TrainerSection().to_trainer_config(3).seed == 3


@functools.lru_cache(maxsize=None)
def trained_toy(seed):
    """LOE_H on the toy set with the reference schedule (batch 25, lr 0.01, 200 epochs)."""
    cfg = parse_config({"dataset": {"kind": "toy"}, "backbone": {"kind": "dsvdd_rbf"},
                        "trainer": {"strategy": "loe_hard", "epochs": 200}})
    train_set, test = make_datasets(cfg.dataset, seed)
    model = build_model(cfg.backbone, 2, derive_seed(seed, MODEL))
    model, _ = train(model, train_set, cfg.trainer.to_trainer_config(derive_seed(seed, TRAIN)))
    return model, train_set, test


@pytest.mark.slow
def test_toy_anomalies_score_higher_on_average():
    wins = 0
    for seed in range(5):
        model, _, test = trained_toy(seed)
        s = test_scores(model, test.features)
        wins += s[test.labels == 1].mean() > s[test.labels == 0].mean()
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="measured top-decile anomaly counts 6, 10, 4, 2, 6 of 10: "
                   "only one seed fills the decile with anomalies")
def test_toy_anomalies_fill_top_decile_of_training_scores():
    full = 0
    for seed in range(5):
        model, train_set, _ = trained_toy(seed)
        ln, la = batch_dual_losses(model, train_set.features)
        top = np.argsort(-training_scores(ln, la), kind="stable")[:train_set.n // 10]
        full += bool(np.all(train_set.labels[top] == 1))
    assert full >= 4
