"""Datasets with hidden anomaly labels.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``; Gaussian
draws use the generator's ziggurat ``standard_normal``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError

NORMAL, ANOMALY = "normal", "anomaly"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class ContaminatedDataset:
    features: np.ndarray
    labels: np.ndarray | None            # 1 = anomaly; None if unknown
    alpha0: float | None = None
    provenance: str = "synthetic-tabular"
    seed: int | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be an (N, D) matrix")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DataError("labels must have one entry per sample")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise DataError("labels must be 0 or 1")
            if self.alpha0 is None and self.labels.size:
                self.alpha0 = float(self.labels.mean())

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "ContaminatedDataset":
        labels = None if self.labels is None else self.labels[idx]
        alpha0 = float(labels.mean()) if labels is not None and labels.size else self.alpha0
        return ContaminatedDataset(self.features[idx], labels, alpha0, self.provenance,
                                   self.seed, self.feature_names)

    def manifest(self) -> dict:
        return {"provenance": self.provenance, "N": self.n, "D": self.dim,
                "alpha0": self.alpha0, "seed": self.seed}


@dataclass
class GaussianMixtureSpec:
    """Isotropic Gaussian components, each tagged as normal or anomalous."""

    means: list
    variances: list[float]
    weights: list[float]
    roles: list[str]

    def __post_init__(self):
        n = len(self.means)
        if not (len(self.variances) == len(self.weights) == len(self.roles) == n) or n == 0:
            raise ConfigurationError("mixture spec fields must have equal, non-zero lengths")
        if any(w <= 0 for w in self.weights) or any(v <= 0 for v in self.variances):
            raise ConfigurationError("mixture weights and variances must be positive")
        if any(r not in (NORMAL, ANOMALY) for r in self.roles):
            raise ConfigurationError("roles must be 'normal' or 'anomaly'")
        dims = {len(m) for m in self.means}
        if len(dims) != 1:
            raise ConfigurationError("all component means must share a dimension")

    @property
    def dim(self) -> int:
        return len(self.means[0])

    def sample(self, role: str, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = [i for i, r in enumerate(self.roles) if r == role]
        if not comps:
            raise ConfigurationError(f"mixture has no {role} component")
        w = np.array([self.weights[i] for i in comps], dtype=np.float64)
        choice = rng.choice(len(comps), size=n, p=w / w.sum())
        means = np.array([self.means[comps[c]] for c in choice], dtype=np.float64).reshape(n, self.dim)
        std = np.sqrt([self.variances[comps[c]] for c in choice]).reshape(n, 1)
        return means + std * rng.standard_normal((n, self.dim))


# anomaly density is the two-component sum with equal weights normalising to one
TOY_SPEC = GaussianMixtureSpec(
    means=[[1.0, 1.0], [-0.25, 2.5], [-1.0, 0.5]],
    variances=[0.07, 0.03, 0.03],
    weights=[1.0, 0.5, 0.5],
    roles=[NORMAL, ANOMALY, ANOMALY],
)


def n_anomalies_for(alpha0: float, n_normal: int) -> int:
    """k with k / (k + n_normal) = alpha0, rounded half-up."""
    if not 0.0 <= alpha0 < 1.0:
        raise ConfigurationError("alpha0 must lie in [0, 1)")
    return int(math.floor(alpha0 * n_normal / (1.0 - alpha0) + 0.5))


def _assemble(normals, anomalies, rng, provenance, seed, alpha0=None, return_perm=False):
    X = np.concatenate([normals, anomalies], axis=0)
    y = np.concatenate([np.zeros(len(normals), np.int64), np.ones(len(anomalies), np.int64)])
    perm = rng.permutation(len(X))
    if alpha0 is None:
        alpha0 = float(y.mean()) if y.size else 0.0
    out = ContaminatedDataset(X[perm], y[perm], alpha0, provenance, seed)
    return (out, perm) if return_perm else out


def gen_mixture(spec: GaussianMixtureSpec, n_normal: int, n_anomaly: int, seed: int,
                provenance: str = "synthetic-tabular") -> ContaminatedDataset:
    rng = make_rng(seed)
    normals = spec.sample(NORMAL, n_normal, rng)
    anomalies = spec.sample(ANOMALY, n_anomaly, rng) if n_anomaly else np.zeros((0, spec.dim))
    return _assemble(normals, anomalies, rng, provenance, seed)


def gen_toy(seed: int, n_normal: int = 90, n_anomaly: int = 10) -> ContaminatedDataset:
    """The 2D three-component toy set: 90 normals around [1, 1], 10 anomalies."""
    return gen_mixture(TOY_SPEC, n_normal, n_anomaly, seed, provenance="toy")


def two_cluster_spec(dim: int = 20, offset: float = 2.0, shift: float = 2.0,
                     normal_var: float = 1.0, anomaly_var: float = 1.0) -> GaussianMixtureSpec:
    """Normals around ``offset * ones``; two anomaly clusters beside them.

    Cluster A adds ``+shift`` to the first half of the coordinates, cluster B
    adds ``-shift`` to the second half.
    """
    half = dim // 2
    center = np.full(dim, offset)
    a = center.copy()
    b = center.copy()
    a[:half] += shift
    b[half:] -= shift
    return GaussianMixtureSpec(
        means=[center.tolist(), a.tolist(), b.tolist()],
        variances=[normal_var, anomaly_var, anomaly_var],
        weights=[1.0, 0.5, 0.5],
        roles=[NORMAL, ANOMALY, ANOMALY],
    )


def gen_tabular(spec: GaussianMixtureSpec, n_normal: int, alpha0: float, seed: int):
    return gen_mixture(spec, n_normal, n_anomalies_for(alpha0, n_normal), seed)


def contaminate(train_normals, test_anomalies, alpha0: float, seed: int,
                with_sources: bool = False):
    """Inject noisy copies of test anomalies into a clean training set.

    ``k = round(alpha0 * n / (1 - alpha0))`` anomalies are drawn from the pool
    (without replacement when the pool is large enough, otherwise with
    replacement) and perturbed with zero-mean Gaussian noise whose per-feature
    variance equals the empirical (ddof=0) variance of the pool.

    With ``with_sources`` the pool row behind every output row is returned
    too (``-1`` for normals), aligned with the shuffled output.
    """
    normals = np.array(train_normals, dtype=np.float64)
    pool = np.array(test_anomalies, dtype=np.float64)
    if not 0.0 <= alpha0 < 1.0:
        raise ConfigurationError("alpha0 must lie in [0, 1)")
    k = n_anomalies_for(alpha0, len(normals))
    rng = make_rng(seed)
    if k == 0:
        out = _assemble(normals, np.zeros((0, normals.shape[1])), rng, "csv", seed, 0.0)
        return (out, np.full(out.n, -1)) if with_sources else out
    if pool.ndim != 2 or len(pool) == 0:
        raise ConfigurationError("contamination needs a non-empty anomaly pool")
    if pool.shape[1] != normals.shape[1]:
        raise ConfigurationError("normals and anomaly pool have different feature counts")
    idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
    std = np.sqrt(pool.var(axis=0))
    injected = pool[idx] + std * rng.standard_normal((k, pool.shape[1]))
    out, perm = _assemble(normals, injected, rng, "csv", seed, return_perm=True)
    if with_sources:
        return out, np.concatenate([np.full(len(normals), -1), idx])[perm]
    return out


# ----------------------------------------------------------------------------
# CSV

def load_csv(path, label_column: str | None = None) -> ContaminatedDataset:
    """Read a rectangular numeric CSV with a header row."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    for j, name in enumerate(header):
        try:
            float(name)
        except ValueError:
            continue
        raise DataError(f"{path}: missing header row (column {j + 1} header {name!r} is numeric)")
    if label_column is not None and label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header")
    values = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        parsed = []
        for j, cell in enumerate(row):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at row {i}, "
                                f"column {j + 1} ({header[j]})") from None
        values.append(parsed)
    data = np.array(values, dtype=np.float64).reshape(len(values), len(header))
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise DataError(f"{path}: non-finite value at row {r + 2}, column {c + 1}")
    labels = None
    names = header
    if label_column is not None:
        j = header.index(label_column)
        labels = data[:, j]
        if not np.all((labels == 0) | (labels == 1)):
            bad = int(np.flatnonzero((labels != 0) & (labels != 1))[0])
            raise DataError(f"{path}: label at row {bad + 2} is not 0 or 1")
        data = np.delete(data, j, axis=1)
        names = header[:j] + header[j + 1:]
    return ContaminatedDataset(data, labels, None, "csv", None, names)


def save_csv(dataset: ContaminatedDataset, path, label_column: str = "label") -> None:
    names = dataset.feature_names or [f"x{j}" for j in range(dataset.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ([label_column] if dataset.labels is not None else []))
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            w.writerow(row)


def save_manifest(dataset: ContaminatedDataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataset.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def split(dataset: ContaminatedDataset, test_fraction: float, seed: int):
    """Seeded (stratified, when labels exist) train/test partition."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    rng = make_rng(seed)
    if dataset.labels is None:
        strata = [np.arange(dataset.n)]
    else:
        strata = [np.flatnonzero(dataset.labels == c) for c in (0, 1)]
        strata = [s for s in strata if s.size]
    train_idx, test_idx = [], []
    for s in strata:
        n_test = int(math.floor(test_fraction * s.size + 0.5))
        if n_test == 0 or n_test == s.size:
            raise DataError(f"a stratum of {s.size} samples cannot be split at "
                            f"test fraction {test_fraction}")
        perm = rng.permutation(s)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    train_idx = train_idx[rng.permutation(train_idx.size)]
    test_idx = test_idx[rng.permutation(test_idx.size)]
    return dataset.subset(train_idx), dataset.subset(test_idx)
