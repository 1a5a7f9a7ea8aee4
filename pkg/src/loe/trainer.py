"""Latent Outlier Exposure training loop and its baselines.

Every strategy reduces to per-sample weights on the two losses of a batch,
``sum_i wn_i * L_n(x_i) + wa_i * L_a(x_i)``:

=========  ==================================  =====================
strategy   wn                                  wa
=========  ==================================  =====================
blind      1                                   0
refine     1 - y (y = hard LOE labels)         0
loe_hard   1 - y, y in {0, 1}                  y
loe_soft   1 - y, y in {0, 0.5}                y
gtruth     1 - true label                      true label
=========  ==================================  =====================

Sharing one code path is what makes ``alpha = 0`` bit-identical to Blind.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbones import Backbone
from .errors import ConfigurationError, TrainingDivergence
from .optim import AdamState, adam_step

STRATEGIES = ("blind", "refine", "loe_hard", "loe_soft", "gtruth")


@dataclass
class TrainerConfig:
    strategy: str = "loe_hard"
    alpha: float = 0.1
    epochs: int = 200
    warmup_epochs: int = 2
    batch_size: int = 25
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")

    def to_dict(self):
        return asdict(self)


@dataclass
class LabelAssignment:
    y: np.ndarray
    mode: str

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(self.y))


@dataclass
class TrainingHistory:
    mean_joint_loss: list[float] = field(default_factory=list)
    flip_count: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


def n_flagged(alpha: float, m: int) -> int:
    """round(alpha * m) with halves rounded up (not Python's banker's rounding)."""
    return int(math.floor(alpha * m + 0.5))


def training_scores(l_n, l_a) -> np.ndarray:
    l_n, l_a = np.asarray(l_n, dtype=np.float64), np.asarray(l_a, dtype=np.float64)
    if l_n.shape != l_a.shape:
        raise ConfigurationError("L_n and L_a must have equal lengths")
    return l_n - l_a


def assign_labels(scores, alpha: float, mode: str = "hard") -> LabelAssignment:
    """Flag the round(alpha*M) largest training scores.

    Flagged samples get 1 (hard) or 0.5 (soft); ties at the boundary go to
    the lowest index.
    """
    if mode not in ("hard", "soft"):
        raise ConfigurationError(f"mode must be 'hard' or 'soft', got {mode!r}")
    scores = np.asarray(scores, dtype=np.float64)
    k = n_flagged(alpha, scores.size)
    y = np.zeros(scores.size)
    if k:
        # stable sort on -S keeps lower indices first among equal scores
        top = np.argsort(-scores, kind="stable")[:k]
        y[top] = 1.0 if mode == "hard" else 0.5
    return LabelAssignment(y, mode)


def joint_loss(l_n, l_a, y) -> float:
    if isinstance(y, LabelAssignment):
        y = y.y
    l_n, l_a, y = (np.asarray(a, dtype=np.float64) for a in (l_n, l_a, y))
    if not l_n.shape == l_a.shape == y.shape:
        raise ConfigurationError("L_n, L_a and y must have equal lengths")
    return float(np.sum((1.0 - y) * l_n + y * l_a))


def loss_weights(strategy: str, scores: np.ndarray, alpha: float,
                 true_labels: np.ndarray | None = None, warmup: bool = False):
    """Return (wn, wa, y) for one batch; ``y`` is the recorded label vector."""
    m = scores.size
    if strategy == "gtruth":
        if true_labels is None:
            raise ConfigurationError("gtruth strategy needs ground-truth labels")
        y = np.asarray(true_labels, dtype=np.float64)
        return 1.0 - y, y, y
    if strategy == "blind" or warmup:
        y = np.zeros(m)
        return 1.0 - y, y, y
    if strategy == "refine":
        y = assign_labels(scores, alpha, "hard").y
        return 1.0 - y, np.zeros(m), y
    y = assign_labels(scores, alpha, "hard" if strategy == "loe_hard" else "soft").y
    return 1.0 - y, y, y


def train(model: Backbone, data, cfg: TrainerConfig, trajectory: list | None = None):
    """Block coordinate descent over (theta, y), one Adam step per mini-batch.

    ``data`` is a ContaminatedDataset (or anything with ``features`` and
    ``labels``). Returns ``(trained_model, history)``; ``model`` itself is not
    modified. If ``trajectory`` is a list, a copy of the parameters after
    every step is appended to it.

    On divergence the raised TrainingDivergence carries the completed epochs
    in its ``history`` attribute.
    """
    history = TrainingHistory()
    try:
        return _train(model, data, cfg, trajectory, history)
    except TrainingDivergence as exc:
        exc.history = history
        raise


def _train(model, data, cfg, trajectory, history):
    X = np.asarray(data.features, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    labels = getattr(data, "labels", None)
    if cfg.strategy == "gtruth" and labels is None:
        raise ConfigurationError("gtruth strategy needs a labelled dataset")

    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    prev = np.zeros(n)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        warm = cfg.strategy != "gtruth" and epoch < cfg.warmup_epochs
        perm = rng.permutation(n)
        current = np.zeros(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            g, ln, la = model.graph(X[idx], params)
            scores = training_scores(ln.value, la.value)
            wn, wa, y = loss_weights(cfg.strategy, scores, cfg.alpha,
                                     None if labels is None else labels[idx], warm)
            loss = (ln * wn + la * wa).sum()
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite joint loss at epoch {epoch}, batch {b}",
                                         epoch, b)
            grads = g.backward(loss)
            try:
                params = adam_step(params, grads, state)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from exc
            if trajectory is not None:
                trajectory.append({k: v.copy() for k, v in params.items()})
            current[idx] = y
            total += value
        history.mean_joint_loss.append(total / n)
        history.flip_count.append(int(np.count_nonzero(current != prev)))
        history.seconds.append(time.perf_counter() - t0)
        prev = current

    return model.with_params(params), history


def test_scores(model: Backbone, X, chunk: int = 1024) -> np.ndarray:
    """Deployment score: the normal loss L_n alone."""
    X = np.asarray(X, dtype=np.float64)
    out = []
    for start in range(0, X.shape[0], chunk):
        _, ln, _ = model.graph(X[start:start + chunk])
        out.append(np.asarray(ln.value, dtype=np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def write_history_csv(history: TrainingHistory, path, record_time: bool = False) -> None:
    """Columns: epoch, mean_joint_loss, flip_count, seconds.

    ``seconds`` is left blank unless ``record_time`` is set, so that reruns
    produce byte-identical files.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_joint_loss", "flip_count", "seconds"])
        for e, (loss, flips, secs) in enumerate(zip(history.mean_joint_loss, history.flip_count,
                                                     history.seconds)):
            w.writerow([e, repr(loss), flips, repr(secs) if record_time else ""])


test_scores.__test__ = False  # keep pytest from collecting it when imported
