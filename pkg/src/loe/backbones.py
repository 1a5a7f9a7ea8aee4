"""Dual-loss anomaly detectors.

Each backbone maps a batch ``X`` (B, D) to two per-sample losses that share
all parameters: ``L_n`` (minimised on samples believed normal) and ``L_a``
(minimised on samples believed anomalous). Losses are built as autodiff
graphs so the trainer can differentiate any weighted combination of them.
"""

from __future__ import annotations

import json
import math
import warnings
from typing import ClassVar

import numpy as np

from .autodiff import EPS, Graph, Var, concat
from .errors import ConfigurationError, DataError, InputError

# probabilities are clamped into [P_CLAMP, 1 - P_CLAMP] before taking logs
P_CLAMP = 1e-12
CHECKPOINT_FORMAT = "loe-checkpoint"
CHECKPOINT_VERSION = 1


def _check_batch(X, input_dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError(f"expected a non-empty (B, D) batch, got shape {X.shape}")
    if X.shape[1] != input_dim:
        raise InputError(f"expected {input_dim} features, got {X.shape[1]}")
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        raise InputError(f"non-finite features in sample {int(bad[0])}")
    return X


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp(P: dict[str, Var], prefix: str, n_layers: int, x: Var) -> Var:
    for i in range(n_layers):
        x = x @ P[f"{prefix}_w{i}"] + P[f"{prefix}_b{i}"]
        if i < n_layers - 1:
            x = x.relu()
    return x


def _mlp_params(rng, prefix, sizes):
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}_w{i}"] = _uniform_init(rng, fan_in, (fan_in, fan_out))
        params[f"{prefix}_b{i}"] = _uniform_init(rng, fan_in, (fan_out,))
    return params


def normalize(z: Var) -> Var:
    """Unit-normalise along the last axis; the norm is floored at EPS."""
    norm = z.square().sum(axis=-1, keepdims=True).sqrt().clip(lo=EPS)
    return z / norm


def cosine(a: Var, b: Var) -> Var:
    return (normalize(a) * normalize(b)).sum(axis=-1)


def dual_from_probs(p: Var) -> tuple[Var, Var]:
    """``L_n = -sum log p_k`` and ``L_a = -sum log(1 - p_k)`` over the last axis."""
    p = p.clip(P_CLAMP, 1.0 - P_CLAMP)
    return -(p.log().sum(axis=-1)), -((1.0 - p).log().sum(axis=-1))


def ntl_probabilities(z: Var, tau: float) -> Var:
    """Per-view probabilities from embeddings ``z`` of shape (B, K+1, E).

    Row 0 of each sample is the untransformed input. For view k,
    ``p_k = h(x_k, x) / (h(x_k, x) + sum_{l != k} h(x_k, x_l))`` with
    ``h(a, b) = exp(cos(a, b) / tau)``.
    """
    k1 = z.shape[1]
    zn = normalize(z)
    h = ((zn @ zn.transpose(0, 2, 1)) * (1.0 / tau)).exp()     # (B, K+1, K+1)
    mask = np.ones((k1 - 1, k1))
    mask[np.arange(k1 - 1), np.arange(1, k1)] = 0.0
    rows = h[:, 1:, :]
    pos = rows[:, :, 0]
    return pos / (rows * mask).sum(axis=-1)


def icl_probabilities(fa: Var, gb: Var, tau: float) -> Var:
    """``p_k = h(a_k, b_k) / sum_l h(a_l, b_k)`` for embeddings of shape (B, K, E)."""
    k = fa.shape[1]
    if k == 1:
        warnings.warn("ICL with a single window is degenerate: p_1 = 1 for every sample",
                      stacklevel=2)
    h = ((normalize(fa) @ normalize(gb).transpose(0, 2, 1)) * (1.0 / tau)).exp()  # [b, l, k]
    diag = np.arange(k)
    return h[:, diag, diag] / h.sum(axis=1)


class Backbone:
    """Common parameter bookkeeping. Subclasses implement ``build``."""

    kind: ClassVar[str] = ""
    input_dim: int
    params: dict[str, np.ndarray]

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def build(self, g: Graph, P: dict[str, Var], X: np.ndarray) -> tuple[Var, Var]:
        raise NotImplementedError

    def graph(self, X, params: dict[str, np.ndarray] | None = None):
        """Return (graph, L_n, L_a) for batch ``X`` with parameters as named leaves."""
        X = _check_batch(X, self.input_dim)
        g = Graph()
        src = self.params if params is None else params
        P = {name: g.leaf(name, value) for name, value in src.items()}
        ln, la = self.build(g, P, X)
        return g, ln, la

    def with_params(self, params: dict[str, np.ndarray]):
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return clone

    def copy(self):
        return self.with_params(self.params)


class DsvddRbf(Backbone):
    """Deep SVDD on a one-hidden-layer Gaussian RBF network with scalar output.

    RBF centres are fixed; widths (stored as log-scales), output weights,
    output bias and the one-dimensional model centre ``c`` are learned.
    ``L_n = (f(x) - c)^2`` and ``L_a = 1 / (L_n + recip_eps)``.
    """

    kind = "dsvdd_rbf"

    def __init__(self, rbf_centers, seed: int = 0, recip_eps: float = 1e-6,
                 init_scale: float = 0.5):
        centers = np.array(rbf_centers, dtype=np.float64)
        if centers.ndim != 2:
            raise ConfigurationError("rbf_centers must be a (J, D) matrix")
        if not recip_eps > 0:
            raise ConfigurationError("recip_eps must be positive")
        centers.setflags(write=False)
        self.rbf_centers = centers
        self.recip_eps = float(recip_eps)
        self.init_scale = float(init_scale)
        self.input_dim = centers.shape[1]
        rng = np.random.default_rng(seed)
        j = centers.shape[0]
        self.params = {
            "log_scale": np.full(j, math.log(init_scale)) + rng.normal(0.0, 0.1, j),
            "weight": rng.uniform(-1.0, 1.0, j),
            "bias": np.array(0.0),
            "center": np.array(rng.normal()),
        }

    def hyperparameters(self):
        return {"rbf_centers": self.rbf_centers.tolist(), "recip_eps": self.recip_eps,
                "init_scale": self.init_scale}

    def represent(self, g: Graph, P, X) -> Var:
        d2 = g.const(((X[:, None, :] - self.rbf_centers[None]) ** 2).sum(-1))   # (B, J)
        inv_two_var = (P["log_scale"] * -2.0).exp() * 0.5
        phi = (-(d2 * inv_two_var)).exp()
        return phi @ P["weight"] + P["bias"]

    def build(self, g, P, X):
        ln = (self.represent(g, P, X) - P["center"]).square()
        la = 1.0 / (ln + self.recip_eps)
        return ln, la


class NtlBackbone(Backbone):
    """Neural transformation learning with K learned transformations.

    Each transformation is a 2-layer ReLU perceptron ``x -> x_k`` (optionally
    residual); a shared MLP encoder embeds the original and all views.
    """

    kind = "ntl"

    def __init__(self, input_dim: int, n_transforms: int = 9, trans_hidden: int | None = None,
                 enc_hidden: list[int] | None = None, embed_dim: int | None = None,
                 tau: float = 0.1, residual: bool = False, seed: int = 0):
        if n_transforms < 2:
            raise ConfigurationError("NTL needs at least two transformations")
        if not tau > 0:
            raise ConfigurationError("tau must be positive")
        self.input_dim = int(input_dim)
        self.n_transforms = int(n_transforms)
        self.trans_hidden = int(trans_hidden or 2 * input_dim)
        self.enc_hidden = list(enc_hidden) if enc_hidden is not None else [2 * input_dim]
        self.embed_dim = int(embed_dim or 2 * input_dim)
        self.tau = float(tau)
        self.residual = bool(residual)
        self.seed = seed
        rng = np.random.default_rng(seed)
        k, d, h = self.n_transforms, self.input_dim, self.trans_hidden
        bound1, bound2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
        self.params = {
            "trans_w0": rng.uniform(-bound1, bound1, (k, d, h)),
            "trans_b0": rng.uniform(-bound1, bound1, (k, 1, h)),
            "trans_w1": rng.uniform(-bound2, bound2, (k, h, d)),
            "trans_b1": rng.uniform(-bound2, bound2, (k, 1, d)),
        }
        self.params.update(_mlp_params(rng, "enc", [d, *self.enc_hidden, self.embed_dim]))

    def hyperparameters(self):
        return {"input_dim": self.input_dim, "n_transforms": self.n_transforms,
                "trans_hidden": self.trans_hidden, "enc_hidden": self.enc_hidden,
                "embed_dim": self.embed_dim, "tau": self.tau, "residual": self.residual}

    def embed(self, g, P, X) -> Var:
        x = g.const(X)
        hidden = (x @ P["trans_w0"] + P["trans_b0"]).relu()          # (K, B, H)
        views = hidden @ P["trans_w1"] + P["trans_b1"]                # (K, B, D)
        if self.residual:
            views = views + x
        allv = concat([g.const(X[None]), views], axis=0)              # (K+1, B, D)
        z = _mlp(P, "enc", len(self.enc_hidden) + 1, allv)
        return z.transpose(1, 0, 2)                                   # (B, K+1, E)

    def build(self, g, P, X):
        return dual_from_probs(ntl_probabilities(self.embed(g, P, X), self.tau))


def icl_windows(n_features: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (K, window) and (K, D - window) for consecutive stride-1 windows."""
    k = n_features - window + 1
    inside = np.arange(window)[None, :] + np.arange(k)[:, None]
    outside = np.array([[j for j in range(n_features) if not (i <= j < i + window)]
                        for i in range(k)], dtype=np.intp).reshape(k, n_features - window)
    return inside, outside


class IclBackbone(Backbone):
    """Internal contrastive learning: windows a_k(x) vs their complements b_k(x)."""

    kind = "icl"

    def __init__(self, input_dim: int, window: int | None = None, hidden: int | None = None,
                 embed_dim: int | None = None, tau: float = 0.1, seed: int = 0):
        d = int(input_dim)
        window = int(window if window is not None else max(1, d // 2))
        if window < 1 or d < 2 * window:
            raise ConfigurationError(
                f"ICL needs feature dimension >= 2 * window (D={d}, window={window})")
        if not tau > 0:
            raise ConfigurationError("tau must be positive")
        self.input_dim = d
        self.window = window
        self.n_windows = d - window + 1      # >= 2 because d >= 2 * window
        self.hidden = int(hidden or 2 * d)
        self.embed_dim = int(embed_dim or 2 * d)
        self.tau = float(tau)
        self.seed = seed
        self.idx_a, self.idx_b = icl_windows(d, window)
        rng = np.random.default_rng(seed)
        self.params = _mlp_params(rng, "f", [window, self.hidden, self.embed_dim])
        self.params.update(_mlp_params(rng, "g", [d - window, self.hidden, self.embed_dim]))

    def hyperparameters(self):
        return {"input_dim": self.input_dim, "window": self.window, "hidden": self.hidden,
                "embed_dim": self.embed_dim, "tau": self.tau}

    def build(self, g, P, X):
        fa = _mlp(P, "f", 2, g.const(X[:, self.idx_a]))    # (B, K, E)
        gb = _mlp(P, "g", 2, g.const(X[:, self.idx_b]))
        return dual_from_probs(icl_probabilities(fa, gb, self.tau))


BACKBONES = {cls.kind: cls for cls in (DsvddRbf, NtlBackbone, IclBackbone)}


def batch_dual_losses(model: Backbone, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (L_n, L_a) for a batch, in input order."""
    _, ln, la = model.graph(X)
    return np.asarray(ln.value, dtype=np.float64), np.asarray(la.value, dtype=np.float64)


def _single(model, x):
    ln, la = batch_dual_losses(model, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(ln[0]), float(la[0])


def dsvdd_dual_loss(model: DsvddRbf, x) -> tuple[float, float]:
    return _single(model, x)


def ntl_dual_loss(model: NtlBackbone, x) -> tuple[float, float]:
    return _single(model, x)


def icl_dual_loss(model: IclBackbone, x) -> tuple[float, float]:
    return _single(model, x)


# ----------------------------------------------------------------------------
# checkpoints

def make_backbone(kind: str, input_dim: int, seed: int = 0, **hyper) -> Backbone:
    if kind == "dsvdd_rbf":
        centers = hyper.pop("rbf_centers")
        return DsvddRbf(centers, seed=seed, **hyper)
    if kind == "ntl":
        return NtlBackbone(input_dim, seed=seed, **hyper)
    if kind == "icl":
        return IclBackbone(input_dim, seed=seed, **hyper)
    raise ConfigurationError(f"unknown backbone {kind!r}")


def checkpoint_dict(model: Backbone) -> dict:
    """Versioned JSON-able checkpoint: hyperparameters + flat named parameter arrays.

    Layout::

        {"format": "loe-checkpoint", "version": 1, "kind": ..., "hyperparameters": {...},
         "params": {name: {"shape": [...], "data": [flat row-major floats]}}}
    """
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "hyperparameters": model.hyperparameters(),
        "params": {name: {"shape": list(p.shape), "data": p.ravel().tolist()}
                   for name, p in sorted(model.params.items())},
    }


def model_from_checkpoint(ckpt: dict) -> Backbone:
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("not a loe checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {ckpt.get('version')!r}")
    hyper = dict(ckpt["hyperparameters"])
    kind = ckpt["kind"]
    input_dim = hyper.pop("input_dim", None)
    if kind == "dsvdd_rbf":
        input_dim = len(hyper["rbf_centers"][0])
    model = make_backbone(kind, input_dim, **hyper)
    params = {}
    for name, entry in ckpt["params"].items():
        params[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    if set(params) != set(model.params):
        raise ConfigurationError("checkpoint parameters do not match the backbone")
    for name, p in params.items():
        if p.shape != model.params[name].shape:
            raise ConfigurationError(f"parameter {name!r} has shape {p.shape}, "
                                     f"expected {model.params[name].shape}")
    return model.with_params(params)


def save_checkpoint(model: Backbone, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Backbone:
    try:
        with open(path) as fh:
            ckpt = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return model_from_checkpoint(ckpt)
