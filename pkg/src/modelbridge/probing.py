"""Bridge input-position selection by linear probing against teacher pseudo-labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .metrics import f1_scores
from .models import EncoderModel, TaskHead, predict

log = logging.getLogger(__name__)

DEFAULT_L2 = 1e-3


def pseudo_labels(old_model: EncoderModel, head: TaskHead, x_old: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Teacher argmax predictions, computed in fixed-size batches."""
    out = [predict(old_model, head, x_old[i : i + batch_size]).argmax(axis=1)
           for i in range(0, len(x_old), batch_size)]
    return np.concatenate(out).astype(np.int64)


@dataclass
class LinearProber:
    weight: np.ndarray  # (d, K) in standardized feature space
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision(x), axis=1)]


def fit_linear_prober(x: np.ndarray, y: np.ndarray, l2: float = DEFAULT_L2, max_iter: int = 500,
                      n_classes: int | None = None) -> LinearProber:
    """Multinomial logistic regression with an L2 penalty on weights and bias.

    Minimizes ``mean CE + l2/2 * ||theta||^2`` on z-scored features with L-BFGS
    (gradient tolerance 1e-6, at most ``max_iter`` iterations).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(x)):
        raise ValueError("probe features contain non-finite values")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    n, d = x.shape
    classes = np.arange(n_classes) if n_classes is not None else np.unique(y)
    k = len(classes)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    target = (y[:, None] == classes[None, :]).astype(np.float64)

    def objective(theta):
        w = theta[: d * k].reshape(d, k)
        b = theta[d * k :]
        z = xs @ w + b
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(target * logp).sum() / n + 0.5 * l2 * (theta @ theta)
        resid = (np.exp(logp) - target) / n
        grad = np.concatenate([(xs.T @ resid).ravel(), resid.sum(axis=0)]) + l2 * theta
        return loss, grad

    res = minimize(objective, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-6})
    return LinearProber(res.x[: d * k].reshape(d, k), res.x[d * k :], mean, scale, classes)


def stratified_folds(y: np.ndarray, k: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic fold assignment: shuffle within class, then deal round-robin."""
    y = np.asarray(y)
    if len(y) < k:
        raise ValueError(f"cannot make {k} folds from {len(y)} samples")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    assignment = np.empty(len(y), dtype=np.int64)
    assignment[order] = np.arange(len(y)) % k
    return [np.flatnonzero(assignment == f) for f in range(k)]


def cross_val_f1_macro(x: np.ndarray, y: np.ndarray, k: int = 5, l2: float = DEFAULT_L2, seed: int = 0) -> float:
    """Mean held-out F1-macro of the linear prober over ``k`` stratified folds."""
    if k < 2:
        raise ValueError("need at least two folds")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    scores = []
    for test in stratified_folds(y, k, seed):
        train = np.setdiff1d(np.arange(len(y)), test)
        prober = fit_linear_prober(x[train], y[train], l2)
        scores.append(f1_scores(y[test], prober.predict(x[test]))[0])
    return float(np.mean(scores))


def pooled_features(model: EncoderModel, x: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
    """Token-mean of every layer's representation, one (n, d_i) matrix per layer."""
    chunks = [model.all_layers(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return [np.concatenate([c[j].mean(axis=1) for c in chunks]) for j in range(model.layer_count)]


@dataclass
class ProbeResult:
    m: int
    scores: dict[int, float] = field(default_factory=dict)
    l2: float = DEFAULT_L2
    status: str = "ok"


def select_input_position(new_model: EncoderModel, x_new: np.ndarray, pseudo: np.ndarray, k: int = 5,
                          l2: float = DEFAULT_L2, seed: int = 0) -> ProbeResult:
    """Layer of ``new_model`` whose pooled features best predict the pseudo-labels.

    Ties go to the shallowest layer. A single-class pseudo-label set cannot be
    probed; the last layer is returned with status ``"degenerate-labels"``.
    """
    pseudo = np.asarray(pseudo, dtype=np.int64)
    n_layers = new_model.layer_count
    if len(np.unique(pseudo)) < 2:
        log.warning("pseudo-labels contain a single class; falling back to the last layer")
        return ProbeResult(n_layers, {}, l2, "degenerate-labels")
    if n_layers == 1:
        return ProbeResult(1, {}, l2)
    feats = pooled_features(new_model, x_new)
    scores = {m: cross_val_f1_macro(feats[m - 1], pseudo, k, l2, seed) for m in range(1, n_layers + 1)}
    best = max(scores.values())
    chosen = min(m for m, s in scores.items() if s == best)
    return ProbeResult(chosen, scores, l2)
