"""Linear centered kernel alignment over flattened representation matrices."""

from __future__ import annotations

import numpy as np

DEFAULT_ROW_CAP = 512


class DegenerateRepresentationError(ValueError):
    """A representation has zero centered variance, so CKA is undefined."""


def as_matrix(h: np.ndarray) -> np.ndarray:
    """Flatten per-sample representations ``(n, N, d)`` into rows ``(n, N*d)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim < 2:
        raise ValueError("need at least (n_samples, features)")
    return h.reshape(h.shape[0], -1)


def gram(h: np.ndarray) -> np.ndarray:
    h = as_matrix(h)
    return h @ h.T


def centering(n: int) -> np.ndarray:
    return np.eye(n) - np.full((n, n), 1.0 / n)


def hsic(k_t: np.ndarray, k_s: np.ndarray, n: int | None = None) -> float:
    """trace(K_t H K_s H) / n^2 with the centering matrix H."""
    k_t = np.asarray(k_t, dtype=np.float64)
    k_s = np.asarray(k_s, dtype=np.float64)
    if k_t.ndim != 2 or k_t.shape[0] != k_t.shape[1] or k_t.shape != k_s.shape:
        raise ValueError(f"HSIC needs two equal square matrices, got {k_t.shape} and {k_s.shape}")
    n = k_t.shape[0] if n is None else n
    if n != k_t.shape[0]:
        raise ValueError(f"sample count {n} does not match kernel size {k_t.shape[0]}")
    # trace(K_t H K_s H) == sum((H K_t H) * K_s) for symmetric K_s
    kc = k_t - k_t.mean(axis=0, keepdims=True)
    kc = kc - kc.mean(axis=1, keepdims=True)
    return float(np.sum(kc * k_s.T)) / n**2


def cka_linear(h_a: np.ndarray, h_b: np.ndarray) -> float:
    a, b = as_matrix(h_a), as_matrix(h_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    k_a, k_b = a @ a.T, b @ b.T
    self_a = hsic(k_a, k_a)
    self_b = hsic(k_b, k_b)
    scale = max(np.abs(k_a).max(), 1e-300) ** 2, max(np.abs(k_b).max(), 1e-300) ** 2
    if self_a <= 1e-24 * scale[0] or self_b <= 1e-24 * scale[1]:
        raise DegenerateRepresentationError("representation has zero centered variance")
    return hsic(k_a, k_b) / np.sqrt(self_a * self_b)


def subsample_rows(*mats: np.ndarray, cap: int = DEFAULT_ROW_CAP, seed: int = 0) -> tuple[np.ndarray, ...]:
    """Keep the same random subset of at most ``cap`` rows in every matrix."""
    if cap < 2:
        raise ValueError("row cap must be at least 2")
    n = len(mats[0])
    if any(len(m) != n for m in mats):
        raise ValueError("all matrices must have the same number of rows")
    if cap >= n:
        return tuple(mats)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))
    return tuple(m[idx] for m in mats)
