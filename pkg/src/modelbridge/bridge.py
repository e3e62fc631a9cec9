"""Low-rank prototype bridge.

The bridge maps a new-modality representation ``h_m`` of shape ``(N_m, d_m)``
to an old-modality representation of shape ``(N_l, d_l)``:

    pooled  = pool_tokens(h_m)                  # (d_m,)
    weights = pooled @ A @ B                    # (N_l * N_p,)
    out     = reshape(weights, (N_l, N_p)) @ P  # (N_l, d_l)

``A`` (d_m x r) and ``B`` (r x N_l*N_p) generate per-token aggregation weights
over the ``N_p`` prototype vectors in ``P`` (N_p x d_l).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

SEARCH_RANKS = (4, 8, 16, 32)
SEARCH_PROTOTYPES = (50, 100, 150, 200, 250, 300)


@dataclass(frozen=True)
class BridgeShapeSpec:
    d_in: int
    n_out: int
    d_out: int
    rank: int
    n_prototypes: int
    pool: str = "mean"

    def __post_init__(self):
        if min(self.d_in, self.n_out, self.d_out, self.rank, self.n_prototypes) < 1:
            raise ValueError(f"bridge dimensions must be positive: {self}")
        if self.pool not in ("mean", "max"):
            raise ValueError(f"unknown pooling {self.pool!r}")


def bridge_param_count(spec: BridgeShapeSpec) -> int:
    return spec.d_in * spec.rank + spec.rank * spec.n_out * spec.n_prototypes + spec.n_prototypes * spec.d_out


def full_rank_param_count(spec: BridgeShapeSpec, n_in: int) -> int:
    """Weights of a dense linear map from a flattened (n_in, d_in) input to (n_out, d_out)."""
    return n_in * spec.d_in * spec.n_out * spec.d_out


class BridgeParams:
    def __init__(self, spec: BridgeShapeSpec, a: np.ndarray, b: np.ndarray, p: np.ndarray):
        self.spec = spec
        self.A = Parameter(a, name="bridge_A")
        self.B = Parameter(b, name="bridge_B")
        self.P = Parameter(p, name="bridge_P")
        expected = {"A": (spec.d_in, spec.rank), "B": (spec.rank, spec.n_out * spec.n_prototypes),
                    "P": (spec.n_prototypes, spec.d_out)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"bridge {name} has shape {getattr(self, name).shape}, expected {shape}")
        assert self.param_count() == bridge_param_count(spec)

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B, self.P]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def copy(self) -> "BridgeParams":
        return BridgeParams(self.spec, self.A.data.copy(), self.B.data.copy(), self.P.data.copy())


def _stage_error(stage: str, detail: str) -> ValueError:
    return ValueError(f"bridge {stage}: {detail}")


def bridge_forward(h, params: BridgeParams) -> Tensor:
    """Project ``h`` of shape (N_m, d_m) or (B, N_m, d_m) into (.., N_l, d_l)."""
    spec = params.spec
    h = h if isinstance(h, Tensor) else Tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = ad.reshape(h, (1,) + h.shape)
    if h.ndim != 3 or h.shape[-1] != spec.d_in:
        raise _stage_error("pool", f"input {h.shape} does not end in embedding dim {spec.d_in}")
    pooled = ad.mean(h, axis=1) if spec.pool == "mean" else ad.max(h, axis=1)
    low = pooled @ params.A
    weights = low @ params.B
    weights = ad.reshape(weights, (h.shape[0], spec.n_out, spec.n_prototypes))
    out = weights @ params.P
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def init_bridge(spec: BridgeShapeSpec, strategy: str = "prototype-from-old", old_reps: np.ndarray | None = None,
                seed: int = 0, std: float = 0.02) -> BridgeParams:
    """Gaussian ``A``, ``B``; ``P`` Gaussian or sampled tokens of old-modality representations.

    ``old_reps`` may be any array whose last axis is ``d_out``; its token
    vectors are pooled across samples before sampling without replacement.
    """
    rng = np.random.default_rng(seed)
    a = std * rng.standard_normal((spec.d_in, spec.rank))
    b = std * rng.standard_normal((spec.rank, spec.n_out * spec.n_prototypes))
    if strategy == "random":
        p = std * rng.standard_normal((spec.n_prototypes, spec.d_out))
    elif strategy == "prototype-from-old":
        if old_reps is None:
            raise ValueError("prototype-from-old initialization needs old-modality representations")
        tokens = np.asarray(old_reps, dtype=np.float64)
        if tokens.shape[-1] != spec.d_out:
            raise ValueError(f"old representations have dim {tokens.shape[-1]}, expected {spec.d_out}")
        tokens = tokens.reshape(-1, spec.d_out)
        if len(tokens) < spec.n_prototypes:
            raise ValueError(f"need {spec.n_prototypes} old tokens, got {len(tokens)}")
        p = tokens[rng.choice(len(tokens), size=spec.n_prototypes, replace=False)].copy()
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return BridgeParams(spec, a, b, p)


class GridCellError(RuntimeError):
    def __init__(self, rank: int, n_prototypes: int, cause: Exception):
        super().__init__(f"grid cell r={rank}, N_p={n_prototypes} failed: {cause}")
        self.rank = rank
        self.n_prototypes = n_prototypes


@dataclass
class GridResult:
    best: tuple[int, int]
    best_score: float
    table: dict[tuple[int, int], float] = field(default_factory=dict)


def grid_search(ranks: Sequence[int], prototypes: Sequence[int],
                train_and_score: Callable[[int, int], float]) -> GridResult:
    """Exhaustive search; ``train_and_score(r, n_p)`` returns a validation score.

    Ties keep the first cell in (rank, prototypes) iteration order.
    """
    if not ranks or not prototypes:
        raise ValueError("grid needs at least one rank and one prototype count")
    table = {}
    for r, n_p in itertools.product(ranks, prototypes):
        try:
            table[(r, n_p)] = float(train_and_score(r, n_p))
        except Exception as exc:
            raise GridCellError(r, n_p, exc) from exc
    best = max(table, key=lambda k: table[k])
    return GridResult(best, table[best], table)
