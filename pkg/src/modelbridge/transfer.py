"""Output-position selection, bridge training, bridged inference and baselines."""

from __future__ import annotations

import copy
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .bridge import BridgeParams, bridge_forward
from .cka import DegenerateRepresentationError, cka_linear, subsample_rows
from .metrics import balanced_accuracy
from .models import (EncoderModel, TaskHead, TrainingDivergedError, cross_entropy, iterate_minibatches,
                     softmax_np)
from .optim import Adam

log = logging.getLogger(__name__)

INFONCE_TEMPERATURE = 0.04


def _chunked(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def prefix_reps(model: EncoderModel, x: np.ndarray, m: int) -> np.ndarray:
    return _chunked(lambda b: model.forward_prefix(b, m).data, x)


@dataclass
class PositionSelection:
    m: int
    l: int
    cka_scores: dict[int, float] = field(default_factory=dict)
    probe_scores: dict[int, float] = field(default_factory=dict)
    objective: str = "argmax"


# ----------------------------------------------------------- position selection


def select_output_position(h_new: np.ndarray, old_model: EncoderModel, x_old: np.ndarray,
                           cap: int | None = 512, seed: int = 0,
                           objective: str = "argmax") -> tuple[int, dict[int, float]]:
    """Old-model layer whose representation is most CKA-similar to ``h_new``.

    ``h_new`` holds the new-modality layer-m representations of the paired
    samples, row-aligned with ``x_old``. The same row subset (at most ``cap``
    rows, ``None`` for all) is used for every candidate layer. Layers with zero
    centered variance are skipped. ``objective="argmin"`` reproduces the
    literal printed selection rule for comparison.
    """
    if objective not in ("argmax", "argmin"):
        raise ValueError(f"unknown objective {objective!r}")
    n_layers = old_model.layer_count
    if n_layers == 1:
        return 1, {}
    if cap is not None:
        h_new, x_old = subsample_rows(h_new, x_old, cap=cap, seed=seed)
    old_layers = [np.concatenate(chunk) for chunk in
                  zip(*[old_model.all_layers(x_old[i : i + 256]) for i in range(0, len(x_old), 256)])]
    scores = {}
    for l, h_old in enumerate(old_layers, start=1):
        try:
            scores[l] = float(cka_linear(h_new, h_old))
        except DegenerateRepresentationError:
            log.warning("old layer %d is degenerate; skipped", l)
    if not scores:
        raise DegenerateRepresentationError("every old-model layer is degenerate")
    pick = max if objective == "argmax" else min
    target = pick(scores.values())
    return min(l for l, s in scores.items() if s == target), scores


# ------------------------------------------------------------------ losses


def alignment_loss(h: Tensor | np.ndarray, h_tilde: Tensor, kind: str = "cosine",
                   counter: Counter | None = None) -> Tensor:
    """Alignment between teacher ``h`` and bridged ``h_tilde`` (both (.., N, d)).

    ``cosine``: mean over token rows of ``1 - cos``; a row where either side
    has zero norm contributes 1 and increments ``counter["zero_norm_rows"]``.
    ``cosine-pooled``: the same on token-mean vectors. ``mae``: mean absolute
    difference.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.shape != h_tilde.shape:
        raise ValueError(f"alignment shapes differ: {h.shape} vs {h_tilde.shape}")
    if kind == "mae":
        return ad.mean(ad.abs(h_tilde - h))
    if kind == "cosine-pooled":
        h, h_tilde = ad.mean(h, axis=-2), ad.mean(h_tilde, axis=-2)
    elif kind != "cosine":
        raise ValueError(f"unknown alignment loss {kind!r}")
    dot = ad.sum(h * h_tilde, axis=-1)
    norm2 = ad.sum(h * h, axis=-1) * ad.sum(h_tilde * h_tilde, axis=-1)
    valid = norm2.data > 0
    if not valid.all():
        if counter is not None:
            counter["zero_norm_rows"] += int((~valid).sum())
        norm2 = norm2 + (~valid).astype(np.float64)
    cos = dot / ad.sqrt(norm2) * valid.astype(np.float64)
    return ad.mean(1.0 - cos)


def infonce(za: Tensor, zb: Tensor | np.ndarray, tau: float = INFONCE_TEMPERATURE) -> Tensor:
    """Symmetric InfoNCE between row-paired embeddings; other rows are negatives."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    zb = zb if isinstance(zb, Tensor) else Tensor(zb)
    if za.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least two pairs")
    za = za / ad.sqrt(ad.sum(za * za, axis=-1, keepdims=True))
    zb = zb / ad.sqrt(ad.sum(zb * zb, axis=-1, keepdims=True))
    logits = (za @ ad.transpose(zb)) * (1.0 / tau)
    eye = np.eye(za.shape[0])
    return 0.5 * (cross_entropy(logits, eye) + cross_entropy(ad.transpose(logits), eye))


# ------------------------------------------------------------------ bridge


@dataclass
class TrainingHistory:
    losses: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


@dataclass
class BridgedModel:
    old_model: EncoderModel
    new_model: EncoderModel
    head: TaskHead
    bridge: BridgeParams
    m: int
    l: int

    def predict_proba(self, x_new: np.ndarray) -> np.ndarray:
        return bridged_predict(self.old_model, self.new_model, self.head, self.bridge, (self.m, self.l), x_new)

    def trainable_param_count(self) -> int:
        return self.bridge.param_count()


def suffix_logits(old_model: EncoderModel, head: TaskHead, h_l, l: int) -> np.ndarray:
    """Teacher logits when ``h_l`` stands in for the old model's layer-``l`` output."""
    return head(old_model.forward_suffix(h_l, l)).data


def bridged_predict(old_model: EncoderModel, new_model: EncoderModel, head: TaskHead, bridge: BridgeParams,
                    positions: tuple[int, int], x_new: np.ndarray) -> np.ndarray:
    """Head(old layers > l (bridge(new layers <= m (x_new)))) as class probabilities."""
    m, l = positions

    def run(xb):
        return suffix_logits(old_model, head, bridge_forward(new_model.forward_prefix(xb, m), bridge), l)

    single = np.asarray(x_new).ndim == 2
    logits = run(x_new) if single else _chunked(run, x_new)
    return softmax_np(logits)


def train_bridge(old_model: EncoderModel, new_model: EncoderModel, x_old: np.ndarray, x_new: np.ndarray,
                 positions: tuple[int, int], bridge: BridgeParams, epochs: int = 50, lr: float = 1e-3,
                 loss_kind: str = "cosine", batch_size: int = 32, seed: int = 0, align_layer: int | None = None,
                 val: tuple[TaskHead, np.ndarray, np.ndarray] | None = None,
                 callback: Callable[[int, BridgeParams], None] | None = None) -> tuple[BridgeParams, TrainingHistory]:
    """Fit ``bridge`` so the bridged old-model representation matches the teacher's.

    Only the bridge is updated; gradients pass through the frozen old-model
    layers ``l+1 .. align_layer`` (default: the last layer). ``val`` is an
    optional ``(head, x_new_val, y_val)`` triple for per-epoch balanced accuracy.
    """
    m, l = positions
    align = old_model.layer_count if align_layer is None else align_layer
    if not (1 <= m <= new_model.layer_count and 1 <= l <= align <= old_model.layer_count):
        raise ValueError(f"invalid positions m={m}, l={l}, align={align}")
    frozen = [p for p in old_model.parameters() + new_model.parameters() if p.trainable]
    if frozen:
        raise ValueError("both encoders must be frozen before bridge training")
    h_new = prefix_reps(new_model, x_new, m)
    target = prefix_reps(old_model, x_old, align)
    opt = Adam(bridge.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    counter: Counter = Counter()
    history = TrainingHistory()
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for step, idx in enumerate(iterate_minibatches(len(h_new), batch_size, rng)):
            with Tape() as tape:
                h_tilde = old_model.forward_suffix(bridge_forward(h_new[idx], bridge), l, align)
                loss = alignment_loss(target[idx], h_tilde, loss_kind, counter)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError("bridge training", epoch, step)
            opt.step(ad.backward(tape, loss, bridge.parameters()))
            total += loss.item() * len(idx)
        history.losses.append(total / len(h_new))
        if val is not None:
            head, xv, yv = val
            pred = bridged_predict(old_model, new_model, head, bridge, (m, l), xv).argmax(axis=1)
            history.val_metric.append(balanced_accuracy(yv, pred))
        history.seconds.append(time.perf_counter() - start)
        if callback is not None:
            callback(epoch, bridge)
    if counter["zero_norm_rows"]:
        log.warning("%d zero-norm token rows during bridge training", counter["zero_norm_rows"])
    return bridge, history


# ------------------------------------------------------------------ baselines


@dataclass
class KDStudent:
    encoder: EncoderModel
    head: TaskHead

    def predict_proba(self, x_new: np.ndarray) -> np.ndarray:
        return _chunked(lambda b: softmax_np(self.head(self.encoder.forward(b)).data), x_new)

    def trainable_param_count(self) -> int:
        return self.encoder.param_count() + sum(p.data.size for p in self.head.parameters())


@dataclass
class ContrastStudent:
    encoder: EncoderModel
    proj_weight: Parameter
    proj_bias: Parameter
    old_head: TaskHead
    norm_scale: float

    def embed(self, x_new) -> Tensor:
        return ad.mean(self.encoder.forward(x_new), axis=1) @ self.proj_weight + self.proj_bias

    def predict_proba(self, x_new: np.ndarray) -> np.ndarray:
        def run(b):
            z = self.embed(b).data
            z = self.norm_scale * z / np.linalg.norm(z, axis=1, keepdims=True)
            return softmax_np(self.old_head.logits_from_pooled(Tensor(z)).data)
        return _chunked(run, x_new)

    def trainable_param_count(self) -> int:
        return self.encoder.param_count() + self.proj_weight.data.size + self.proj_bias.data.size


def _student_encoder(new_model: EncoderModel) -> EncoderModel:
    student = copy.deepcopy(new_model)
    student.set_trainable(True)
    return student


def _run_epochs(params, loss_fn, n, epochs, lr, batch_size, seed, what) -> TrainingHistory:
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainingHistory()
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        total = 0.0
        # in-batch negatives need at least two samples per step
        for step, idx in enumerate(iterate_minibatches(n, batch_size, rng, drop_last=(what == "kd-contrast"))):
            with Tape() as tape:
                loss = loss_fn(idx)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(what, epoch, step)
            opt.step(ad.backward(tape, loss, opt.params))
            total += loss.item() * len(idx)
        history.losses.append(total / n)
        history.seconds.append(time.perf_counter() - start)
    return history


def train_kd(new_model: EncoderModel, old_model: EncoderModel, old_head: TaskHead, x_old: np.ndarray,
             x_new: np.ndarray, epochs: int = 50, lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
             temperature: float = 1.0) -> tuple[KDStudent, TrainingHistory]:
    """Fine-tune a copy of the new encoder plus a fresh head on teacher soft targets."""
    teacher_logits = _chunked(lambda b: old_head(old_model.forward(b)).data, x_old)
    soft = softmax_np(teacher_logits / temperature)
    encoder = _student_encoder(new_model)
    head = TaskHead(encoder.layer_shapes()[-1][1], old_head.n_classes, seed=seed + 1)
    head.set_trainable(True)

    def loss_fn(idx):
        logits = head(encoder.forward(x_new[idx]))
        return cross_entropy(logits * (1.0 / temperature), soft[idx])

    history = _run_epochs(encoder.parameters() + head.parameters(), loss_fn, len(x_new), epochs, lr,
                          batch_size, seed, "kd")
    encoder.freeze()
    head.set_trainable(False)
    return KDStudent(encoder, head), history


def train_kd_contrast(new_model: EncoderModel, old_model: EncoderModel, old_head: TaskHead, x_old: np.ndarray,
                      x_new: np.ndarray, tau: float = INFONCE_TEMPERATURE, epochs: int = 50, lr: float = 1e-3,
                      batch_size: int = 32, seed: int = 0) -> tuple[ContrastStudent, TrainingHistory]:
    """Contrastive distillation of pooled teacher embeddings into a new-modality student.

    At inference the projected embedding is rescaled to the mean teacher
    embedding norm and fed to the teacher's linear head.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if batch_size < 2 or len(x_new) < 2:
        raise ValueError("contrastive distillation needs batches of at least two pairs")
    teacher = _chunked(lambda b: old_model.forward(b).data.mean(axis=1), x_old)
    encoder = _student_encoder(new_model)
    d_new = encoder.layer_shapes()[-1][1]
    d_old = teacher.shape[1]
    rng = np.random.default_rng(seed + 1)
    w = Parameter(rng.standard_normal((d_new, d_old)) / math.sqrt(d_new), name="proj_weight")
    b = Parameter(np.zeros(d_old), name="proj_bias")

    def loss_fn(idx):
        z = ad.mean(encoder.forward(x_new[idx]), axis=1) @ w + b
        return infonce(z, teacher[idx], tau)

    history = _run_epochs(encoder.parameters() + [w, b], loss_fn, len(x_new), epochs, lr,
                          min(batch_size, len(x_new)), seed, "kd-contrast")
    encoder.freeze()
    w.trainable = b.trainable = False
    scale = float(np.linalg.norm(teacher, axis=1).mean())
    return ContrastStudent(encoder, w, b, old_head, scale), history


def random_baseline(n_classes: int, n: int, seed: int = 0) -> np.ndarray:
    if n_classes < 2:
        raise ValueError("random baseline needs at least two classes")
    return np.random.default_rng(seed).integers(0, n_classes, size=n)
