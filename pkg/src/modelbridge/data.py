"""Paired two-modality time series driven by one shared latent state.

Each sample draws a latent vector ``z`` from a class-conditional Gaussian
(plus a per-subject shift). Every modality renders ``z`` through its own
nonlinear observation model: component amplitudes ``softplus(W z + b)`` drive
sinusoids at modality-specific frequencies with random phases, which are
mixed into channels and corrupted by noise. The two signals of a sample are
therefore different views of the same physiological state.

Signals are quantized to float32 at generation time so the on-disk format
round-trips exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_RATIOS = (3 / 9, 2 / 9, 1 / 9, 3 / 9)
SPLIT_NAMES = ("old", "new", "val", "pair")

DATASET_MAGIC = b"MBDS"
DATASET_VERSION = 1


class LabelAccessError(PermissionError):
    """Raised when a training path asks for labels it must not see."""


@dataclass(frozen=True)
class LatentTaskSpec:
    n_classes: int = 3
    latent_dim: int = 4
    class_separation: float = 3.5
    noise: float = 1.0
    subject_shift: float = 0.3
    samples_per_subject: int = 200
    n_subjects: int = 15
    # optional per-class covariance matrices (n_classes x latent_dim x latent_dim);
    # identity scaled by noise**2 when omitted
    covariances: tuple | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.n_classes > self.latent_dim:
            raise ValueError("class means are orthogonal directions: n_classes must be <= latent_dim")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int
    length: int
    n_components: int = 6
    band: tuple[float, float] = (2.0, 24.0)  # cycles per window
    noise: float = 0.3
    gain: float = 1.0

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.length, self.channels


DEFAULT_OLD_MODALITY = ModalitySpec("ecg", channels=3, length=256, band=(3.0, 40.0), noise=0.3)
DEFAULT_NEW_MODALITY = ModalitySpec("ppg", channels=2, length=128, band=(2.0, 20.0), noise=0.3)


@dataclass
class _Observation:
    freqs: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    mix: np.ndarray


def _observation(spec: ModalitySpec, latent_dim: int, seed: int, index: int) -> _Observation:
    rng = np.random.default_rng([seed, 0, index])
    lo, hi = spec.band
    # evenly spaced, jittered frequencies keep components spectrally distinct
    grid = np.linspace(lo, hi, spec.n_components)
    step = (hi - lo) / max(spec.n_components - 1, 1)
    freqs = grid + rng.uniform(-0.25, 0.25, spec.n_components) * step
    weight = spec.gain * rng.standard_normal((spec.n_components, latent_dim)) / math.sqrt(latent_dim)
    bias = rng.normal(0.0, 0.5, spec.n_components)
    mix = rng.standard_normal((spec.channels, spec.n_components)) / math.sqrt(spec.n_components)
    return _Observation(freqs, weight, bias, mix)


def _render(obs: _Observation, spec: ModalitySpec, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    amp = np.logaddexp(0.0, obs.weight @ z + obs.bias)
    phase = rng.uniform(0.0, 2 * math.pi, obs.freqs.size)
    t = np.arange(spec.length) / spec.length
    sources = amp[:, None] * np.sin(2 * math.pi * obs.freqs[:, None] * t[None, :] + phase[:, None])
    x = (obs.mix @ sources).T + spec.noise * rng.standard_normal((spec.length, spec.channels))
    return x.astype(np.float32).astype(np.float64)


@dataclass
class PairedDataset:
    x_old: np.ndarray
    x_new: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    latents: np.ndarray
    task: LatentTaskSpec
    mod_old: ModalitySpec
    mod_new: ModalitySpec
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def regenerate(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Re-render sample ``i`` from its stored latent and the dataset seed."""
        return _render_pair(self.task, self.mod_old, self.mod_new, self.seed, i, self.latents[i])


def _render_pair(task, mod_old, mod_new, seed, i, z):
    obs_old = _observation(mod_old, task.latent_dim, seed, 0)
    obs_new = _observation(mod_new, task.latent_dim, seed, 1)
    rng = np.random.default_rng([seed, 1, i])
    return _render(obs_old, mod_old, z, rng), _render(obs_new, mod_new, z, rng)


def class_means(task: LatentTaskSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    q, _ = np.linalg.qr(rng.standard_normal((task.latent_dim, task.latent_dim)))
    return task.class_separation * q[:, : task.n_classes].T


def _class_factors(task: LatentTaskSpec) -> np.ndarray:
    if task.covariances is None:
        return np.stack([task.noise * np.eye(task.latent_dim)] * task.n_classes)
    covs = np.asarray(task.covariances, dtype=np.float64)
    if covs.shape != (task.n_classes, task.latent_dim, task.latent_dim):
        raise ValueError(f"covariances must have shape {(task.n_classes, task.latent_dim, task.latent_dim)}")
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        raise ValueError("degenerate covariance: class covariances must be positive definite") from None


def generate_paired_dataset(task: LatentTaskSpec = LatentTaskSpec(),
                            mod_old: ModalitySpec = DEFAULT_OLD_MODALITY,
                            mod_new: ModalitySpec = DEFAULT_NEW_MODALITY,
                            seed: int = 0) -> PairedDataset:
    means = class_means(task, seed)
    factors = _class_factors(task)
    rng = np.random.default_rng([seed, 3])
    n = task.n_subjects * task.samples_per_subject
    labels = np.empty(n, dtype=np.int64)
    subjects = np.repeat(np.arange(task.n_subjects), task.samples_per_subject)
    latents = np.empty((n, task.latent_dim))
    for s in range(task.n_subjects):
        shift = task.subject_shift * rng.standard_normal(task.latent_dim)
        ys = rng.permutation(np.arange(task.samples_per_subject) % task.n_classes)
        eps = rng.standard_normal((task.samples_per_subject, task.latent_dim))
        sl = slice(s * task.samples_per_subject, (s + 1) * task.samples_per_subject)
        labels[sl] = ys
        latents[sl] = means[ys] + shift + np.einsum("nij,nj->ni", factors[ys], eps)
    x_old = np.empty((n, mod_old.length, mod_old.channels))
    x_new = np.empty((n, mod_new.length, mod_new.channels))
    for i in range(n):
        x_old[i], x_new[i] = _render_pair(task, mod_old, mod_new, seed, i, latents[i])
    return PairedDataset(x_old, x_new, labels, subjects, latents, task, mod_old, mod_new, seed)


def generate_pretraining_corpus(task: LatentTaskSpec, modality: ModalitySpec, which: str, seed: int,
                                n: int = 1500, corpus_seed: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Class-agnostic unlabeled recordings of one modality with their latents.

    Shares the modality's observation model with the dataset generated from
    ``seed`` but draws latents from a broad isotropic Gaussian and uses an
    independent noise stream, so it carries no task labels and no samples
    from any split.
    """
    index = {"old": 0, "new": 1}[which]
    obs = _observation(modality, task.latent_dim, seed, index)
    rng = np.random.default_rng([seed, 4, corpus_seed])
    scale = max(task.class_separation, task.noise, 1.0)
    latents = scale * rng.standard_normal((n, task.latent_dim))
    x = np.stack([_render(obs, modality, z, rng) for z in latents])
    return x, latents


# ----------------------------------------------------------------------- splits


@dataclass
class Split:
    name: str
    indices: np.ndarray
    x_old: np.ndarray
    x_new: np.ndarray
    subjects: np.ndarray
    _labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        """Training-time labels: only the old-modality training split exposes them."""
        if self.name != "old":
            raise LabelAccessError(f"labels of split {self.name!r} are not available to training code")
        return self._labels

    def eval_labels(self) -> np.ndarray:
        """Labels for metric computation; never available for the paired split."""
        if self.name == "pair":
            raise LabelAccessError("the paired split is unlabeled")
        return self._labels

    def subset(self, idx: np.ndarray) -> "Split":
        idx = np.asarray(idx)
        return Split(self.name, self.indices[idx], self.x_old[idx], self.x_new[idx], self.subjects[idx],
                     self._labels[idx])


@dataclass
class DatasetSplits:
    old: Split
    new: Split
    val: Split
    pair: Split
    mode: str = "subject"
    subject_lists: dict[str, list[int]] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.old, self.new, self.val, self.pair))

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "subjects": {k: list(v) for k, v in self.subject_lists.items()},
            "indices": {s.name: [int(i) for i in s.indices] for s in self},
        }


def largest_remainder(total: int, ratios) -> list[int]:
    quotas = [total * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _check_ratios(ratios) -> tuple[float, ...]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 4 or any(r < 0 for r in ratios):
        raise ValueError("need four non-negative ratios (old, new, val, pair)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def _make_split(ds: PairedDataset, name: str, idx: np.ndarray) -> Split:
    idx = np.sort(idx)
    return Split(name, idx, ds.x_old[idx], ds.x_new[idx], ds.subjects[idx], ds.labels[idx])


def split_dataset(ds: PairedDataset, ratios=DEFAULT_RATIOS, seed: int = 0, mode: str = "subject") -> DatasetSplits:
    """Partition into old/new/val/pair, by subject (default) or by sample."""
    ratios = _check_ratios(ratios)
    rng = np.random.default_rng([seed, 5])
    if mode == "subject":
        subject_ids = np.unique(ds.subjects)
        if len(subject_ids) < 4:
            raise ValueError("subject-wise splitting needs at least 4 subjects")
        counts = largest_remainder(len(subject_ids), ratios)
        if any(c == 0 for c, r in zip(counts, ratios) if r > 0):
            raise ValueError(f"too few subjects ({len(subject_ids)}) to populate every split: {counts}")
        order = rng.permutation(subject_ids)
        bounds = np.cumsum([0] + counts)
        groups = {name: sorted(int(s) for s in order[bounds[i] : bounds[i + 1]])
                  for i, name in enumerate(SPLIT_NAMES)}
        parts = {name: np.flatnonzero(np.isin(ds.subjects, groups[name])) for name in SPLIT_NAMES}
    elif mode == "sample":
        counts = largest_remainder(len(ds), ratios)
        order = rng.permutation(len(ds))
        bounds = np.cumsum([0] + counts)
        parts = {name: order[bounds[i] : bounds[i + 1]] for i, name in enumerate(SPLIT_NAMES)}
        groups = {name: sorted({int(s) for s in ds.subjects[parts[name]]}) for name in SPLIT_NAMES}
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    splits = DatasetSplits(*(_make_split(ds, n, parts[n]) for n in SPLIT_NAMES), mode=mode, subject_lists=groups)
    _assert_disjoint(splits)
    return splits


def _assert_disjoint(splits: DatasetSplits) -> None:
    seen: set[int] = set()
    for s in splits:
        ids = set(int(i) for i in s.indices)
        if ids & seen:
            raise AssertionError("a sample appears in two splits")
        seen |= ids
    if splits.mode == "subject":
        groups = [set(v) for v in splits.subject_lists.values()]
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if groups[i] & groups[j]:
                    raise AssertionError("subject-wise splits share a subject")


def subsample_pair_fraction(splits: DatasetSplits, fraction: float, seed: int = 0) -> DatasetSplits:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(splits.pair)
    keep = math.ceil(fraction * n)
    if keep == 0:
        raise ValueError("fraction leaves no paired samples")
    if keep == n:
        return splits
    rng = np.random.default_rng([seed, 6])
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return replace(splits, pair=splits.pair.subset(idx))


# ------------------------------------------------------------------ file format


def _spec_dict(spec) -> dict:
    d = asdict(spec)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def write_dataset(path, ds: PairedDataset, splits: DatasetSplits | None = None) -> None:
    """Write the dataset container.

    Layout: ``b"MBDS"``, uint16 version, uint32 header length, UTF-8 JSON
    header (sorted keys), then little-endian blocks in header order:
    x_old float32, x_new float32, labels int32, subjects int32, latents float64.
    """
    blocks = [
        ("x_old", "<f4", ds.x_old),
        ("x_new", "<f4", ds.x_new),
        ("labels", "<i4", ds.labels),
        ("subjects", "<i4", ds.subjects),
        ("latents", "<f8", ds.latents),
    ]
    header = {
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "n_samples": len(ds),
        "task": _spec_dict(ds.task),
        "mod_old": _spec_dict(ds.mod_old),
        "mod_new": _spec_dict(ds.mod_new),
        "blocks": [{"name": n, "dtype": dt, "shape": list(a.shape)} for n, dt, a in blocks],
        "splits": splits.manifest() if splits is not None else None,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<HI", DATASET_VERSION, len(raw)) + raw)
        for _, dt, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _spec_from(cls, d):
    d = dict(d)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return cls(**d)


def read_dataset(path) -> tuple[PairedDataset, DatasetSplits | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    header = json.loads(buf[10 : 10 + hlen])
    offset = 10 + hlen
    arrays = {}
    for block in header["blocks"]:
        dt = np.dtype(block["dtype"])
        count = int(np.prod(block["shape"]))
        arrays[block["name"]] = np.frombuffer(buf, dt, count, offset).reshape(block["shape"])
        offset += count * dt.itemsize
    task_d = dict(header["task"])
    if task_d.get("covariances") is not None:
        task_d["covariances"] = tuple(tuple(tuple(r) for r in c) for c in task_d["covariances"])
    ds = PairedDataset(
        arrays["x_old"].astype(np.float64),
        arrays["x_new"].astype(np.float64),
        arrays["labels"].astype(np.int64),
        arrays["subjects"].astype(np.int64),
        arrays["latents"].astype(np.float64),
        LatentTaskSpec(**task_d),
        _spec_from(ModalitySpec, header["mod_old"]),
        _spec_from(ModalitySpec, header["mod_new"]),
        header["seed"],
    )
    splits = None
    if header["splits"] is not None:
        man = header["splits"]
        parts = [_make_split(ds, n, np.asarray(man["indices"][n], dtype=np.int64)) for n in SPLIT_NAMES]
        splits = DatasetSplits(*parts, mode=man["mode"],
                               subject_lists={k: list(v) for k, v in man["subjects"].items()})
    return ds, splits
