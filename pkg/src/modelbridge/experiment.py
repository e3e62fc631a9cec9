"""Experiment orchestration: config, per-seed pipelines, ablations and reports."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .bridge import BridgeShapeSpec, init_bridge
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DEFAULT_NEW_MODALITY, DEFAULT_OLD_MODALITY, DEFAULT_RATIOS, DatasetSplits, LatentTaskSpec,
                   PairedDataset, generate_paired_dataset, generate_pretraining_corpus, read_dataset,
                   split_dataset, subsample_pair_fraction)
from .metrics import MetricSet, evaluate
from .models import (ARCHITECTURES, EncoderModel, TaskHead, build_encoder, iterate_minibatches, predict,
                     pretrain_regression, pretrain_supervised)
from .probing import pseudo_labels, select_input_position
from .transfer import (BridgedModel, PositionSelection, prefix_reps, random_baseline, select_output_position,
                       train_bridge, train_kd, train_kd_contrast)

log = logging.getLogger(__name__)

METHODS = ("bridge", "kd", "kd-contrast", "random", "oracle")
WORKERS_ENV = "MODELBRIDGE_WORKERS"
CSV_COLUMNS = ("method", "input_modality", "bacc_mean", "bacc_std", "f1m_mean", "f1m_std", "f1w_mean", "f1w_std",
               "params", "m", "l", "seeds")
PARAM_BUDGET = 0.15


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    n_classes: int = 3
    latent_dim: int = 4
    class_separation: float = 3.5
    noise: float = 1.0
    subject_shift: float = 0.3
    samples_per_subject: int = 200
    n_subjects: int = 15
    split_mode: str = "subject"
    pair_fraction: float = 1.0


@dataclass(frozen=True)
class ModelsConfig:
    old_arch: str = "attention"
    new_arch: str = "conv"
    teacher_epochs: int = 10
    pretrain_epochs: int = 10
    pretrain_corpus: int = 1500
    lr: float = 1e-3
    batch_size: int = 32


@dataclass(frozen=True)
class BridgeConfig:
    rank: int = 4
    prototypes: int = 16
    pool: str = "mean"
    loss: str = "cosine"
    init: str = "prototype-from-old"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    probe_folds: int = 5
    probe_l2: float = 1e-3
    cka_cap: int = 512
    objective: str = "argmax"


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    temperature: float = 1.0
    tau: float = 0.04


@dataclass(frozen=True)
class RunConfig:
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    seeds: int = 5
    out: str = ""
    ranks: tuple[int, ...] = (1, 2, 4, 8, 16)
    prototype_counts: tuple[int, ...] = (4, 8, 16, 32, 64)
    pair_fractions: tuple[float, ...] = (1.0, 0.2)


SECTIONS = {"data": DataConfig, "models": ModelsConfig, "bridge": BridgeConfig, "baseline": BaselineConfig,
            "run": RunConfig}


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    models: ModelsConfig = ModelsConfig()
    bridge: BridgeConfig = BridgeConfig()
    baseline: BaselineConfig = BaselineConfig()
    run: RunConfig = RunConfig()

    @classmethod
    def from_string(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        parts = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            kind = SECTIONS[section]
            defaults = {f.name: f.default for f in fields(kind)}
            values = {}
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse_value(raw, defaults[key], f"[{section}] {key}")
            parts[section] = kind(**values)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_string(text)

    def to_dict(self) -> dict:
        return {name: {f.name: (list(v) if isinstance(v := getattr(getattr(self, name), f.name), tuple) else v)
                       for f in fields(kind)} for name, kind in SECTIONS.items()}

    def to_ini(self) -> str:
        lines = []
        for name, kind in SECTIONS.items():
            lines.append(f"[{name}]")
            section = getattr(self, name)
            lines += [f"{f.name} = {_format_value(getattr(section, f.name))}" for f in fields(kind)]
            lines.append("")
        return "\n".join(lines)

    def with_run(self, **changes) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, **changes))

    def seed_list(self) -> list[int]:
        return [self.run.seed + i for i in range(self.run.seeds)]

    def validate(self) -> None:
        checks = [
            (set(self.run.methods) <= set(METHODS), f"methods must be drawn from {METHODS}"),
            (len(set(self.run.methods)) == len(self.run.methods), "methods must not repeat"),
            (self.run.seeds >= 1, "seeds must be at least 1"),
            (0 < self.data.pair_fraction <= 1, "pair_fraction must lie in (0, 1]"),
            (all(0 < f <= 1 for f in self.run.pair_fractions), "pair_fractions must lie in (0, 1]"),
            (self.models.old_arch in ARCHITECTURES and self.models.new_arch in ARCHITECTURES,
             f"architectures must be drawn from {sorted(ARCHITECTURES)}"),
            (self.data.split_mode in ("subject", "sample"), "split_mode must be subject or sample"),
            (self.bridge.loss in ("cosine", "mae", "cosine-pooled"), "loss must be cosine, mae or cosine-pooled"),
            (self.bridge.pool in ("mean", "max"), "pool must be mean or max"),
            (self.bridge.init in ("prototype-from-old", "random"), "init must be prototype-from-old or random"),
            (self.bridge.objective in ("argmax", "argmin"), "objective must be argmax or argmin"),
            (self.bridge.rank >= 1 and self.bridge.prototypes >= 1, "rank and prototypes must be positive"),
            (self.bridge.probe_folds >= 2, "probe_folds must be at least 2"),
            (self.baseline.tau > 0 and self.baseline.temperature > 0, "temperatures must be positive"),
            (min(self.models.teacher_epochs, self.models.pretrain_epochs, self.bridge.epochs,
                 self.baseline.epochs) >= 1, "epoch counts must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


# ------------------------------------------------------------------ per-seed context


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass
class SeedContext:
    seed: int
    dataset: PairedDataset
    splits: DatasetSplits
    old: EncoderModel
    head: TaskHead
    new: EncoderModel
    positions: PositionSelection | None = None
    timings: dict[str, float] = field(default_factory=dict)


def _task_spec(cfg: ExperimentConfig) -> LatentTaskSpec:
    d = cfg.data
    return LatentTaskSpec(n_classes=d.n_classes, latent_dim=d.latent_dim, class_separation=d.class_separation,
                          noise=d.noise, subject_shift=d.subject_shift,
                          samples_per_subject=d.samples_per_subject, n_subjects=d.n_subjects)


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[PairedDataset, DatasetSplits]:
    if cfg.data.path:
        ds, splits = read_dataset(cfg.data.path)
        if splits is None:
            splits = split_dataset(ds, DEFAULT_RATIOS, seed, cfg.data.split_mode)
    else:
        ds = generate_paired_dataset(_task_spec(cfg), DEFAULT_OLD_MODALITY, DEFAULT_NEW_MODALITY, seed)
        splits = split_dataset(ds, DEFAULT_RATIOS, seed, cfg.data.split_mode)
    if cfg.data.pair_fraction < 1:
        splits = subsample_pair_fraction(splits, cfg.data.pair_fraction, derive_seed(seed, 13))
    return ds, splits


def prepare_seed(cfg: ExperimentConfig, seed: int, cache_dir=None) -> SeedContext:
    """Data, the frozen old-modality teacher and the frozen new-modality encoder for one seed.

    With ``cache_dir``, encoders are loaded from ``seed-<n>/{old,new}.mbck``
    when present and saved there after training otherwise.
    """
    ds, splits = load_data(cfg, seed)
    timings = {}
    old_path = new_path = None
    if cache_dir is not None:
        root = Path(cache_dir) / f"seed-{seed}"
        old_path, new_path = root / "old.mbck", root / "new.mbck"
    if old_path is not None and old_path.exists() and new_path.exists():
        old, head, _ = load_checkpoint(old_path)
        new, _, _ = load_checkpoint(new_path)
        return SeedContext(seed, ds, splits, old, head, new, timings=timings)

    start = time.perf_counter()
    old_shape = ds.x_old.shape[1:]
    new_shape = ds.x_new.shape[1:]
    old = build_encoder(cfg.models.old_arch, old_shape, ds.mod_old.name, derive_seed(seed, 1))
    head = TaskHead(old.layer_shapes()[-1][1], ds.task.n_classes, seed=derive_seed(seed, 2))
    pretrain_supervised(old, head, splits.old.x_old, splits.old.labels, cfg.models.teacher_epochs,
                        cfg.models.lr, cfg.models.batch_size, derive_seed(seed, 4))
    timings["teacher"] = time.perf_counter() - start

    start = time.perf_counter()
    new = build_encoder(cfg.models.new_arch, new_shape, ds.mod_new.name, derive_seed(seed, 3))
    x_corpus, z_corpus = generate_pretraining_corpus(ds.task, ds.mod_new, "new", ds.seed,
                                                     n=cfg.models.pretrain_corpus)
    pretrain_regression(new, x_corpus, z_corpus, cfg.models.pretrain_epochs, cfg.models.lr,
                        cfg.models.batch_size, derive_seed(seed, 5))
    timings["new_pretrain"] = time.perf_counter() - start

    if old_path is not None:
        old_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(old_path, old, head)
        save_checkpoint(new_path, new)
    return SeedContext(seed, ds, splits, old, head, new, timings=timings)


def select_positions(cfg: ExperimentConfig, ctx: SeedContext, splits: DatasetSplits | None = None) -> PositionSelection:
    """Two-stage choice of (m, l) on the paired split; cached on ``ctx`` for its own splits."""
    own = splits is None
    if own and ctx.positions is not None:
        return ctx.positions
    splits = ctx.splits if own else splits
    pair = splits.pair
    pseudo = pseudo_labels(ctx.old, ctx.head, pair.x_old)
    probe = select_input_position(ctx.new, pair.x_new, pseudo, cfg.bridge.probe_folds, cfg.bridge.probe_l2,
                                  derive_seed(ctx.seed, 6))
    h_m = prefix_reps(ctx.new, pair.x_new, probe.m)
    l, cka = select_output_position(h_m, ctx.old, pair.x_old, cfg.bridge.cka_cap, derive_seed(ctx.seed, 7),
                                    cfg.bridge.objective)
    sel = PositionSelection(probe.m, l, cka, probe.scores, cfg.bridge.objective)
    if own:
        ctx.positions = sel
    return sel


# ------------------------------------------------------------------ methods


@dataclass
class MethodResult:
    method: str
    seed: int
    input_modality: str
    metrics: MetricSet
    params: int
    m: int | None = None
    l: int | None = None
    history: dict | None = None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"seed": self.seed, "metrics": self.metrics.to_dict() if self.metrics else None,
                "params": self.params, "m": self.m, "l": self.l, "history": self.history, "status": self.status}


def _history_summary(losses: list[float]) -> dict:
    if not losses:
        return {"epochs": 0, "first_loss": None, "final_loss": None}
    return {"epochs": len(losses), "first_loss": float(losses[0]), "final_loss": float(losses[-1])}


def kd_student_param_count(ctx: SeedContext) -> int:
    """Trainable parameters of the KD student: the full new encoder plus a fresh head."""
    return ctx.new.param_count() + (ctx.new.layer_shapes()[-1][1] + 1) * ctx.head.n_classes


def fit_bridge(cfg: ExperimentConfig, ctx: SeedContext, positions: tuple[int, int] | None = None,
               rank: int | None = None, prototypes: int | None = None,
               splits: DatasetSplits | None = None) -> tuple[BridgedModel, dict]:
    splits = ctx.splits if splits is None else splits
    if positions is None:
        sel = select_positions(cfg, ctx, None if splits is ctx.splits else splits)
        positions = (sel.m, sel.l)
    m, l = positions
    pair = splits.pair
    d_in = ctx.new.layer_shapes()[m - 1][1]
    n_out, d_out = ctx.old.layer_shapes()[l - 1]
    spec = BridgeShapeSpec(d_in, n_out, d_out, rank or cfg.bridge.rank, prototypes or cfg.bridge.prototypes,
                           cfg.bridge.pool)
    train_seed = derive_seed(ctx.seed, 9)
    old_reps = None
    if cfg.bridge.init == "prototype-from-old":
        # prototypes come from the teacher's layer-l tokens on the first training batch
        first = next(iterate_minibatches(len(pair), cfg.bridge.batch_size, np.random.default_rng(train_seed)))
        old_reps = prefix_reps(ctx.old, pair.x_old[first], l)
    bridge = init_bridge(spec, cfg.bridge.init, old_reps, derive_seed(ctx.seed, 8))
    bridge, history = train_bridge(ctx.old, ctx.new, pair.x_old, pair.x_new, positions, bridge,
                                   cfg.bridge.epochs, cfg.bridge.lr, cfg.bridge.loss, cfg.bridge.batch_size,
                                   train_seed)
    return BridgedModel(ctx.old, ctx.new, ctx.head, bridge, m, l), _history_summary(history.losses)


def run_method(cfg: ExperimentConfig, ctx: SeedContext, method: str) -> MethodResult:
    """Train (if needed) and evaluate one method on the held-out new-modality split."""
    test = ctx.splits.new
    y = test.eval_labels()
    k = ctx.dataset.task.n_classes
    mod_new, mod_old = ctx.dataset.mod_new.name, ctx.dataset.mod_old.name
    bl = cfg.baseline
    pair = ctx.splits.pair
    if method == "bridge":
        return bridge_result(ctx, method, *fit_bridge(cfg, ctx))
    if method == "kd":
        student, history = train_kd(ctx.new, ctx.old, ctx.head, pair.x_old, pair.x_new, bl.epochs, bl.lr,
                                    bl.batch_size, derive_seed(ctx.seed, 10), bl.temperature)
        pred = student.predict_proba(test.x_new).argmax(axis=1)
        return MethodResult(method, ctx.seed, mod_new, evaluate(y, pred, k), student.trainable_param_count(),
                            history=_history_summary(history.losses))
    if method == "kd-contrast":
        student, history = train_kd_contrast(ctx.new, ctx.old, ctx.head, pair.x_old, pair.x_new, bl.tau,
                                             bl.epochs, bl.lr, bl.batch_size, derive_seed(ctx.seed, 11))
        pred = student.predict_proba(test.x_new).argmax(axis=1)
        return MethodResult(method, ctx.seed, mod_new, evaluate(y, pred, k), student.trainable_param_count(),
                            history=_history_summary(history.losses))
    if method == "random":
        pred = random_baseline(k, len(y), derive_seed(ctx.seed, 12))
        return MethodResult(method, ctx.seed, mod_new, evaluate(y, pred, k), 0)
    if method == "oracle":
        pred = np.concatenate([predict(ctx.old, ctx.head, test.x_old[i : i + 256]).argmax(axis=1)
                               for i in range(0, len(test), 256)])
        params = ctx.old.param_count() + sum(p.data.size for p in ctx.head.parameters())
        return MethodResult(method, ctx.seed, mod_old, evaluate(y, pred, k), params)
    raise ConfigError(f"unknown method {method!r}")


# ------------------------------------------------------------------ reports


def _fmt_positions(values) -> int | str | None:
    values = [v for v in values if v is not None]
    if not values:
        return None
    return values[0] if len(set(values)) == 1 else ";".join(str(v) for v in values)


@dataclass
class TransferReport:
    """One method's metrics aggregated over seeds."""

    method: str
    input_modality: str
    seeds: list[int]
    bacc_mean: float | None
    bacc_std: float | None
    f1m_mean: float | None
    f1m_std: float | None
    f1w_mean: float | None
    f1w_std: float | None
    params: int
    m: int | str | None
    l: int | str | None
    per_seed: list[dict] = field(default_factory=list)
    status: str = "ok"

    @classmethod
    def aggregate(cls, method: str, results: list[MethodResult]) -> "TransferReport":
        done = [r for r in results if r.status == "ok"]
        stats = {}
        for key, attr in (("bacc", "balanced_accuracy"), ("f1m", "f1_macro"), ("f1w", "f1_weighted")):
            vals = np.array([getattr(r.metrics, attr) for r in done])
            stats[f"{key}_mean"] = float(vals.mean()) if len(vals) else None
            stats[f"{key}_std"] = float(vals.std()) if len(vals) >= 2 else None
        status = "ok" if len(done) == len(results) else ("partial" if done else "failed")
        return cls(method, results[0].input_modality, [r.seed for r in results], **stats,
                   params=max((r.params for r in results), default=0),
                   m=_fmt_positions([r.m for r in results]), l=_fmt_positions([r.l for r in results]),
                   per_seed=[r.to_dict() for r in results], status=status)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ExperimentReport:
    name: str
    rows: list[TransferReport]
    checks: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # wall-clock data, never part of the report bytes

    def row(self, method: str) -> TransferReport:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


REPORT_FORMATS = {"json-lines": "report.jsonl", "csv": "report.csv", "text-table": "report.txt"}


def report_to_jsonl(report: ExperimentReport) -> str:
    lines = [json.dumps({"kind": "experiment", "name": report.name, "checks": report.checks, "grid": report.grid,
                         "config": report.config}, sort_keys=True)]
    lines += [json.dumps({"kind": "row", **r.to_dict()}, sort_keys=True) for r in report.rows]
    return "\n".join(lines) + "\n"


def report_from_jsonl(text: str) -> ExperimentReport:
    report = None
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("kind")
        if kind == "experiment":
            report = ExperimentReport(rec["name"], [], rec["checks"], rec["grid"], rec["config"])
        else:
            rows.append(TransferReport(**rec))
    if report is None:
        raise ValueError("report has no experiment header line")
    report.rows = rows
    return report


def report_to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        d = r.to_dict()
        d["seeds"] = len(r.seeds)
        writer.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c])
                         for c in CSV_COLUMNS])
    return buf.getvalue()


def _pct(mean, std) -> str:
    if mean is None:
        return "-"
    return f"{100 * mean:.2f}" + ("" if std is None else f" ± {100 * std:.2f}")


def report_to_text(report: ExperimentReport) -> str:
    header = ("method", "input", "BAcc", "F1-macro", "F1-weighted", "params", "m", "l")
    body = [(r.method, r.input_modality, _pct(r.bacc_mean, r.bacc_std), _pct(r.f1m_mean, r.f1m_std),
             _pct(r.f1w_mean, r.f1w_std), str(r.params), str(r.m or "-"), str(r.l or "-")) for r in report.rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(tuple("-" * w for w in widths))] + [fmt(row) for row in body]
    for key, value in report.checks.items():
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


RENDERERS: dict[str, Callable[[ExperimentReport], str]] = {
    "json-lines": report_to_jsonl, "csv": report_to_csv, "text-table": report_to_text,
}


def export_report(report: ExperimentReport, out_dir, formats=tuple(REPORT_FORMATS)) -> list[Path]:
    """Write the report in each format plus ``meta.json`` with timings. Returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        if fmt not in RENDERERS:
            raise ValueError(f"unknown report format {fmt!r}; choose from {sorted(RENDERERS)}")
        path = out / REPORT_FORMATS[fmt]
        path.write_text(RENDERERS[fmt](report))
        paths.append(path)
    meta = {"name": report.name, "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **report.meta}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return paths


# ------------------------------------------------------------------ orchestration


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _get_context(cfg, seed, contexts, cache_dir):
    if contexts is not None and seed in contexts:
        return contexts[seed]
    ctx = prepare_seed(cfg, seed, cache_dir)
    if contexts is not None:
        contexts[seed] = ctx
    return ctx


def _map_seeds(job: Callable, cfg: ExperimentConfig, contexts: dict | None, cache_dir) -> list:
    """Run ``job(cfg, ctx)`` for each seed; worker processes are used when no contexts are shared."""
    seeds = cfg.seed_list()
    workers = worker_count()
    if workers > 1 and contexts is None and len(seeds) > 1:
        with ProcessPoolExecutor(min(workers, len(seeds))) as pool:
            return list(pool.map(_seed_job, [job] * len(seeds), [cfg] * len(seeds), seeds,
                                 [cache_dir] * len(seeds)))
    return [job(cfg, _get_context(cfg, s, contexts, cache_dir)) for s in seeds]


def _seed_job(job, cfg, seed, cache_dir):
    return job(cfg, prepare_seed(cfg, seed, cache_dir))


def _with_failure_manifest(cfg: ExperimentConfig, name: str, body: Callable[[], ExperimentReport]) -> ExperimentReport:
    start = time.perf_counter()
    try:
        report = body()
    except Exception as exc:
        if cfg.run.out:
            out = Path(cfg.run.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "failure.json").write_text(json.dumps(
                {"experiment": name, "error": type(exc).__name__, "message": str(exc)}, indent=1))
        raise
    report.meta["seconds"] = time.perf_counter() - start
    if cfg.run.out:
        export_report(report, cfg.run.out)
    return report


def _methods_job(cfg: ExperimentConfig, ctx: SeedContext) -> tuple[list[MethodResult], int]:
    return [run_method(cfg, ctx, m) for m in cfg.run.methods], kd_student_param_count(ctx)


def run_experiment(cfg: ExperimentConfig, contexts: dict | None = None, cache_dir=None) -> ExperimentReport:
    """Every configured method on every seed, aggregated into one report.

    ``contexts`` (seed -> SeedContext) lets callers reuse pretrained models
    across experiments; missing seeds are prepared and stored in it.
    """

    def body():
        per_seed = _map_seeds(_methods_job, cfg, contexts, cache_dir)
        rows = [TransferReport.aggregate(m, [res[i] for res, _ in per_seed]) for i, m in enumerate(cfg.run.methods)]
        report = ExperimentReport("evaluate", rows, config=cfg.to_dict())
        if "bridge" in cfg.run.methods:
            kd_params = max(n for _, n in per_seed)
            ratio = report.row("bridge").params / kd_params
            report.checks = {"bridge_params": report.row("bridge").params, "kd_student_params": kd_params,
                             "bridge_to_kd_param_ratio": ratio, "param_budget": PARAM_BUDGET,
                             "param_budget_ok": bool(ratio < PARAM_BUDGET)}
        return report

    return _with_failure_manifest(cfg, "evaluate", body)


def bridge_result(ctx: SeedContext, label: str, model: BridgedModel, history: dict) -> MethodResult:
    """Evaluate a trained bridge on the held-out new-modality split."""
    test = ctx.splits.new
    pred = model.predict_proba(test.x_new).argmax(axis=1)
    return MethodResult(label, ctx.seed, ctx.dataset.mod_new.name,
                        evaluate(test.eval_labels(), pred, ctx.dataset.task.n_classes),
                        model.trainable_param_count(), model.m, model.l, history)


def _bridge_result(cfg, ctx, label, **kwargs) -> MethodResult:
    try:
        model, hist = fit_bridge(cfg, ctx, **kwargs)
    except (ArithmeticError, RuntimeError) as exc:
        log.warning("%s failed on seed %d: %s", label, ctx.seed, exc)
        return MethodResult(label, ctx.seed, ctx.dataset.mod_new.name, None, 0, status="failed")
    return bridge_result(ctx, label, model, hist)


def _cells_job(cells, cfg, ctx):
    return [_bridge_result(cfg, ctx, label, **kw) for label, kw in cells]


def _cell_report(cfg, name, cells, contexts, cache_dir) -> ExperimentReport:
    per_seed = _map_seeds(partial(_cells_job, cells), cfg, contexts, cache_dir)
    rows = [TransferReport.aggregate(label, [res[i] for res in per_seed]) for i, (label, _) in enumerate(cells)]
    report = ExperimentReport(name, rows, config=cfg.to_dict())
    report.grid = {r.method: r.bacc_mean for r in rows}
    return report


def rank_ablation(cfg: ExperimentConfig, contexts=None, cache_dir=None) -> ExperimentReport:
    cells = [(f"bridge[r={r}]", {"rank": r}) for r in cfg.run.ranks]
    return _with_failure_manifest(cfg, "ablate-rank",
                                  lambda: _cell_report(cfg, "ablate-rank", cells, contexts, cache_dir))


def prototype_ablation(cfg: ExperimentConfig, contexts=None, cache_dir=None) -> ExperimentReport:
    cells = [(f"bridge[Np={n}]", {"prototypes": n}) for n in cfg.run.prototype_counts]
    return _with_failure_manifest(cfg, "ablate-prototypes",
                                  lambda: _cell_report(cfg, "ablate-prototypes", cells, contexts, cache_dir))


def _pairsize_job(cfg, ctx):
    out = []
    for frac in cfg.run.pair_fractions:
        splits = ctx.splits if frac == 1 else subsample_pair_fraction(ctx.splits, frac, derive_seed(ctx.seed, 13))
        out.append(_bridge_result(cfg, ctx, f"bridge[pair={frac:g}]", splits=splits))
    return out


def pair_fraction_ablation(cfg: ExperimentConfig, contexts=None, cache_dir=None) -> ExperimentReport:
    """Bridge retrained (positions re-selected) on shrinking paired sets."""

    def body():
        per_seed = _map_seeds(_pairsize_job, cfg, contexts, cache_dir)
        labels = [f"bridge[pair={f:g}]" for f in cfg.run.pair_fractions]
        rows = [TransferReport.aggregate(label, [res[i] for res in per_seed]) for i, label in enumerate(labels)]
        report = ExperimentReport("ablate-pairsize", rows, config=cfg.to_dict())
        report.grid = {r.method: r.bacc_mean for r in rows}
        return report

    return _with_failure_manifest(cfg, "ablate-pairsize", body)


def fixed_positions(n_new: int, n_old: int) -> list[tuple[int, int]]:
    """{first, middle, last} x {first, middle, last} with middle = ceil(count / 2)."""
    if n_new < 3 or n_old < 3:
        raise ValueError("fixed-position ablation needs at least 3 layers in each model")
    pick = lambda n: (1, math.ceil(n / 2), n)  # noqa: E731
    return [(m, l) for m in pick(n_new) for l in pick(n_old)]



def _positions_job(cfg, ctx):
    cells = [(f"bridge[m={m},l={l}]", {"positions": (m, l)})
             for m, l in fixed_positions(ctx.new.layer_count, ctx.old.layer_count)]
    results = [_bridge_result(cfg, ctx, label, **kw) for label, kw in cells]
    done = [r for r in results if r.status == "ok"]
    avg = MethodResult("fixed-average", ctx.seed, ctx.dataset.mod_new.name, None, 0,
                       status="ok" if done else "failed")
    if done:
        mean = lambda attr: float(np.mean([getattr(r.metrics, attr) for r in done]))  # noqa: E731
        avg.metrics = MetricSet(mean("balanced_accuracy"), mean("f1_macro"), mean("f1_weighted"), [], [], [])
        avg.params = max(r.params for r in done)
    selected = _bridge_result(cfg, ctx, "bridge[selected]")
    return results + [avg, selected]


def fixed_position_ablation(cfg: ExperimentConfig, contexts=None, cache_dir=None) -> ExperimentReport:
    """Nine fixed (m, l) cells, their average, and the selected-position bridge."""

    def body():
        per_seed = _map_seeds(_positions_job, cfg, contexts, cache_dir)
        labels = [r.method for r in per_seed[0]]
        rows = [TransferReport.aggregate(label, [res[i] for res in per_seed]) for i, label in enumerate(labels)]
        report = ExperimentReport("ablate-positions", rows, config=cfg.to_dict())
        report.grid = {r.method: r.bacc_mean for r in rows}
        sel, avg = report.row("bridge[selected]").bacc_mean, report.row("fixed-average").bacc_mean
        if sel is not None and avg is not None:
            report.checks = {"selected_minus_fixed_average": sel - avg}
        return report

    return _with_failure_manifest(cfg, "ablate-positions", body)


ABLATIONS = {"rank": rank_ablation, "prototypes": prototype_ablation, "pairsize": pair_fraction_ablation,
             "positions": fixed_position_ablation}
