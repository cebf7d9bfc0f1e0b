"""Configuration-driven experiment runner.

Three evaluation protocols over one dataset: the full encoder × strategy grid
(25 base cells plus 6 component cells = 31), the reduced encoder search
(5 Input-fusion cells, then 11 follow-up cells with the winning encoder, one
of which reuses a phase-1 result = 16 cells, 15 trainings per repetition),
and per-view single-model baselines.

A run record is one CSV row per (cell, repetition): identity columns, seed,
config fingerprint, status, and the metrics report. Wall-clock seconds live in
a parallel timing table (``reports/timings.csv``) so ``records.csv`` is byte
reproducible for identical (config, seed base) inputs. Every run directory
holds ``manifest``, ``records.csv``, ``checkpoints/`` and ``reports/``.
"""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from time import perf_counter

import numpy as np

from . import __version__
from .data import Dataset, load_dataset, stratified_split
from .encoders import EncoderConfig, build_encoder
from .errors import ConfigError
from .fusion import (
    _DEFAULT_MERGE,
    STRATEGIES,
    EnsembleModel,
    PredictionHead,
    build_model,
)
from .kernels import active_backend
from .metrics import evaluate, grouped_report
from .rngutil import rep_seed
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    train_ensemble,
)
from .views import canonical_schema

GRID_ENCODERS = ("LSTM", "GRU", "TempCNN", "TAE", "LTAE")
COMPONENT_STRATEGIES = ("Feature", "Decision", "Hybrid")
COMPONENTS = ("gfusion", "multiloss")
GRID_CELL_COUNT = 31
SEARCH_CELL_COUNT = 16

_SELECTION_METRICS = ("kappa", "average_accuracy", "f1_macro")
_MERGE_KINDS = ("concat", "average", "gated")
_TASKS = ("binary", "multicrop")

RECORD_COLUMNS = (
    "cell", "phase", "view", "encoder", "strategy", "component", "merge",
    "repetition", "seed", "fingerprint", "status", "error", "parameters",
    "samples", "average_accuracy", "kappa", "f1_macro", "f1_positive",
    "auc_roc", "max_probability", "prediction_entropy", "checkpoint",
)

_METRIC_FIELDS = (
    "average_accuracy", "kappa", "f1_macro", "f1_positive", "auc_roc",
    "max_probability", "prediction_entropy",
)

SUMMARY_COLUMNS = (
    "cell", "phase", "view", "encoder", "strategy", "component",
    "parameters", "reps_total", "reps_ok", "reps_failed",
    "average_accuracy_mean", "average_accuracy_std",
    "kappa_mean", "kappa_std",
    "f1_macro_mean", "f1_macro_std",
    "f1_positive_mean", "f1_positive_std",
    "auc_roc_mean", "auc_roc_std",
    "max_probability_mean", "max_probability_std",
    "prediction_entropy_mean", "prediction_entropy_std",
)

_INT_FIELDS = frozenset({"repetition", "seed", "parameters", "samples"})
_FLOAT_FIELDS = frozenset(_METRIC_FIELDS)

_PREDICTION_METADATA = ("latitude", "longitude", "year", "continent",
                        "country")


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellSpec:
    """One experiment cell: encoder × strategy × optional component."""

    encoder: str
    strategy: str
    component: str = "none"
    phase: str = ""
    view: str = ""

    @property
    def label(self) -> str:
        text = f"{self.encoder}/{self.strategy}"
        if self.component != "none":
            text += f"+{self.component}"
        if self.view:
            text += f"[{self.view}]"
        return text

    @property
    def slug(self) -> str:
        return (self.label.replace("/", "_").replace("+", "_")
                .replace("[", "_").replace("]", ""))


def grid_cells(component_encoder: str) -> tuple[CellSpec, ...]:
    """The full protocol: every encoder × strategy pair, then the two
    components over the three strategies that accept them."""
    cells = [CellSpec(enc, strat)
             for enc in GRID_ENCODERS for strat in STRATEGIES]
    cells += [CellSpec(component_encoder, strat, comp)
              for comp in COMPONENTS for strat in COMPONENT_STRATEGIES]
    assert len(cells) == GRID_CELL_COUNT, len(cells)
    return tuple(cells)


def search_cells(winner: str) -> tuple[CellSpec, ...]:
    """The reduced protocol: Input fusion over all encoders, then every
    strategy and component with the winning encoder."""
    cells = [CellSpec(enc, "Input", phase="phase1") for enc in GRID_ENCODERS]
    cells += [CellSpec(winner, strat, phase="phase2")
              for strat in STRATEGIES]
    cells += [CellSpec(winner, strat, comp, phase="phase2")
              for comp in COMPONENTS for strat in COMPONENT_STRATEGIES]
    assert len(cells) == SEARCH_CELL_COUNT, len(cells)
    return tuple(cells)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; JSON round-trippable via to/from_dict."""

    dataset: str = ""
    task: str = "binary"
    views: tuple = ()
    encoder: str = "GRU"
    strategy: str = "Feature"
    component: str = "none"
    merge: str | None = None
    gamma: float = 0.3
    repetitions: int = 20
    seed_base: int = 0
    jobs: int = 1
    test_fraction: float = 0.3
    selection_metric: str = "kappa"
    component_encoder: str = "best"
    group_by: tuple = ("year", "continent")
    encoder_options: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/run"

    def __post_init__(self) -> None:
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "group_by", tuple(self.group_by))
        object.__setattr__(self, "encoder_options",
                           dict(self.encoder_options))
        if self.task not in _TASKS:
            raise ConfigError(f"unknown task {self.task!r}; known: {_TASKS}")
        if self.encoder not in GRID_ENCODERS:
            raise ConfigError(
                f"unknown encoder {self.encoder!r}; known: {GRID_ENCODERS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; known: {STRATEGIES}")
        if self.component not in ("none",) + COMPONENTS:
            raise ConfigError(
                f"unknown component {self.component!r}; "
                f"known: {('none',) + COMPONENTS}")
        if (self.component != "none"
                and self.strategy not in COMPONENT_STRATEGIES):
            raise ConfigError(
                f"component {self.component!r} attaches only to "
                f"{COMPONENT_STRATEGIES}, not {self.strategy!r}")
        if self.merge is not None and self.merge not in _MERGE_KINDS:
            raise ConfigError(
                f"unknown merge {self.merge!r}; known: {_MERGE_KINDS}")
        if self.strategy == "Ensemble" and self.merge not in (None, "average"):
            raise ConfigError("ensembles always average member predictions")
        if self.component == "gfusion" and self.merge not in (None, "gated"):
            raise ConfigError(
                f"gated-merge component conflicts with merge={self.merge!r}")
        if self.gamma < 0:
            raise ConfigError(
                f"auxiliary loss weight must be >= 0, got {self.gamma}")
        if self.repetitions < 1:
            raise ConfigError(
                f"repetitions must be >= 1, got {self.repetitions}")
        if self.seed_base < 0:
            raise ConfigError(f"seed base must be >= 0, got {self.seed_base}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(
                f"test fraction must lie in (0, 1), got {self.test_fraction}")
        if self.selection_metric not in _SELECTION_METRICS:
            raise ConfigError(
                f"unknown selection metric {self.selection_metric!r}; "
                f"known: {_SELECTION_METRICS}")
        if (self.component_encoder != "best"
                and self.component_encoder not in GRID_ENCODERS):
            raise ConfigError(
                f"component encoder must be 'best' or one of {GRID_ENCODERS},"
                f" got {self.component_encoder!r}")
        if not all(isinstance(v, str) for v in self.views):
            raise ConfigError("views must be view names")
        if not all(isinstance(k, str) for k in self.group_by):
            raise ConfigError("group_by must be metadata field names")
        if not isinstance(self.train, TrainConfig):
            raise ConfigError("train must be a TrainConfig")
        # Surfaces unknown option names and invalid widths immediately.
        self._encoder_config(self.encoder)

    def _encoder_config(self, architecture: str) -> EncoderConfig:
        try:
            return EncoderConfig(architecture=architecture,
                                 **self.encoder_options)
        except TypeError as exc:
            raise ConfigError(f"unknown encoder option: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "task": self.task,
            "views": list(self.views),
            "encoder": self.encoder,
            "strategy": self.strategy,
            "component": self.component,
            "merge": self.merge,
            "gamma": self.gamma,
            "repetitions": self.repetitions,
            "seed_base": self.seed_base,
            "jobs": self.jobs,
            "test_fraction": self.test_fraction,
            "selection_metric": self.selection_metric,
            "component_encoder": self.component_encoder,
            "group_by": list(self.group_by),
            "encoder_options": dict(self.encoder_options),
            "train": asdict(self.train),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a mapping")
        payload = dict(data)
        train_data = payload.pop("train", None)
        if train_data is not None:
            if not isinstance(train_data, dict):
                raise ConfigError("train must be a mapping")
            try:
                payload["train"] = TrainConfig(**train_data)
            except TypeError as exc:
                raise ConfigError(f"unknown train option: {exc}") from None
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"unknown config key: {exc}") from None

    def fingerprint(self, dataset_hash: str = "") -> str:
        """Stable hash of the canonicalized config.

        Paths and the parallelism degree never change what gets computed, so
        they are excluded; the dataset enters through its content hash.
        """
        payload = self.to_dict()
        for key in ("dataset", "output_dir", "jobs"):
            payload.pop(key)
        payload["dataset_hash"] = dataset_hash
        canonical = json.dumps(payload, sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def dataset_fingerprint(dataset: Dataset) -> str:
    """Content hash over schemas, arrays, labels, and metadata."""
    digest = hashlib.sha256()
    digest.update(f"{dataset.task}/{dataset.classes}".encode())
    for schema in dataset.schemas:
        digest.update(
            f"{schema.name}/{schema.temporal}/{schema.channels}/"
            f"{schema.steps}".encode())
        digest.update(np.ascontiguousarray(
            dataset.arrays[schema.name]).tobytes())
    digest.update(dataset.labels.tobytes())
    for key in sorted(dataset.metadata):
        values = dataset.metadata[key]
        digest.update(key.encode())
        if values.dtype.kind == "U":
            digest.update("\x1f".join(values.tolist()).encode())
        else:
            digest.update(values.tobytes())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# selection rules
# ---------------------------------------------------------------------------


def _mean_metric(rows: list, metric: str) -> float | None:
    values = [row[metric] for row in rows if row[metric] is not None]
    return float(np.mean(values)) if values else None


def _ok_groups(rows, key) -> dict:
    """Successful rows grouped by ``key(row)`` in first-seen order.

    Reused rows duplicate a phase-1 result and are excluded so no cell is
    counted twice.
    """
    groups: dict = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        groups.setdefault(key(row), []).append(row)
    return groups


def _min_parameters(rows: list) -> int:
    values = [row["parameters"] for row in rows
              if row["parameters"] is not None]
    return min(values) if values else 1 << 62


def _select(candidates: list) -> str:
    """argmax of (mean metric, then lower parameter count, then order).

    ``candidates`` holds (name, mean, parameters) with None means excluded.
    """
    best = None
    for name, mean, parameters in candidates:
        if mean is None:
            continue
        if (best is None or mean > best[1]
                or (mean == best[1] and parameters < best[2])):
            best = (name, mean, parameters)
    if best is None:
        raise ConfigError("no successful repetitions to select from")
    return best[0]


def best_cell_label(rows: list, metric: str) -> str:
    """Cell with the best mean metric over its successful repetitions."""
    groups = _ok_groups(rows, lambda row: row["cell"])
    return _select([(label, _mean_metric(group, metric),
                     _min_parameters(group))
                    for label, group in groups.items()])


def best_encoder(rows: list, metric: str) -> str:
    """Encoder with the best mean metric pooled over its successful rows.

    Ties break toward the encoder whose Input-fusion cell is smaller.
    """
    groups = _ok_groups(rows, lambda row: row["encoder"])
    candidates = []
    for encoder, group in groups.items():
        inputs = [row for row in group if row["strategy"] == "Input"]
        candidates.append((encoder, _mean_metric(group, metric),
                           _min_parameters(inputs or group)))
    return _select(candidates)


# ---------------------------------------------------------------------------
# records CSV
# ---------------------------------------------------------------------------


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for row in rows:
            writer.writerow([_format_value(row[col])
                             for col in RECORD_COLUMNS])


def read_records_csv(path) -> list:
    rows = []
    with open(path, newline="") as handle:
        for raw in csv.DictReader(handle):
            row = {}
            for column in RECORD_COLUMNS:
                text = raw[column]
                if column in _INT_FIELDS:
                    row[column] = int(text) if text else None
                elif column in _FLOAT_FIELDS:
                    row[column] = float(text) if text else None
                else:
                    row[column] = text
            rows.append(row)
    return rows


def summarize(rows: list) -> list:
    """Per-cell mean/std (population) over successful repetitions.

    The oracle property: running this over ``records.csv`` reproduces the
    stored summary exactly.
    """
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["phase"], row["cell"], row["view"]),
                          []).append(row)
    summary = []
    for (phase, label, view), group in groups.items():
        scored = [row for row in group if row["status"] in ("ok", "reused")]
        first = group[0]
        entry = {
            "cell": label,
            "phase": phase,
            "view": view,
            "encoder": first["encoder"],
            "strategy": first["strategy"],
            "component": first["component"],
            "parameters": next((row["parameters"] for row in group
                                if row["parameters"] is not None), None),
            "reps_total": len(group),
            "reps_ok": len(scored),
            "reps_failed": sum(row["status"] == "error" for row in group),
        }
        for metric in _METRIC_FIELDS:
            values = [row[metric] for row in scored
                      if row[metric] is not None]
            entry[f"{metric}_mean"] = (float(np.mean(values))
                                       if values else None)
            entry[f"{metric}_std"] = (float(np.std(values))
                                      if values else None)
        summary.append(entry)
    return summary


# ---------------------------------------------------------------------------
# execution engine
# ---------------------------------------------------------------------------


def _effective_merge(cell: CellSpec, merge_override: str | None) -> str:
    if cell.strategy == "Ensemble":
        return "average"
    if cell.component == "gfusion":
        return "gated"
    return merge_override or _DEFAULT_MERGE[cell.strategy]


def _build_cell_model(cell: CellSpec, config: ExperimentConfig,
                      dataset: Dataset, merge_override: str | None):
    encoder_config = config._encoder_config(cell.encoder)
    component = None if cell.component == "none" else cell.component
    return build_model(
        list(dataset.schemas), cell.strategy, encoder_config,
        classes=dataset.classes, merge=merge_override,
        component=component, gamma=config.gamma)


def _predict_all(model, dataset: Dataset, batch_size: int) -> np.ndarray:
    parts = []
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        batch = {name: dataset.arrays[name][start:stop]
                 for name in dataset.view_names}
        parts.append(model.predict(batch))
    return np.concatenate(parts, axis=0)


def _fit(cell: CellSpec, model, dataset: Dataset,
         config: TrainConfig) -> float:
    """Train one model; returns training wall-clock seconds."""
    if isinstance(model, EnsembleModel):
        results = train_ensemble(model, dataset, config)
        return float(sum(res.wall_clock for res in results.values()))
    return float(train(model, dataset, config).wall_clock)


def _error_text(exc: Exception) -> str:
    text = f"{type(exc).__name__}: {exc}"
    return " ".join(text.split())


def _run_one(cell: CellSpec, rep: int, data, config: ExperimentConfig,
             fingerprint: str, out_dir: Path,
             merge_override: str | None) -> tuple:
    train_ds, test_ds = data
    seed = rep_seed(config.seed_base, rep)
    merge = _effective_merge(cell, merge_override)
    parameters = None
    report = None
    checkpoint = ""
    train_seconds = 0.0
    infer_seconds = 0.0
    status, error = "ok", ""
    try:
        model = _build_cell_model(cell, config, train_ds, merge_override)
        parameters = model.parameter_count()
        model.initialize(seed)
        train_seconds = _fit(cell, model, train_ds,
                             replace(config.train, seed=seed))
        started = perf_counter()
        probabilities = _predict_all(model, test_ds,
                                     config.train.batch_size)
        infer_seconds = perf_counter() - started
        report = evaluate(test_ds.labels, probabilities, test_ds.classes)
        checkpoint = f"checkpoints/{cell.slug}-rep{rep:02d}.mvlc"
        save_checkpoint(model, out_dir / checkpoint, extra={
            "cell": cell.label, "phase": cell.phase, "repetition": rep,
            "seed": seed, "fingerprint": fingerprint})
    except Exception as exc:  # crash isolation: siblings keep running
        status, error = "error", _error_text(exc)
        report = None
        checkpoint = ""

    def metric(name):
        if report is None:
            return None
        value = getattr(report, name)
        return None if value is None else float(value)

    row = {
        "cell": cell.label, "phase": cell.phase, "view": cell.view,
        "encoder": cell.encoder, "strategy": cell.strategy,
        "component": cell.component, "merge": merge,
        "repetition": rep, "seed": seed, "fingerprint": fingerprint,
        "status": status, "error": error, "parameters": parameters,
        "samples": None if report is None else int(report.samples),
        "average_accuracy": metric("average_accuracy"),
        "kappa": metric("kappa"),
        "f1_macro": metric("f1_macro"),
        "f1_positive": metric("f1_positive"),
        "auc_roc": metric("auc_roc"),
        "max_probability": metric("max_probability"),
        "prediction_entropy": metric("prediction_entropy"),
        "checkpoint": checkpoint,
    }
    timing = {"cell": cell.label, "phase": cell.phase, "view": cell.view,
              "repetition": rep, "status": status,
              "train_seconds": train_seconds,
              "infer_seconds": infer_seconds}
    return row, timing


def _execute(cells, data_by_label: dict, config: ExperimentConfig,
             out_dir: Path, fingerprint: str,
             merge_override: str | None) -> tuple:
    tasks = [(index, cell, rep)
             for index, cell in enumerate(cells)
             for rep in range(config.repetitions)]

    def work(task):
        index, cell, rep = task
        row, timing = _run_one(cell, rep, data_by_label[cell.label], config,
                               fingerprint, out_dir, merge_override)
        return index, rep, row, timing

    if config.jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(task) for task in tasks]
    results.sort(key=lambda item: (item[0], item[1]))
    rows = [row for _, _, row, _ in results]
    timings = [timing for _, _, _, timing in results]
    return rows, timings, len(tasks)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row[col]) for col in columns])


def _percent(mean, std) -> str:
    if mean is None:
        return "-"
    return f"{100 * mean:.1f}±{100 * (std or 0.0):.1f}"


def _plain(mean, std) -> str:
    if mean is None:
        return "-"
    return f"{mean:.3f}±{std or 0.0:.3f}"


def write_summary_markdown(path, summary: list, best_cell: str,
                           kind: str) -> None:
    lines = [f"# Run summary ({kind})", "",
             f"Best cell by mean selection metric: **{best_cell}**", "",
             "## Overall results (mean±std over repetitions, ×100)", "",
             "| cell | AA | kappa | F1 | AUC | failed |",
             "| --- | --- | --- | --- | --- | --- |"]
    for entry in summary:
        lines.append(
            f"| {entry['cell']} "
            f"| {_percent(entry['average_accuracy_mean'], entry['average_accuracy_std'])} "
            f"| {_percent(entry['kappa_mean'], entry['kappa_std'])} "
            f"| {_percent(entry['f1_macro_mean'], entry['f1_macro_std'])} "
            f"| {_percent(entry['auc_roc_mean'], entry['auc_roc_std'])} "
            f"| {entry['reps_failed'] or ''} |")
    lines += ["", "## Uncertainty (mean±std over repetitions)", "",
              "| cell | max probability | normalized entropy |",
              "| --- | --- | --- |"]
    for entry in summary:
        lines.append(
            f"| {entry['cell']} "
            f"| {_plain(entry['max_probability_mean'], entry['max_probability_std'])} "
            f"| {_plain(entry['prediction_entropy_mean'], entry['prediction_entropy_std'])} |")
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_csv(path, summary: list) -> None:
    _write_csv(path, SUMMARY_COLUMNS, summary)


def _timing_rows(cells, timings: list) -> list:
    by_label: dict = {}
    for timing in timings:
        by_label.setdefault((timing["phase"], timing["cell"]),
                            []).append(timing)
    rows = []
    for cell in cells:
        group = by_label.get((cell.phase, cell.label), [])
        scored = [t for t in group if t["status"] != "error"]
        rows.append({
            "cell": cell.label, "phase": cell.phase, "view": cell.view,
            "repetitions": len(group),
            "train_seconds_mean": (float(np.mean(
                [t["train_seconds"] for t in scored])) if scored else None),
            "infer_seconds_mean": (float(np.mean(
                [t["infer_seconds"] for t in scored])) if scored else None),
        })
    return rows


def _per_sample_rows(labels: np.ndarray, probabilities: np.ndarray,
                     metadata: dict) -> tuple:
    classes = probabilities.shape[1]
    predicted = probabilities.argmax(axis=1)
    max_probability = probabilities.max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probabilities > 0.0,
                         probabilities * np.log(probabilities), 0.0)
    entropy = -terms.sum(axis=1) / np.log(classes)
    meta_columns = [key for key in _PREDICTION_METADATA if key in metadata]
    columns = (["index"] + meta_columns
               + ["true_label", "predicted_label", "correct",
                  "max_probability", "entropy"]
               + [f"prob_{k}" for k in range(classes)])
    rows = []
    for i in range(labels.shape[0]):
        row = {"index": i}
        for key in meta_columns:
            value = metadata[key][i]
            row[key] = (str(value) if metadata[key].dtype.kind == "U"
                        else value.item())
        row["true_label"] = int(labels[i])
        row["predicted_label"] = int(predicted[i])
        row["correct"] = int(predicted[i] == labels[i])
        row["max_probability"] = float(max_probability[i])
        row["entropy"] = float(entropy[i])
        for k in range(classes):
            row[f"prob_{k}"] = float(probabilities[i, k])
        rows.append(row)
    return columns, rows


def _check_group_fields(metadata: dict, group_by) -> None:
    for key in group_by:
        if key not in metadata:
            raise ConfigError(
                f"grouping by {key!r} requires per-sample metadata field "
                f"{key!r}; available fields: {sorted(metadata)}")


def _grouped_rows(labels, probabilities, metadata: dict, key: str,
                  classes: int) -> list:
    _check_group_fields(metadata, (key,))
    reports = grouped_report(labels, probabilities, metadata, key, classes)
    rows = []
    for group, report in reports.items():
        rows.append({
            "group": group,
            "samples": int(report.samples),
            "average_accuracy": float(report.average_accuracy),
            "kappa": (None if report.kappa is None else float(report.kappa)),
            "f1_macro": float(report.f1_macro),
        })
    return rows


def _per_class_rows(report) -> list:
    return [{"class": k,
             "precision": float(report.precision[k]),
             "recall": float(report.recall[k]),
             "f1": float(report.f1[k])}
            for k in range(len(report.precision))]


def _write_reports(out_dir: Path, kind: str, config: ExperimentConfig,
                   cells, rows: list, timings: list, best_cell: str,
                   data_by_label: dict, cell_by_label: dict,
                   merge_override: str | None) -> None:
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    summary = summarize(rows)
    write_summary_csv(reports / "summary.csv", summary)
    write_summary_markdown(reports / "summary.md", summary, best_cell, kind)
    _write_csv(reports / "timings.csv",
               ("cell", "phase", "view", "repetitions",
                "train_seconds_mean", "infer_seconds_mean"),
               _timing_rows(cells, timings))

    # Best-cell diagnostics: reload its first successful checkpoint and
    # score the shared test split sample by sample.
    best_rows = [row for row in rows
                 if row["cell"] == best_cell and row["status"] == "ok"]
    source = best_rows[0]
    cell = cell_by_label[best_cell]
    train_ds, test_ds = data_by_label[best_cell]
    model = _build_cell_model(cell, config, train_ds, merge_override)
    load_checkpoint(model, out_dir / source["checkpoint"])
    probabilities = _predict_all(model, test_ds, config.train.batch_size)

    report = evaluate(test_ds.labels, probabilities, test_ds.classes)
    _write_csv(reports / "per_class.csv",
               ("class", "precision", "recall", "f1"),
               _per_class_rows(report))
    for key in config.group_by:
        _write_csv(reports / f"per_{key}.csv",
                   ("group", "samples", "average_accuracy", "kappa",
                    "f1_macro"),
                   _grouped_rows(test_ds.labels, probabilities,
                                 test_ds.metadata, key, test_ds.classes))
    columns, sample_rows = _per_sample_rows(test_ds.labels, probabilities,
                                            test_ds.metadata)
    _write_csv(reports / "predictions.csv", columns, sample_rows)


# ---------------------------------------------------------------------------
# protocol runners
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunOutcome:
    """Everything a protocol run produced, with records as CSV row dicts."""

    records: tuple
    cells: tuple
    trainings_executed: int
    best_cell: str
    output_dir: str


def _prepare(dataset, config: ExperimentConfig):
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    if config.views:
        dataset = dataset.restrict(list(config.views))
    if dataset.task != config.task:
        raise ConfigError(
            f"config expects task {config.task!r} but dataset is "
            f"{dataset.task!r}")
    _check_group_fields(dataset.metadata, config.group_by)
    out_dir = Path(config.output_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    fingerprint = config.fingerprint(dataset_fingerprint(dataset))
    train_part, test_part = stratified_split(dataset, config.test_fraction,
                                             config.seed_base)
    return dataset, train_part, test_part, out_dir, fingerprint


def _write_manifest(out_dir: Path, kind: str, config: ExperimentConfig,
                    fingerprint: str, cells, trainings: int,
                    best_cell: str) -> None:
    payload = {
        "kind": kind,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "backend": active_backend(),
        "package_version": __version__,
        "fingerprint": fingerprint,
        "config": config.to_dict(),
        "cells": [cell.label for cell in cells],
        "trainings_executed": trainings,
        "best_cell": best_cell,
    }
    (out_dir / "manifest").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _finalize(kind: str, config: ExperimentConfig, out_dir: Path,
              fingerprint: str, cells, rows: list, timings: list,
              trainings: int, data_by_label: dict,
              merge_override: str | None) -> RunOutcome:
    write_records_csv(out_dir / "records.csv", rows)
    if not any(row["status"] == "ok" for row in rows):
        first = next((row["error"] for row in rows if row["error"]),
                     "unknown error")
        raise RuntimeError(f"every repetition failed; first error: {first}")
    best = best_cell_label(rows, config.selection_metric)
    _write_manifest(out_dir, kind, config, fingerprint, cells, trainings,
                    best)
    cell_by_label = {cell.label: cell for cell in cells}
    _write_reports(out_dir, kind, config, cells, rows, timings, best,
                   data_by_label, cell_by_label, merge_override)
    return RunOutcome(records=tuple(rows), cells=tuple(cells),
                      trainings_executed=trainings, best_cell=best,
                      output_dir=str(out_dir))


def run_cell(dataset, config: ExperimentConfig) -> RunOutcome:
    """Train and score the single cell named by the config."""
    _, train_part, test_part, out_dir, fingerprint = _prepare(dataset,
                                                              config)
    cells = (CellSpec(config.encoder, config.strategy, config.component),)
    data = {cells[0].label: (train_part, test_part)}
    rows, timings, executed = _execute(cells, data, config, out_dir,
                                       fingerprint, config.merge)
    return _finalize("cell", config, out_dir, fingerprint, cells, rows,
                     timings, executed, data, config.merge)


def run_grid(dataset, config: ExperimentConfig) -> RunOutcome:
    """Full protocol: 25 base cells, then 6 component cells with the
    resolved component encoder."""
    _, train_part, test_part, out_dir, fingerprint = _prepare(dataset,
                                                              config)
    planned = grid_cells(config.component_encoder
                         if config.component_encoder != "best"
                         else GRID_ENCODERS[0])
    assert len(planned) == GRID_CELL_COUNT
    base_cells = tuple(cell for cell in planned if cell.component == "none")

    data = {cell.label: (train_part, test_part) for cell in planned}
    rows, timings, executed = _execute(base_cells, data, config, out_dir,
                                       fingerprint, None)
    if config.component_encoder != "best":
        resolved = config.component_encoder
    else:
        try:
            resolved = best_encoder(rows, config.selection_metric)
        except ConfigError as exc:
            write_records_csv(out_dir / "records.csv", rows)
            raise RuntimeError(
                f"cannot resolve component encoder: {exc}") from exc

    cells = grid_cells(resolved)
    component_cells = cells[len(base_cells):]
    data.update({cell.label: (train_part, test_part)
                 for cell in component_cells})
    comp_rows, comp_timings, comp_executed = _execute(
        component_cells, data, config, out_dir, fingerprint, None)
    return _finalize("grid", config, out_dir, fingerprint, cells,
                     rows + comp_rows, timings + comp_timings,
                     executed + comp_executed, data, None)


def run_search(dataset, config: ExperimentConfig) -> RunOutcome:
    """Reduced protocol: Input-fusion over all encoders picks a winner,
    which then runs every strategy and component; the winner's Input cell
    is reused, not retrained."""
    _, train_part, test_part, out_dir, fingerprint = _prepare(dataset,
                                                              config)
    planned = search_cells(GRID_ENCODERS[0])
    assert len(planned) == SEARCH_CELL_COUNT
    phase1 = tuple(cell for cell in planned if cell.phase == "phase1")

    data = {cell.label: (train_part, test_part) for cell in phase1}
    rows, timings, executed = _execute(phase1, data, config, out_dir,
                                       fingerprint, None)

    failed = sorted({cell.encoder for cell in phase1
                     if not any(row["cell"] == cell.label
                                and row["status"] == "ok" for row in rows)})
    if failed:
        write_records_csv(out_dir / "records.csv", rows)
        raise RuntimeError(
            f"phase 1 failed for encoder(s) {failed}; phase 2 aborted")

    winner = best_encoder(rows, config.selection_metric)
    cells = search_cells(winner)
    phase2 = tuple(cell for cell in cells if cell.phase == "phase2")
    reused_cell = next(cell for cell in phase2 if cell.strategy == "Input")
    trainable = tuple(cell for cell in phase2 if cell.strategy != "Input")

    # The winner's Input cell repeats its phase-1 numbers verbatim.
    reused_rows = []
    reused_timings = []
    source_label = CellSpec(winner, "Input", phase="phase1").label
    for row in rows:
        if row["cell"] == source_label:
            copy = dict(row)
            copy["phase"] = "phase2"
            copy["status"] = "reused" if row["status"] == "ok" else "error"
            reused_rows.append(copy)
    for timing in timings:
        if timing["cell"] == source_label:
            copy = dict(timing)
            copy["phase"] = "phase2"
            reused_timings.append(copy)

    data.update({cell.label: (train_part, test_part) for cell in phase2})
    more_rows, more_timings, more_executed = _execute(
        trainable, data, config, out_dir, fingerprint, None)

    index = {(cell.phase, cell.label): i for i, cell in enumerate(cells)}
    all_rows = sorted(rows + reused_rows + more_rows,
                      key=lambda row: (index[(row["phase"], row["cell"])],
                                       row["repetition"]))
    all_timings = timings + reused_timings + more_timings
    return _finalize("search", config, out_dir, fingerprint, cells,
                     all_rows, all_timings, executed + more_executed, data,
                     None)


def single_view_baselines(dataset, config: ExperimentConfig) -> RunOutcome:
    """One Input-fusion model per view with the configured encoder."""
    full, train_part, test_part, out_dir, fingerprint = _prepare(dataset,
                                                                 config)
    cells = tuple(CellSpec(config.encoder, "Input", phase="baseline",
                           view=name) for name in full.view_names)
    data = {cell.label: (train_part.restrict([cell.view]),
                         test_part.restrict([cell.view]))
            for cell in cells}
    rows, timings, executed = _execute(cells, data, config, out_dir,
                                       fingerprint, config.merge)
    return _finalize("baselines", config, out_dir, fingerprint, cells, rows,
                     timings, executed, data, config.merge)


def _read_predictions(path) -> tuple:
    """Per-sample dump back into (labels, probabilities, metadata)."""
    with open(path, newline="") as handle:
        raw = list(csv.DictReader(handle))
    if not raw:
        raise ConfigError(f"{path} holds no prediction rows")
    prob_columns = sorted((c for c in raw[0] if c.startswith("prob_")),
                          key=lambda c: int(c.split("_", 1)[1]))
    labels = np.array([int(row["true_label"]) for row in raw],
                      dtype=np.int64)
    probabilities = np.array(
        [[float(row[c]) for c in prob_columns] for row in raw],
        dtype=np.float64)
    metadata = {key: np.array([row[key] for row in raw])
                for key in _PREDICTION_METADATA if key in raw[0]}
    return labels, probabilities, metadata


def reemit_reports(run_dir) -> None:
    """Rebuild the summary and grouped tables of an existing run directory
    from its persisted ``records.csv`` and per-sample dump."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest"
    records_path = run_dir / "records.csv"
    if not manifest_path.is_file() or not records_path.is_file():
        raise ConfigError(
            f"{run_dir} is not a run directory; it needs 'manifest' and "
            f"'records.csv'")
    try:
        manifest = json.loads(manifest_path.read_text())
    except ValueError as exc:
        raise ConfigError(f"unreadable manifest: {exc}") from None
    config = ExperimentConfig.from_dict(manifest["config"])
    rows = read_records_csv(records_path)

    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    write_summary_csv(reports / "summary.csv", summary)
    write_summary_markdown(reports / "summary.md", summary,
                           manifest["best_cell"], manifest["kind"])

    predictions_path = reports / "predictions.csv"
    if predictions_path.is_file():
        labels, probabilities, metadata = _read_predictions(predictions_path)
        report = evaluate(labels, probabilities, probabilities.shape[1])
        _write_csv(reports / "per_class.csv",
                   ("class", "precision", "recall", "f1"),
                   _per_class_rows(report))
        for key in config.group_by:
            _write_csv(reports / f"per_{key}.csv",
                       ("group", "samples", "average_accuracy", "kappa",
                        "f1_macro"),
                       _grouped_rows(labels, probabilities, metadata, key,
                                     probabilities.shape[1]))


# ---------------------------------------------------------------------------
# parameter inspection
# ---------------------------------------------------------------------------

_REFERENCE_COUNTS = {
    ("GRU", "optical"): 43904,
    ("GRU", "radar"): 42176,
    ("GRU", "weather"): 42176,
    ("GRU", "ndvi"): 41984,
    ("LSTM", "optical"): 57152,
    ("LSTM", "radar"): 54592,
    ("LSTM", "weather"): 54592,
    ("TempCNN", "optical"): 258880,
    ("TempCNN", "radar"): 256000,
    ("TempCNN", "weather"): 256000,
    ("TempCNN", "ndvi"): 255680,
    ("MLP", "topography"): 4352,
}

# The single-channel LSTM reference cannot be reproduced by any
# width/geometry assignment consistent with the other rows, so it is
# reported but not checked; see README.
_EXCLUDED_REFERENCE = {("LSTM", "ndvi"): 50688}

_TEMPORAL_VIEWS = ("optical", "radar", "weather", "ndvi")
_REFERENCE_HEAD = 20802
_REFERENCE_DELTAS = (("optical", "radar", 594), ("radar", "ndvi", 66))
_REFERENCE_TAE_MINUS_LTAE = 8192


def inspect_parameters() -> list:
    """Computed parameter counts next to the published reference targets.

    Rows are dicts with component, view, computed, reference, and a status
    of ok / mismatch / excluded / info.
    """
    rows = []
    counts: dict = {}
    for architecture in ("GRU", "LSTM", "TempCNN", "TAE", "LTAE"):
        counts[architecture] = {}
        for view in _TEMPORAL_VIEWS:
            encoder = build_encoder(canonical_schema(view),
                                    EncoderConfig(architecture))
            counts[architecture][view] = encoder.parameter_count()
    counts["MLP"] = {"topography": build_encoder(
        canonical_schema("topography"),
        EncoderConfig("MLP")).parameter_count()}

    def add(component, view, computed, reference, excluded=False):
        if excluded:
            status = "excluded"
        elif reference is None:
            status = "info"
        else:
            status = "ok" if computed == reference else "mismatch"
        rows.append({"component": component, "view": view,
                     "computed": computed, "reference": reference,
                     "status": status})

    for architecture in ("GRU", "LSTM", "TempCNN"):
        for view in _TEMPORAL_VIEWS:
            key = (architecture, view)
            if key in _EXCLUDED_REFERENCE:
                add(architecture, view, counts[architecture][view],
                    _EXCLUDED_REFERENCE[key], excluded=True)
            else:
                add(architecture, view, counts[architecture][view],
                    _REFERENCE_COUNTS[key])
    add("MLP", "topography", counts["MLP"]["topography"],
        _REFERENCE_COUNTS[("MLP", "topography")])
    add("head[320->2]", "", PredictionHead(320, 2).parameter_count(),
        _REFERENCE_HEAD)
    for architecture in ("TAE", "LTAE"):
        for view in _TEMPORAL_VIEWS:
            add(architecture, view, counts[architecture][view], None)
        for wide, narrow, delta in _REFERENCE_DELTAS:
            add(f"{architecture} {wide}-{narrow}", "",
                counts[architecture][wide] - counts[architecture][narrow],
                delta)
    add("TAE-LTAE", "",
        counts["TAE"]["optical"] - counts["LTAE"]["optical"],
        _REFERENCE_TAE_MINUS_LTAE)
    return rows
