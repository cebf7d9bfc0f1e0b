"""Multi-view dataset container, file interchange, derived views, temporal
resampling, spectral-entropy diagnostics, and a synthetic data generator.

Storage convention: view arrays are held (and serialized) as 32-bit floats;
all downstream computation promotes to 64-bit.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .rngutil import named_stream
from .views import ViewSchema, canonical_schema

__all__ = [
    "Dataset",
    "EntropyReport",
    "MultiViewSample",
    "SynthSpec",
    "compute_ndvi",
    "entropy_report",
    "import_csv",
    "load_dataset",
    "resample_monthly",
    "save_dataset",
    "spectral_entropy",
    "stratified_split",
    "synth_generate",
    "with_ndvi",
]

_TASK_CLASSES = {"binary": 2, "multicrop": 10}

METADATA_STRING_KEYS = ("country", "continent")
METADATA_NUMERIC_KEYS = ("year", "latitude", "longitude", "is_test")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiViewSample:
    """One labelled sample: per-view arrays plus descriptive metadata."""

    views: dict
    label: int
    metadata: dict


@dataclass(frozen=True)
class Dataset:
    """Column-oriented multi-view dataset.

    ``arrays`` maps each schema name to a ``[N, steps, channels]`` (temporal)
    or ``[N, channels]`` (static) float32 array; ``labels`` is ``[N]`` int64;
    ``metadata`` maps keys to length-``N`` arrays (string or numeric).
    """

    task: str
    classes: int
    schemas: tuple
    arrays: dict
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)
    split: str = "full"

    def __post_init__(self) -> None:
        if self.task not in _TASK_CLASSES:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.classes != _TASK_CLASSES[self.task]:
            raise ConfigError(
                f"task {self.task!r} requires {_TASK_CLASSES[self.task]} classes, "
                f"got {self.classes}"
            )
        schemas = tuple(self.schemas)
        if not schemas:
            raise ConfigError("dataset needs at least one view schema")
        names = [s.name for s in schemas]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate view names in schemas")
        object.__setattr__(self, "schemas", schemas)

        if set(self.arrays) != set(names):
            missing = set(names) - set(self.arrays)
            extra = set(self.arrays) - set(names)
            raise ConfigError(
                f"arrays do not match schemas (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})"
            )
        arrays = {}
        n = None
        for schema in schemas:
            arr = np.ascontiguousarray(self.arrays[schema.name], dtype=np.float32)
            want = schema.shape
            if arr.ndim != 1 + len(want) or arr.shape[1:] != want:
                raise ShapeError(
                    f"view {schema.name!r} expects trailing shape {want}, "
                    f"got array of shape {arr.shape}"
                )
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ShapeError(
                    f"view {schema.name!r} has {arr.shape[0]} samples, expected {n}"
                )
            arrays[schema.name] = arr
        object.__setattr__(self, "arrays", arrays)

        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
        if n and (labels.min() < 0 or labels.max() >= self.classes):
            raise ConfigError(
                f"labels must lie in [0, {self.classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "labels", labels)

        metadata = {}
        for key, value in self.metadata.items():
            arr = np.asarray(value)
            if arr.dtype.kind in "US":
                arr = np.asarray(value, dtype=str)
            elif arr.dtype.kind in "iub":
                arr = arr.astype(np.int64)
            elif arr.dtype.kind == "f":
                arr = arr.astype(np.float64)
            else:
                raise ConfigError(f"metadata {key!r} has unsupported dtype {arr.dtype}")
            if arr.shape != (n,):
                raise ShapeError(
                    f"metadata {key!r} must have shape ({n},), got {arr.shape}"
                )
            metadata[key] = arr
        object.__setattr__(self, "metadata", metadata)

    # -- accessors ----------------------------------------------------------

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def view_names(self) -> tuple:
        return tuple(s.name for s in self.schemas)

    def schema(self, name: str) -> ViewSchema:
        for schema in self.schemas:
            if schema.name == name:
                return schema
        raise ConfigError(f"unknown view {name!r}")

    def sample(self, index: int) -> MultiViewSample:
        index = int(index)
        if not 0 <= index < len(self):
            raise ConfigError(f"sample index {index} out of range for {len(self)}")
        views = {name: self.arrays[name][index].copy() for name in self.view_names}
        metadata = {}
        for key, arr in self.metadata.items():
            metadata[key] = str(arr[index]) if arr.dtype.kind == "U" else arr[index].item()
        return MultiViewSample(views=views, label=int(self.labels[index]), metadata=metadata)

    # -- derived datasets ----------------------------------------------------

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("indices must be one-dimensional")
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise ConfigError(f"subset indices out of range for {len(self)} samples")
        return Dataset(
            task=self.task,
            classes=self.classes,
            schemas=self.schemas,
            arrays={name: self.arrays[name][idx] for name in self.view_names},
            labels=self.labels[idx],
            metadata={key: arr[idx] for key, arr in self.metadata.items()},
            split=self.split,
        )

    def restrict(self, names: Sequence[str]) -> "Dataset":
        names = list(names)
        for name in names:
            if name not in self.view_names:
                raise ConfigError(f"unknown view {name!r}")
        schemas = tuple(self.schema(name) for name in names)
        return Dataset(
            task=self.task,
            classes=self.classes,
            schemas=schemas,
            arrays={name: self.arrays[name] for name in names},
            labels=self.labels,
            metadata=self.metadata,
            split=self.split,
        )


# ---------------------------------------------------------------------------
# NDVI
# ---------------------------------------------------------------------------


def compute_ndvi(optical, red_index: int = 2, nir_index: int = 6) -> np.ndarray:
    """Normalized difference of the near-infrared and red bands, ``[T, 1]``.

    A zero denominator yields 0 by convention.
    """
    arr = np.asarray(optical, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"optical series must be [T, channels], got {arr.shape}")
    channels = arr.shape[1]
    for idx in (red_index, nir_index):
        if not 0 <= idx < channels:
            raise ConfigError(f"band index {idx} out of range for {channels} channels")
    red = arr[:, red_index]
    nir = arr[:, nir_index]
    den = nir + red
    safe = np.where(den == 0.0, 1.0, den)
    out = np.where(den == 0.0, 0.0, (nir - red) / safe)
    return out[:, None]


def with_ndvi(dataset: Dataset, red_index: int = 2, nir_index: int = 6) -> Dataset:
    """Return a copy of ``dataset`` with a derived one-channel ``ndvi`` view."""
    if "optical" not in dataset.view_names:
        raise ConfigError("ndvi derivation requires an 'optical' view")
    if "ndvi" in dataset.view_names:
        raise ConfigError("dataset already has an 'ndvi' view")
    optical = dataset.arrays["optical"].astype(np.float64)
    red = optical[:, :, red_index]
    nir = optical[:, :, nir_index]
    if not 0 <= red_index < optical.shape[2] or not 0 <= nir_index < optical.shape[2]:
        raise ConfigError("band index out of range")
    den = nir + red
    safe = np.where(den == 0.0, 1.0, den)
    ndvi = np.where(den == 0.0, 0.0, (nir - red) / safe)[:, :, None]
    schema = ViewSchema("ndvi", True, 1, dataset.schema("optical").steps)
    arrays = dict(dataset.arrays)
    arrays["ndvi"] = ndvi
    return Dataset(
        task=dataset.task,
        classes=dataset.classes,
        schemas=dataset.schemas + (schema,),
        arrays=arrays,
        labels=dataset.labels,
        metadata=dataset.metadata,
        split=dataset.split,
    )


# ---------------------------------------------------------------------------
# monthly resampling
# ---------------------------------------------------------------------------

# cumulative last day-of-year per month (non-leap); day 366 folds into December
_MONTH_END_DAY = np.array([31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334, 365])


def resample_monthly(series, days) -> np.ndarray:
    """Aggregate an irregular ``[T, D]`` series to ``[12, D]`` monthly means.

    Empty months are filled by linear interpolation between the nearest
    observed months; leading/trailing empty months copy the nearest value.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"series must be [T, D], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError("empty series: no observations to resample")
    day = np.asarray(days, dtype=np.float64)
    if day.shape != (arr.shape[0],):
        raise ShapeError(
            f"days must have shape ({arr.shape[0]},), got {day.shape}"
        )
    if np.any(day < 1) or np.any(day > 366):
        raise ConfigError("day-of-year values must lie in [1, 366]")
    month = np.minimum(np.searchsorted(_MONTH_END_DAY, day, side="left"), 11)

    known_months = []
    known_means = []
    for m in range(12):
        mask = month == m
        if np.any(mask):
            known_months.append(m)
            known_means.append(arr[mask].mean(axis=0))
    means = np.asarray(known_means)
    out = np.empty((12, arr.shape[1]), dtype=np.float64)
    grid = np.arange(12, dtype=np.float64)
    for d in range(arr.shape[1]):
        out[:, d] = np.interp(grid, np.asarray(known_months, dtype=np.float64), means[:, d])
    return out


# ---------------------------------------------------------------------------
# spectral entropy
# ---------------------------------------------------------------------------


def spectral_entropy(series, segments: int = 2) -> float:
    """Normalized Shannon entropy of the averaged periodogram, in ``[0, 1]``.

    The mean-removed series is cut into ``segments`` equal windows whose
    power spectra are averaged (the DC bin is dropped); the entropy of the
    normalized power distribution is divided by ``ln(bin count)``. Constant
    input returns 0 by convention.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"series must be one-dimensional, got shape {x.shape}")
    if x.shape[0] < 4:
        raise ShapeError(f"series needs at least 4 samples, got {x.shape[0]}")
    if segments < 1:
        raise ConfigError("segments must be >= 1")
    seg_len = x.shape[0] // segments
    if seg_len < 2:
        raise ConfigError(f"{segments} segments leave only {seg_len} samples each")
    bins = seg_len // 2  # positive-frequency bins after dropping DC
    if bins < 2:
        raise ConfigError(
            f"{segments} segments of {seg_len} samples leave {bins} spectral bin(s); "
            "need at least 2"
        )

    scale = max(1.0, float(np.max(np.abs(x))))
    centered = x - x.mean()
    if float(np.max(np.abs(centered))) <= 1e-12 * scale:
        return 0.0

    power = np.zeros(seg_len // 2 + 1, dtype=np.float64)
    for s in range(segments):
        window = centered[s * seg_len : (s + 1) * seg_len]
        power += np.abs(np.fft.rfft(window)) ** 2
    power = power[1:]  # drop DC
    total = power.sum()
    if total <= 0.0:
        return 0.0
    p = power / total
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    value = float(-terms.sum() / np.log(p.shape[0]))
    return min(max(value, 0.0), 1.0)


@dataclass(frozen=True)
class EntropyReport:
    """Per-view, per-feature spectral-entropy means with summary statistics."""

    per_feature: dict
    per_view_mean: dict
    summary: dict


def entropy_report(dataset: Dataset, segments: int = 2) -> EntropyReport:
    """Mean spectral entropy of every (temporal view, feature) pair."""
    per_feature = {}
    per_view_mean = {}
    summary = {}
    for schema in dataset.schemas:
        if not schema.temporal:
            continue
        arr = dataset.arrays[schema.name].astype(np.float64)
        values = []
        for d in range(schema.channels):
            vals = [spectral_entropy(arr[i, :, d], segments) for i in range(arr.shape[0])]
            values.append(float(np.mean(vals)) if vals else 0.0)
        per_feature[schema.name] = tuple(values)
        flat = np.asarray(values, dtype=np.float64)
        per_view_mean[schema.name] = float(flat.mean())
        summary[schema.name] = {
            "min": float(flat.min()),
            "max": float(flat.max()),
            "mean": float(flat.mean()),
            "std": float(flat.std()),
        }
    return EntropyReport(per_feature=per_feature, per_view_mean=per_view_mean, summary=summary)


# ---------------------------------------------------------------------------
# MVDS binary container
# ---------------------------------------------------------------------------

_MAGIC = b"MVDS"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")  # magic, version, sample count, manifest length
_BLOCK_DTYPES = {"<f4", "<f8", "<i8"}


def _schema_dict(schema: ViewSchema) -> dict:
    return {
        "name": schema.name,
        "temporal": schema.temporal,
        "channels": schema.channels,
        "steps": schema.steps,
    }


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` to ``path`` in the MVDS binary container layout."""
    n = len(dataset)
    blocks = []
    payload = []
    offset = 0

    def add_block(name: str, kind: str, arr: np.ndarray, dtype: str) -> None:
        nonlocal offset
        data = np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes(order="C")
        blocks.append(
            {
                "name": name,
                "kind": kind,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload.append(data)
        offset += len(data)

    for schema in dataset.schemas:
        add_block(schema.name, "view", dataset.arrays[schema.name], "<f4")
    add_block("labels", "labels", dataset.labels, "<i8")

    strings = {}
    for key in sorted(dataset.metadata):
        arr = dataset.metadata[key]
        if arr.dtype.kind == "U":
            strings[key] = [str(v) for v in arr]
        elif arr.dtype.kind == "i":
            add_block(key, "metadata", arr, "<i8")
        else:
            add_block(key, "metadata", arr, "<f8")

    manifest = {
        "task": dataset.task,
        "classes": dataset.classes,
        "split": dataset.split,
        "schemas": [_schema_dict(s) for s in dataset.schemas],
        "blocks": blocks,
        "strings": strings,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, len(body)))
        fh.write(body)
        for chunk in payload:
            fh.write(chunk)


def load_dataset(path) -> Dataset:
    """Read an MVDS container back into a :class:`Dataset` (bit-exact)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read container: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError("truncated container header")
    magic, version, count, manifest_len = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    if len(raw) < _HEADER.size + manifest_len:
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size : _HEADER.size + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    data = raw[_HEADER.size + manifest_len :]

    decoded = {}
    for block in manifest["blocks"]:
        dtype_tag = block["dtype"]
        if dtype_tag not in _BLOCK_DTYPES:
            raise FormatError(f"block {block['name']!r} has unsupported dtype {dtype_tag!r}")
        dtype = np.dtype(dtype_tag)
        shape = tuple(int(s) for s in block["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if block["nbytes"] != expected:
            raise FormatError(
                f"block {block['name']!r}: manifest says {block['nbytes']} bytes "
                f"but shape {shape} needs {expected}"
            )
        start, stop = int(block["offset"]), int(block["offset"]) + expected
        if stop > len(data):
            raise FormatError(f"block {block['name']!r} is truncated")
        arr = np.frombuffer(data[start:stop], dtype=dtype).reshape(shape).copy()
        if shape and shape[0] != count:
            raise FormatError(
                f"block {block['name']!r} has {shape[0]} samples, header says {count}"
            )
        decoded[(block["kind"], block["name"])] = arr

    try:
        schemas = tuple(
            ViewSchema(s["name"], s["temporal"], s["channels"], s["steps"])
            for s in manifest["schemas"]
        )
        arrays = {}
        for schema in schemas:
            if ("view", schema.name) not in decoded:
                raise FormatError(f"missing view block {schema.name!r}")
            arrays[schema.name] = decoded[("view", schema.name)]
        if ("labels", "labels") not in decoded:
            raise FormatError("missing labels block")
        metadata = {}
        for (kind, name), arr in decoded.items():
            if kind == "metadata":
                metadata[name] = arr
        for key, values in manifest["strings"].items():
            metadata[key] = np.asarray(values, dtype=str)
        return Dataset(
            task=manifest["task"],
            classes=manifest["classes"],
            schemas=schemas,
            arrays=arrays,
            labels=decoded[("labels", "labels")],
            metadata=metadata,
            split=manifest["split"],
        )
    except (ConfigError, ShapeError, KeyError) as exc:
        raise FormatError(f"inconsistent container: {exc}") from exc


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

_METADATA_PARSERS = {
    "country": str,
    "continent": str,
    "year": int,
    "latitude": float,
    "longitude": float,
    "is_test": int,
}
_METADATA_DEFAULTS = {
    "country": "unknown",
    "continent": "unknown",
    "year": 0,
    "latitude": 0.0,
    "longitude": 0.0,
    "is_test": 0,
}


def _read_view_csv(path, schema: ViewSchema) -> dict:
    width = int(np.prod(schema.shape))
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise FormatError(f"{path}: first column must be 'id'")
        if len(header) != 1 + width:
            raise FormatError(
                f"{path}: expected {width} value columns for view {schema.name!r}, "
                f"got {len(header) - 1}"
            )
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + width:
                raise FormatError(f"{path}:{line}: expected {1 + width} cells, got {len(row)}")
            sid = row[0]
            if sid in rows:
                raise FormatError(f"{path}:{line}: duplicate id {sid!r}")
            try:
                values = np.asarray([float(c) for c in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: non-numeric cell ({exc})") from exc
            rows[sid] = values.reshape(schema.shape)
    return rows


def import_csv(
    view_files: Mapping[str, object],
    label_file,
    schemas: Sequence[ViewSchema],
    task: str = "binary",
    classes: int = 2,
) -> Dataset:
    """Assemble a :class:`Dataset` from one wide CSV per view plus a label CSV.

    Samples missing at least one view are dropped with a counted warning;
    label ids absent from every view are a hard error; view rows without a
    label are ignored.
    """
    schemas = tuple(schemas)
    if set(view_files) != {s.name for s in schemas}:
        raise ConfigError("view files do not match the declared schemas")

    view_rows = {s.name: _read_view_csv(view_files[s.name], s) for s in schemas}

    known = set(_METADATA_PARSERS)
    labels = []
    metadata_rows = []
    ids = []
    with open(label_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or "label" not in header:
            raise FormatError(f"{label_file}: header must contain 'id' and 'label'")
        extra = [c for c in header[1:] if c != "label" and c not in known]
        if extra:
            raise FormatError(f"{label_file}: unknown columns {extra}")
        columns = header[1:]
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{label_file}:{line}: expected {len(header)} cells, got {len(row)}"
                )
            sid = row[0]
            record = dict(_METADATA_DEFAULTS)
            label = None
            for name, cell in zip(columns, row[1:]):
                try:
                    if name == "label":
                        label = int(cell)
                    else:
                        record[name] = _METADATA_PARSERS[name](cell)
                except ValueError as exc:
                    raise FormatError(f"{label_file}:{line}: bad {name} cell ({exc})") from exc
            ids.append(sid)
            labels.append(label)
            metadata_rows.append(record)

    kept, kept_labels, kept_meta = [], [], []
    dropped = 0
    for sid, label, record in zip(ids, labels, metadata_rows):
        present = [name for name in view_rows if sid in view_rows[name]]
        if not present:
            raise FormatError(f"label id {sid!r} is absent from every view file")
        if len(present) != len(view_rows):
            dropped += 1
            continue
        kept.append(sid)
        kept_labels.append(label)
        kept_meta.append(record)
    if dropped:
        warnings.warn(
            f"dropped {dropped} sample(s) missing at least one view",
            stacklevel=2,
        )
    if not kept:
        raise ConfigError("no samples left after referential checks")

    arrays = {
        schema.name: np.stack([view_rows[schema.name][sid] for sid in kept])
        for schema in schemas
    }
    metadata = {
        key: np.asarray([record[key] for record in kept_meta])
        for key in _METADATA_PARSERS
    }
    return Dataset(
        task=task,
        classes=classes,
        schemas=schemas,
        arrays=arrays,
        labels=np.asarray(kept_labels, dtype=np.int64),
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_SYNTH_KINDS = ("complementary", "redundant", "noisy-view")
_SYNTH_STEPS = 12
_CONTINENT_CYCLE = ("africa", "america", "asia", "europe")
_COUNTRY_CYCLE = ("kenya", "brazil", "india", "france")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for the synthetic two-view binary generator.

    ``complementary`` encodes one class bit as a phase flip in the optical
    view and an independent bit as an amplitude step in the radar view; the
    label is their XOR, so neither view alone is informative. ``redundant``
    writes the same phase-coded label into both views; ``noisy-view`` leaves
    the radar view as pure noise.
    """

    kind: str
    samples: int = 400
    noise: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in _SYNTH_KINDS:
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.samples < 8:
            raise ConfigError("synthetic dataset needs at least 8 samples")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")


def _synth_template() -> np.ndarray:
    t = np.arange(_SYNTH_STEPS, dtype=np.float64)
    return np.sin(2.0 * np.pi * 2.0 * t / _SYNTH_STEPS)


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministically generate a two-view binary dataset per ``spec``."""
    n = spec.samples
    template = _synth_template()
    bits = named_stream(seed, "synth/bits").integers(0, 2, size=(n, 2))
    noise_rng = named_stream(seed, "synth/noise")
    geo = named_stream(seed, "synth/geo")

    optical = noise_rng.normal(0.0, spec.noise, size=(n, _SYNTH_STEPS, 11))
    radar = noise_rng.normal(0.0, spec.noise, size=(n, _SYNTH_STEPS, 2))

    if spec.kind == "complementary":
        b1, b2 = bits[:, 0], bits[:, 1]
        labels = np.bitwise_xor(b1, b2)
        optical[:, :, 0] += (1.0 - 2.0 * b1)[:, None] * template
        radar[:, :, 0] += (0.5 + b2)[:, None] * template
    elif spec.kind == "redundant":
        labels = bits[:, 0]
        sign = (1.0 - 2.0 * labels)[:, None]
        optical[:, :, 0] += sign * template
        radar[:, :, 0] += sign * template
    else:  # noisy-view
        labels = bits[:, 0]
        optical[:, :, 0] += (1.0 - 2.0 * labels)[:, None] * template

    idx = np.arange(n)
    metadata = {
        "country": np.asarray(_COUNTRY_CYCLE)[idx % len(_COUNTRY_CYCLE)],
        "continent": np.asarray(_CONTINENT_CYCLE)[idx % len(_CONTINENT_CYCLE)],
        "year": (2016 + idx % 3).astype(np.int64),
        "latitude": geo.uniform(-60.0, 60.0, size=n),
        "longitude": geo.uniform(-180.0, 180.0, size=n),
        "is_test": np.zeros(n, dtype=np.int64),
    }
    schemas = (
        ViewSchema("optical", True, 11, _SYNTH_STEPS),
        ViewSchema("radar", True, 2, _SYNTH_STEPS),
    )
    return Dataset(
        task="binary",
        classes=2,
        schemas=schemas,
        arrays={"optical": optical, "radar": radar},
        labels=labels.astype(np.int64),
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# stratified split
# ---------------------------------------------------------------------------


def stratified_split(dataset: Dataset, test_fraction: float, seed: int):
    """Seeded class-stratified split into ``(train, test)`` datasets."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    if n < 2:
        raise ConfigError("need at least two samples to split")

    total_test = int(np.floor(test_fraction * n + 0.5))
    total_test = min(max(total_test, 1), n - 1)

    labels = dataset.labels
    present = np.unique(labels)
    counts = {int(k): int(np.sum(labels == k)) for k in present}

    quotas = {k: test_fraction * c for k, c in counts.items()}
    take = {k: int(np.floor(q)) for k, q in quotas.items()}
    remaining = total_test - sum(take.values())
    order = sorted(
        counts,
        key=lambda k: (-(quotas[k] - np.floor(quotas[k])), -counts[k], k),
    )
    i = 0
    while remaining > 0:
        k = order[i % len(order)]
        if take[k] < counts[k]:
            take[k] += 1
            remaining -= 1
        i += 1
    while remaining < 0:
        k = order[(i - 1) % len(order)]
        if take[k] > 0:
            take[k] -= 1
            remaining += 1
        i -= 1

    # keep every class represented on both sides when counts allow
    for k in sorted(counts):
        if counts[k] >= 2 and take[k] == 0:
            donor = max(take, key=lambda j: take[j])
            if take[donor] > 1:
                take[donor] -= 1
                take[k] = 1
        if counts[k] >= 2 and take[k] == counts[k]:
            take[k] -= 1
            receiver = min(
                (j for j in counts if take[j] < counts[j]),
                key=lambda j: take[j] / counts[j],
                default=None,
            )
            if receiver is not None:
                take[receiver] += 1

    rng = named_stream(seed, "split")
    test_idx = []
    for k in sorted(counts):
        members = np.flatnonzero(labels == k)
        perm = rng.permutation(members)
        test_idx.extend(perm[: take[k]].tolist())
    test_mask = np.zeros(n, dtype=bool)
    test_mask[np.asarray(test_idx, dtype=np.int64)] = True

    train = dataset.subset(np.flatnonzero(~test_mask))
    test = dataset.subset(np.flatnonzero(test_mask))
    return replace(train, split="train"), replace(test, split="test")
