"""Tabular ingestion, cleaning, standardization/one-hot encoding, splitting and synthesis."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .utils import read_container, write_container

KINDS = ("numeric", "categorical", "label")
DATASET_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class RawTable:
    """Column-major raw table. Numeric columns are float64; others hold strings."""

    columns: list[tuple[str, str]]
    values: dict[str, np.ndarray]

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names in {names}")
        for name, kind in self.columns:
            if kind not in KINDS:
                raise DataError(f"column {name!r}: unknown kind {kind!r}")
        labels = [name for name, kind in self.columns if kind == "label"]
        if len(labels) != 1:
            raise DataError(f"exactly one label column required, found {labels}")
        if set(self.values) != set(names):
            raise DataError("values keys do not match declared columns")
        lengths = {len(v) for v in self.values.values()}
        if len(lengths) > 1:
            raise DataError(f"ragged columns: lengths {sorted(lengths)}")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.values.values()))) if self.values else 0

    @property
    def label_column(self) -> str:
        return next(name for name, kind in self.columns if kind == "label")

    def kind(self, name: str) -> str:
        return dict(self.columns)[name]

    def take(self, rows) -> RawTable:
        rows = np.asarray(rows, dtype=np.int64)
        return RawTable(list(self.columns), {k: v[rows] for k, v in self.values.items()})


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must have one entry per feature row")
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature_names length must equal feature count")
        if not np.isfinite(self.features).all():
            raise DataError("features contain NaN or infinite entries")
        if self.n_classes < 1:
            raise DataError("n_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> Dataset:
        return Dataset(self.features[rows], self.labels[rows], self.n_classes, list(self.feature_names))

    def with_features(self, features: np.ndarray) -> Dataset:
        return Dataset(features, self.labels.copy(), self.n_classes, list(self.feature_names))


def save_dataset(data: Dataset, path) -> None:
    write_container(
        path, "dataset", DATASET_FORMAT_VERSION,
        {"n_classes": data.n_classes, "feature_names": data.feature_names},
        {"features": data.features, "labels": data.labels},
    )


def load_dataset(path) -> Dataset:
    meta, arrays = read_container(path, "dataset", DATASET_FORMAT_VERSION)
    return Dataset(arrays["features"], arrays["labels"], meta["n_classes"], meta["feature_names"])


# -- ingestion ----------------------------------------------------------------

def load_schema(path) -> list[tuple[str, str]]:
    """Read a schema declaration file: {"columns": [{"name": ..., "kind": ...}, ...]}."""
    spec = json.loads(Path(path).read_text())
    return [(c["name"], c["kind"]) for c in spec["columns"]]


def load_csv(path, schema) -> RawTable:
    if isinstance(schema, (str, Path)):
        schema = load_schema(schema)
    schema = [(str(n), str(k)) for n, k in schema]
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (no header row)") from None
        names = [n for n, _ in schema]
        if set(header) != set(names) or len(header) != len(names):
            missing = sorted(set(names) - set(header))
            extra = sorted(set(header) - set(names))
            raise DataError(f"{path}: header does not match schema (missing {missing}, unexpected {extra})")
        position = {name: i for i, name in enumerate(header)}
        cells: dict[str, list] = {n: [] for n in names}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: data row {row_no} has {len(row)} cells, expected {len(header)}")
            for name, kind in schema:
                raw = row[position[name]].strip()
                if raw == "":
                    raise DataError(f"{path}: data row {row_no}, column {name!r}: missing cell")
                if kind == "numeric":
                    try:
                        cells[name].append(float(raw))
                    except ValueError:
                        raise DataError(
                            f"{path}: data row {row_no}, column {name!r}: cannot parse {raw!r} as a number"
                        ) from None
                else:
                    cells[name].append(raw)
    values = {
        name: np.asarray(cells[name], dtype=np.float64 if kind == "numeric" else object)
        for name, kind in schema
    }
    return RawTable(schema, values)


@dataclass
class CleaningSpec:
    drop_constant: bool = True
    drop_duplicates: bool = True
    drop_listed: list[str] = field(default_factory=list)


def clean(table: RawTable, spec: CleaningSpec) -> RawTable:
    label = table.label_column
    names = [n for n, _ in table.columns]
    for name in spec.drop_listed:
        if name == label:
            raise DataError(f"refusing to drop the label column {name!r}")
        if name not in names:
            raise DataError(f"cannot drop unknown column {name!r}")
    drop = set(spec.drop_listed)
    if spec.drop_constant and table.n_rows > 0:
        for name, kind in table.columns:
            if kind != "label" and len(np.unique(table.values[name])) <= 1:
                drop.add(name)
    columns = [(n, k) for n, k in table.columns if n not in drop]
    values = {n: table.values[n] for n, _ in columns}
    out = RawTable(columns, values)
    if spec.drop_duplicates and out.n_rows > 1:
        seen = set()
        keep = []
        cols = [values[n] for n, _ in columns]
        for i in range(out.n_rows):
            key = tuple(c[i] for c in cols)
            if key not in seen:
                seen.add(key)
                keep.append(i)
        if len(keep) != out.n_rows:
            out = out.take(keep)
    return out


# -- preprocessing --------------------------------------------------------------

@dataclass
class PreprocessState:
    dropped_columns: list[str]
    numeric_stats: dict[str, tuple[float, float]]
    category_maps: dict[str, dict[str, int]]
    label_map: dict[str, int]
    feature_order: list[str]  # retained input columns, in output order
    clamp_bounds: np.ndarray  # (d, 2): lo, hi per output feature

    @property
    def feature_names(self) -> list[str]:
        names = []
        for col in self.feature_order:
            if col in self.numeric_stats:
                names.append(col)
            else:
                names.extend(f"{col}={v}" for v in self.category_maps[col])
        return names

    @property
    def d(self) -> int:
        return len(self.feature_names)

    @property
    def n_classes(self) -> int:
        return len(self.label_map)

    @property
    def lo(self) -> np.ndarray:
        return self.clamp_bounds[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.clamp_bounds[:, 1]

    def to_dict(self) -> dict:
        return {
            "dropped_columns": self.dropped_columns,
            "numeric_stats": {k: list(v) for k, v in self.numeric_stats.items()},
            "category_maps": self.category_maps,
            "label_map": self.label_map,
            "feature_order": self.feature_order,
            # float repr round-trips exactly through JSON
            "clamp_bounds": self.clamp_bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PreprocessState:
        return cls(
            dropped_columns=list(d["dropped_columns"]),
            numeric_stats={k: (float(v[0]), float(v[1])) for k, v in d["numeric_stats"].items()},
            category_maps={k: dict(v) for k, v in d["category_maps"].items()},
            label_map=dict(d["label_map"]),
            feature_order=list(d["feature_order"]),
            clamp_bounds=np.asarray(d["clamp_bounds"], dtype=np.float64).reshape(-1, 2),
        )


def _label_order(values) -> list[str]:
    distinct = sorted(set(values))
    try:
        return sorted(distinct, key=float)
    except ValueError:
        return distinct


def fit_preprocessor(table: RawTable) -> PreprocessState:
    if table.n_rows == 0:
        raise DataError("cannot fit a preprocessor on an empty table")
    dropped, stats, cmaps, order = [], {}, {}, []
    for name, kind in table.columns:
        col = table.values[name]
        if kind == "numeric":
            mean = float(np.mean(col))
            std = float(np.sqrt(np.mean((col - mean) ** 2)))
            if std == 0.0:
                dropped.append(name)
                continue
            stats[name] = (mean, std)
            order.append(name)
        elif kind == "categorical":
            mapping: dict[str, int] = {}
            for v in col:
                if v not in mapping:
                    mapping[v] = len(mapping)
            cmaps[name] = mapping
            order.append(name)
    label_map = {v: i for i, v in enumerate(_label_order(table.values[table.label_column]))}
    state = PreprocessState(dropped, stats, cmaps, label_map, order, np.zeros((0, 2)))
    feats = _encode(state, table)
    state.clamp_bounds = np.stack([feats.min(axis=0), feats.max(axis=0)], axis=1) if feats.shape[1] else np.zeros((0, 2))
    return state


def _encode(state: PreprocessState, table: RawTable) -> np.ndarray:
    blocks = []
    for name in state.feature_order:
        if name not in table.values:
            raise DataError(f"column {name!r} required by the preprocessor is missing from the table")
        col = table.values[name]
        if name in state.numeric_stats:
            mean, std = state.numeric_stats[name]
            blocks.append(((np.asarray(col, dtype=np.float64) - mean) / std)[:, None])
        else:
            mapping = state.category_maps[name]
            block = np.zeros((table.n_rows, len(mapping)))
            for i, v in enumerate(col):
                j = mapping.get(v)
                if j is not None:
                    block[i, j] = 1.0
            blocks.append(block)
    if not blocks:
        return np.zeros((table.n_rows, 0))
    return np.hstack(blocks)


def apply_preprocessor(state: PreprocessState, table: RawTable) -> Dataset:
    feats = _encode(state, table)
    label_col = table.values[table.label_column]
    try:
        labels = np.array([state.label_map[v] for v in label_col], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label value {exc.args[0]!r} was not seen when fitting") from None
    return Dataset(feats, labels, state.n_classes, state.feature_names)


# -- splitting ------------------------------------------------------------------

def split_indices(labels: np.ndarray, n_classes: int, test_fraction: float, seed: int,
                  stratified: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    n = len(labels)
    rng = np.random.default_rng(seed)
    if not stratified:
        perm = rng.permutation(n)
        n_test = int(round(n * test_fraction))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    if n < n_classes / test_fraction:
        raise DataError(f"{n} samples are too few to stratify {n_classes} classes at test_fraction={test_fraction}")
    test = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        if len(idx) == 1:
            raise DataError(f"class {c} has a single sample; cannot stratify")
        idx = rng.permutation(idx)
        k = int(round(len(idx) * test_fraction))
        k = min(max(k, 1), len(idx) - 1)
        test.append(idx[:k])
    test_idx = np.sort(np.concatenate(test))
    mask = np.ones(n, dtype=bool)
    mask[test_idx] = False
    return np.flatnonzero(mask), test_idx


def split(data: Dataset, test_fraction: float, seed: int, stratified: bool = True) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(data.labels, data.n_classes, test_fraction, seed, stratified)
    return data.subset(train_idx), data.subset(test_idx)


# -- synthetic benchmark ----------------------------------------------------------

@dataclass
class SynthSpec:
    n_samples: int = 4000
    n_numeric: int = 10
    n_categorical: int = 2
    n_classes: int = 2
    class_separation: float = 3.0
    noise_scale: float = 1.0
    n_categories: int = 4
    signal_decay: float = 0.1
    seed: int = 7

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError("n_classes must be at least 2")
        if self.n_numeric < 2:
            raise DataError("n_numeric must be at least 2")
        if self.class_separation < 0:
            raise DataError("class_separation must be non-negative")
        if self.noise_scale <= 0:
            raise DataError("noise_scale must be positive")
        if not 0.0 < self.signal_decay <= 1.0:
            raise DataError("signal_decay must lie in (0, 1]")
        if self.n_samples < self.n_classes or self.n_categorical < 0 or self.n_categories < 1:
            raise DataError("invalid synth sizes")


def synth_generate(spec: SynthSpec) -> RawTable:
    """Class-conditional Gaussian clusters plus class-skewed categorical columns.

    Class c has numeric mean ``c * class_separation * u`` for a unit direction u with
    random signs and magnitudes proportional to ``signal_decay ** j`` (all equal when the
    decay is 1), so some features carry most of the signal. Each categorical column favours
    one category per class with a log-odds boost of ``class_separation / 4``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.n_numeric
    labels = np.arange(n) % spec.n_classes
    labels = rng.permutation(labels)
    direction = rng.choice([-1.0, 1.0], size=k) * spec.signal_decay ** np.arange(k)
    direction /= np.linalg.norm(direction)
    numeric = labels[:, None] * spec.class_separation * direction + spec.noise_scale * rng.standard_normal((n, k))
    columns: list[tuple[str, str]] = []
    values: dict[str, np.ndarray] = {}
    for j in range(k):
        columns.append((f"num_{j}", "numeric"))
        values[f"num_{j}"] = numeric[:, j]
    boost = spec.class_separation / 4.0
    for j in range(spec.n_categorical):
        favoured = (np.arange(spec.n_classes) + j) % spec.n_categories
        logits = np.zeros((spec.n_classes, spec.n_categories))
        logits[np.arange(spec.n_classes), favoured] = boost
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        cum = np.cumsum(probs[labels], axis=1)
        draws = (rng.random(n)[:, None] > cum).sum(axis=1)
        draws = np.minimum(draws, spec.n_categories - 1)
        columns.append((f"cat_{j}", "categorical"))
        values[f"cat_{j}"] = np.array([f"c{v}" for v in draws], dtype=object)
    columns.append(("label", "label"))
    values["label"] = np.array([str(v) for v in labels], dtype=object)
    return RawTable(columns, values)


def prepare(table: RawTable, cleaning: CleaningSpec, test_fraction: float, seed: int,
            stratified: bool = True) -> tuple[PreprocessState, Dataset, Dataset]:
    """clean -> fit -> apply -> split, the standard preprocessing chain."""
    table = clean(table, cleaning)
    state = fit_preprocessor(table)
    data = apply_preprocessor(state, table)
    train, test = split(data, test_fraction, seed, stratified)
    missing = set(range(data.n_classes)) - set(np.unique(train.labels).tolist())
    if missing:
        raise DataError(f"classes {sorted(missing)} absent from the training split")
    return state, train, test


__all__ = [
    "RawTable", "Dataset", "PreprocessState", "CleaningSpec", "SynthSpec", "DataError",
    "load_csv", "load_schema", "clean", "fit_preprocessor", "apply_preprocessor", "split",
    "split_indices", "synth_generate", "prepare", "save_dataset", "load_dataset",
]
