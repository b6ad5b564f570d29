"""Performance matrix, per-sample optimal-defense labels, and the tree-ensemble selector."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import ATTACK_KINDS, AdversarialGrid, cell_id
from .data import Dataset
from .defenses import DefendedModel, defended_predict
from .gbt import GBTConfig, SelectorModel, gbt_train
from .metrics import macro_f1

N_DEFENSES = 9


def cell_sort_key(key: tuple[str, float]):
    kind, eps = key
    rank = ATTACK_KINDS.index(kind) if kind in ATTACK_KINDS else len(ATTACK_KINDS)
    return (rank, kind, float(eps))


def select_attack_train_cells(grid: AdversarialGrid | dict, train_epsilon: float):
    """Split grid cells into attack-train (eps == train_epsilon) and attack-test (the rest).

    DeepFool cells are keyed by their overshoot value, so its matching-knob cell is selected
    by the same rule.
    """
    cells = grid.cells if isinstance(grid, AdversarialGrid) else grid
    keys = sorted(cells, key=cell_sort_key)
    train = [k for k in keys if np.isclose(k[1], train_epsilon, rtol=0, atol=1e-12)]
    if not train:
        raise KeyError(f"train_epsilon {train_epsilon} is not present in the grid")
    test = [k for k in keys if k not in train]
    return {k: cells[k] for k in train}, {k: cells[k] for k in test}


def cell_predictions(defenses: list[DefendedModel], cells: dict) -> dict:
    """(n_defenses, n) predicted labels per cell."""
    return {key: np.stack([defended_predict(dm, data)[0] for dm in defenses]) for key, data in cells.items()}


@dataclass
class PerformanceMatrix:
    defense_ids: list[int]
    cell_keys: list[tuple[str, float]]
    values: np.ndarray  # (n_defenses, n_cells) macro-F1
    counts: list[int]

    def __post_init__(self):
        if self.values.shape != (len(self.defense_ids), len(self.cell_keys)):
            raise ValueError("matrix shape does not match its labels")
        if not np.isfinite(self.values).all() or (self.values < 0).any() or (self.values > 1).any():
            raise ValueError("matrix entries must lie in [0, 1]")

    @property
    def cell_ids(self) -> list[str]:
        return [cell_id(*k) for k in self.cell_keys]

    def row_average(self) -> np.ndarray:
        return self.values.mean(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["defense_id", *self.cell_ids])
        for i, row in zip(self.defense_ids, self.values):
            w.writerow([i, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "defense_ids": self.defense_ids,
            "cells": [{"id": cell_id(k, e), "kind": k, "epsilon": e, "n": c}
                      for (k, e), c in zip(self.cell_keys, self.counts)],
        }

    def save(self, csv_path, json_path, provenance: dict | None = None) -> None:
        Path(csv_path).write_text(self.to_csv())
        side = self.sidecar()
        side["provenance"] = provenance or {}
        Path(json_path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path, json_path) -> PerformanceMatrix:
        side = json.loads(Path(json_path).read_text())
        rows = list(csv.reader(io.StringIO(Path(csv_path).read_text())))
        ids = [int(r[0]) for r in rows[1:]]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
        keys = [(c["kind"], float(c["epsilon"])) for c in side["cells"]]
        return cls(ids, keys, values.reshape(len(ids), len(keys)), [c["n"] for c in side["cells"]])


def build_performance_matrix(defenses: list[DefendedModel], train_cells: dict, preds: dict | None = None) -> PerformanceMatrix:
    if not train_cells:
        raise ValueError("no attack-train cells")
    keys = sorted(train_cells, key=cell_sort_key)
    preds = preds or cell_predictions(defenses, {k: train_cells[k] for k in keys})
    values = np.empty((len(defenses), len(keys)))
    for j, key in enumerate(keys):
        data = train_cells[key]
        for i in range(len(defenses)):
            values[i, j] = macro_f1(preds[key][i], data.labels, data.n_classes)
    return PerformanceMatrix([int(dm.kind) for dm in defenses], keys, values, [train_cells[k].n for k in keys])


@dataclass
class SelectorTrainingSet:
    features: np.ndarray
    labels: np.ndarray  # defense ids
    tie_meta: np.ndarray  # (m, n_defenses) bool: defense classified the sample correctly
    cell_index: np.ndarray  # which attack-train cell each row came from


def defense_priority(matrix: PerformanceMatrix) -> list[int]:
    """Defense positions ordered by row-average F1 (12-decimal rounding), then lowest id."""
    avg = np.round(matrix.row_average(), 12)
    return sorted(range(len(matrix.defense_ids)), key=lambda i: (-avg[i], matrix.defense_ids[i]))


def label_optimal(defenses: list[DefendedModel], train_cells: dict, matrix: PerformanceMatrix,
                  preds: dict | None = None) -> SelectorTrainingSet:
    """Per sample: prefer defenses that classify it correctly, then higher row-average F1,
    then the lower defense id."""
    keys = sorted(train_cells, key=cell_sort_key)
    preds = preds or cell_predictions(defenses, {k: train_cells[k] for k in keys})
    priority = defense_priority(matrix)
    ids = np.array(matrix.defense_ids)
    feats, labels, ties, origin = [], [], [], []
    for j, key in enumerate(keys):
        data = train_cells[key]
        correct = (preds[key] == data.labels[None, :]).T  # (n, n_defenses)
        ranked = correct[:, priority]
        first = np.where(ranked.any(axis=1), np.argmax(ranked, axis=1), 0)
        labels.append(ids[np.asarray(priority)[first]])
        feats.append(data.features)
        ties.append(correct)
        origin.append(np.full(data.n, j))
    return SelectorTrainingSet(np.vstack(feats), np.concatenate(labels), np.vstack(ties), np.concatenate(origin))


def train_selector(training: SelectorTrainingSet, config: GBTConfig, n_defenses: int = N_DEFENSES) -> SelectorModel:
    return gbt_train(training.features, training.labels, n_defenses, config)


def constant_selector(defense_id: int, n_features: int, n_defenses: int = N_DEFENSES) -> SelectorModel:
    """A one-leaf selector that always routes to ``defense_id``."""
    shape = (1, n_defenses, 1)
    value = np.zeros(shape)
    value[0, defense_id, 0] = 1.0
    return SelectorModel(n_defenses, n_features, 1.0, 0, np.full(shape, -1, dtype=np.int64), np.zeros(shape),
                         np.full(shape, -1, dtype=np.int64), np.full(shape, -1, dtype=np.int64), value, {})


def stack_cells(cells: dict) -> Dataset:
    keys = sorted(cells, key=cell_sort_key)
    first = cells[keys[0]]
    return Dataset(np.vstack([cells[k].features for k in keys]), np.concatenate([cells[k].labels for k in keys]),
                   first.n_classes, first.feature_names)
