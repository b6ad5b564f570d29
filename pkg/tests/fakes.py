"""Hand-built defended models with fixed behaviour, for routing and scoring tests."""

import numpy as np

from dynamite.data import Dataset
from dynamite.defenses import TRANSFORM_KINDS, DefendedModel, DefenseKind
from dynamite.nn import MlpModel


def constant_model(d, cls, n_classes=2):
    bias = np.zeros(n_classes)
    bias[cls] = 5.0
    return MlpModel([d, n_classes], [np.zeros((n_classes, d))], [bias])


def threshold_model(d, feature=0, cut=0.0):
    """Predicts class 1 when x[feature] > cut."""
    w = np.zeros((2, d))
    w[1, feature] = 50.0
    return MlpModel([d, 2], [w], [np.array([0.0, -50.0 * cut])])


def wrap(kind, model):
    kind = DefenseKind(kind)
    transform = None
    if kind in TRANSFORM_KINDS:
        transform = {"type": "noise", "sigma": 0.0, "seed": 0, "lo": [-1e9] * model.dims[0], "hi": [1e9] * model.dims[0]}
    return DefendedModel(kind, model, transform)


def constant_defenses(d, classes):
    """One defense per id in order, defense i always predicting ``classes[i]``."""
    return [wrap(i, constant_model(d, c)) for i, c in enumerate(classes)]


def cell(features, labels, n_classes=2):
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    return Dataset(features, np.asarray(labels), n_classes, [f"f{i}" for i in range(features.shape[1])])
