"""Feedforward ReLU classifier with analytic gradients, written directly in numpy.

Weights are stored as (out, in) matrices so that ``h = x @ W.T + b``. The model boundary
is the logit vector; softmax only appears inside the losses and ``predict``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .utils import read_container, write_container

MODEL_FORMAT_VERSION = 1


class TrainingError(FloatingPointError):
    pass


@dataclass
class MlpModel:
    dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.dims = [int(v) for v in self.dims]
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i + 1], self.dims[i]) or b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i}: parameter shapes {w.shape}/{b.shape} disagree with dims {self.dims}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def n_inputs(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> MlpModel:
        return MlpModel(list(self.dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(dims, seed: int) -> MlpModel:
    dims = [int(v) for v in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"layer dims must have at least two positive entries, got {dims}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i]) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    return MlpModel(dims, weights, biases)


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.n_inputs:
        raise ValueError(f"input has {x.shape[1]} features, model expects {model.n_inputs}")
    return x


def forward(model: MlpModel, x: np.ndarray, return_cache: bool = False):
    x = _check_input(model, x)
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    if return_cache:
        return h, acts
    return h


def backward(model: MlpModel, acts: list[np.ndarray], dlogits: np.ndarray, need_params: bool = True):
    """Backpropagate ``dlogits`` through the cached activations.

    Returns (parameter gradients in ``params()`` order or None, input gradient).
    ReLU subgradient at 0 is 0, which the ``acts > 0`` mask gives for free.
    """
    grads = [] if need_params else None
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        if need_params:
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ acts[i])
        delta = delta @ model.weights[i]
        if i > 0:
            delta = delta * (acts[i] > 0)
    if need_params:
        grads.reverse()
    return grads, delta


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return float(loss), grad / m


def loss_soft_ce(logits: np.ndarray, targets: np.ndarray, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits / T) against probability targets."""
    m = logits.shape[0]
    logp = log_softmax(logits / temperature)
    loss = -(targets * logp).sum(axis=1).mean()
    grad = (np.exp(logp) - targets) / (m * temperature)
    return float(loss), grad


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logp = log_softmax(np.atleast_2d(logits))
    return -logp[np.arange(logp.shape[0]), np.asarray(labels).reshape(-1)]


def input_gradient(model: MlpModel, x: np.ndarray, y) -> np.ndarray:
    """Per-sample gradient of CE(f(x), y) w.r.t. x (not batch-averaged)."""
    single = np.asarray(x).ndim == 1
    logits, acts = forward(model, x, return_cache=True)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (logits.shape[0],))
    dlogits = softmax(logits)
    dlogits[np.arange(len(y)), y] -= 1.0
    _, gx = backward(model, acts, dlogits, need_params=False)
    return gx[0] if single else gx


def logit_jacobian(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (n, C) and their input Jacobian (n, C, d)."""
    logits, acts = forward(model, x, return_cache=True)
    n, c = logits.shape
    jac = np.empty((n, c, model.n_inputs))
    for k in range(c):
        onehot = np.zeros_like(logits)
        onehot[:, k] = 1.0
        _, jac[:, k, :] = backward(model, acts, onehot, need_params=False)
    return logits, jac


def predict_arrays(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = forward(model, x)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1), softmax(logits)


def predict(model: MlpModel, data) -> tuple[np.ndarray, np.ndarray]:
    return predict_arrays(model, data.features)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Optimizer:
    config: TrainConfig
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        cfg = self.config
        lr = cfg.learning_rate
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_num)


def ce_objective(model: MlpModel, xb: np.ndarray, yb: np.ndarray, rng) -> tuple[float, list[np.ndarray]]:
    logits, acts = forward(model, xb, return_cache=True)
    loss, dlogits = loss_ce(logits, yb)
    grads, _ = backward(model, acts, dlogits)
    return loss, grads


def batches(n: int, config: TrainConfig, rng):
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    for start in range(0, n, config.batch_size):
        yield order[start:start + config.batch_size]


def fit(model: MlpModel, x: np.ndarray, y: np.ndarray, config: TrainConfig, objective=ce_objective,
        tag: str = "baseline") -> tuple[MlpModel, list[float]]:
    """Minibatch training. ``objective(model, xb, yb, rng) -> (loss, grads)``.

    ``y`` may be integer labels or an (n, C) target matrix; it is sliced alongside ``x``.
    """
    config.validate()
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config)
    history = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(x), config, rng)):
            loss, grads = objective(model, x[idx], y[idx], rng)
            if not np.isfinite(loss):
                raise TrainingError(f"[{tag}] non-finite loss at epoch {epoch}, batch {b}")
            opt.step(model.params(), grads)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
    return model, history


def train(model: MlpModel, data, config: TrainConfig) -> tuple[MlpModel, list[float]]:
    if data.n == 0:
        raise ValueError("cannot train on an empty dataset")
    return fit(model, data.features, data.labels, config)


# -- persistence ------------------------------------------------------------------

def model_arrays(model: MlpModel) -> dict[str, np.ndarray]:
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    return arrays


def model_from_arrays(dims, arrays: dict[str, np.ndarray]) -> MlpModel:
    n = len(dims) - 1
    return MlpModel(list(dims), [arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])


def save_model(model: MlpModel, path, extra_meta: dict | None = None) -> None:
    meta = {"dims": model.dims}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, "mlp", MODEL_FORMAT_VERSION, meta, model_arrays(model))


def load_model(path) -> MlpModel:
    meta, arrays = read_container(path, "mlp", MODEL_FORMAT_VERSION)
    return model_from_arrays(meta["dims"], arrays)
