"""The nine defenses: seven retrained classifiers and two input transforms on the baseline."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import _project, pgd
from .data import Dataset
from .nn import (
    MlpModel,
    Optimizer,
    TrainConfig,
    TrainingError,
    backward,
    batches,
    fit,
    forward,
    init_mlp,
    log_softmax,
    loss_ce,
    loss_soft_ce,
    model_arrays,
    model_from_arrays,
    predict_arrays,
    softmax,
)
from .utils import derive_seed, read_container, write_container

DEFENSE_FORMAT_VERSION = 1
KL_FLOOR = 1e-12


class DefenseKind(enum.IntEnum):
    PgdAT = 0
    InterpolatedAT = 1
    TRADES = 2
    FreeAT = 3
    GaussianAugmenter = 4
    DefensiveDistillation = 5
    RSLAD = 6
    FeatureSqueezing = 7
    GaussianNoise = 8


TRANSFORM_KINDS = (DefenseKind.FeatureSqueezing, DefenseKind.GaussianNoise)
RSLAD_VARIANTS = {"rslad10": 10, "rslad100": 25}


class DefenseConfigError(ValueError):
    pass


@dataclass
class InnerAttack:
    """PGD used inside adversarial training."""

    epsilon: float = 0.1
    steps: int = 7
    step_fraction: float = 0.25


@dataclass
class DefenseConfig:
    attack_for_training: InnerAttack = field(default_factory=InnerAttack)
    trades_beta: float = 6.0
    mixup_alpha: float = 1.0
    free_replays: int = 4
    augment_sigma: float = 0.1
    distill_temperature: float = 20.0
    rslad_variant: str = "rslad10"
    rslad_inner_steps: int = 10
    squeeze_bits: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        checks = [
            (self.trades_beta > 0, "trades_beta must be > 0"),
            (self.mixup_alpha > 0, "mixup_alpha must be > 0"),
            (self.free_replays >= 1, "free_replays must be >= 1"),
            (self.augment_sigma >= 0, "augment_sigma must be >= 0"),
            (self.distill_temperature > 0, "distill_temperature must be > 0"),
            (self.rslad_inner_steps >= 1, "rslad_inner_steps must be >= 1"),
            (1 <= self.squeeze_bits <= 16, "squeeze_bits must lie in [1, 16]"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (self.attack_for_training.epsilon >= 0, "attack_for_training.epsilon must be >= 0"),
            (self.attack_for_training.steps >= 1, "attack_for_training.steps must be >= 1"),
            (self.attack_for_training.step_fraction > 0, "attack_for_training.step_fraction must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DefenseConfigError(msg)


def rslad_config(config: DefenseConfig, variant: str) -> DefenseConfig:
    if variant not in RSLAD_VARIANTS:
        raise DefenseConfigError(f"unknown RSLAD variant {variant!r}")
    out = DefenseConfig(**{**asdict(config), "attack_for_training": InnerAttack(**asdict(config.attack_for_training))})
    out.rslad_variant = variant
    out.rslad_inner_steps = RSLAD_VARIANTS[variant]
    return out


@dataclass
class DefendedModel:
    kind: DefenseKind
    model: MlpModel
    transform: dict | None = None
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = DefenseKind(self.kind)
        if (self.kind in TRANSFORM_KINDS) != (self.transform is not None):
            raise ValueError(f"{self.kind.name}: transform must be present exactly for input-transform defenses")


# -- building blocks ----------------------------------------------------------------

def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with 1e-12 flooring of both arguments."""
    p = np.maximum(p, KL_FLOOR)
    q = np.maximum(q, KL_FLOOR)
    return np.sum(p * (np.log(p) - np.log(q)), axis=1)


def trades_loss(model: MlpModel, x, x_adv, y, beta: float) -> float:
    lc = forward(model, x)
    la = forward(model, x_adv)
    ce, _ = loss_ce(lc, y)
    return ce + beta * float(kl_divergence(softmax(lc), softmax(la)).mean())


def distill_soft_labels(teacher: MlpModel, x, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return softmax(forward(teacher, x) / temperature)


def mixup(x1, y1, x2, y2, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    x1, x2, y1, y2 = (np.asarray(a, dtype=np.float64) for a in (x1, x2, y1, y2))
    return lam * x1 + (1.0 - lam) * x2, lam * y1 + (1.0 - lam) * y2


def feature_squeeze(x, bits: int, bounds) -> np.ndarray:
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    levels = 2 ** bits - 1
    u = np.clip((np.asarray(x, dtype=np.float64) - lo) / safe, 0.0, 1.0)
    return np.where(span > 0, lo + np.round(u * levels) / levels * span, lo)


def _row_seed(seed: int, row: np.ndarray) -> list[int]:
    digest = hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=8).digest()
    return [int(seed), int.from_bytes(digest, "little")]


def gaussian_perturb(x, sigma: float, seed: int, bounds=None) -> np.ndarray:
    """Add N(0, sigma^2) noise; each row's draw is keyed by (seed, row content)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if sigma == 0:
        out = x2.copy()
    else:
        noise = np.empty_like(x2)
        for i, row in enumerate(x2):
            noise[i] = np.random.default_rng(_row_seed(seed, row)).standard_normal(x2.shape[1])
        out = x2 + sigma * noise
    if bounds is not None:
        out = np.minimum(np.maximum(out, bounds[0]), bounds[1])
    return out[0] if single else out


def _inner_pgd(model, xb, yb, attack: InnerAttack, bounds, rng):
    eps = attack.epsilon
    if eps == 0:
        return xb.copy()
    return pgd(model, xb, yb, eps, attack.steps, attack.step_fraction * eps, bounds, int(rng.integers(2**63)))


def _kl_ascent(model, xb, target_probs, steps, eps, alpha, bounds, rng):
    """PGD on the input maximizing KL(target || softmax f(x'))."""
    adv = _project(xb + 0.001 * rng.standard_normal(xb.shape), xb, eps, bounds)
    for _ in range(steps):
        logits, acts = forward(model, adv, return_cache=True)
        _, gx = backward(model, acts, softmax(logits) - target_probs, need_params=False)
        adv = _project(adv + alpha * np.sign(gx), xb, eps, bounds)
    return adv


def _add(a, b, scale=1.0):
    return [u + scale * v for u, v in zip(a, b)]


def _kl_grads(model, x, target, weight):
    """Loss and parameter grads of weight * mean KL(target || softmax f(x))."""
    logits, acts = forward(model, x, return_cache=True)
    q = softmax(logits)
    m = x.shape[0]
    loss = weight * float(kl_divergence(target, q).mean())
    grads, _ = backward(model, acts, weight * (q - target) / m)
    return loss, grads


# -- per-kind trainers -------------------------------------------------------------------

def _objective_pgd_at(cfg, bounds):
    def objective(model, xb, yb, rng):
        adv = _inner_pgd(model, xb, yb, cfg.attack_for_training, bounds, rng)
        logits, acts = forward(model, adv, return_cache=True)
        loss, dl = loss_ce(logits, yb)
        grads, _ = backward(model, acts, dl)
        return loss, grads
    return objective


def _objective_interpolated(cfg, bounds, n_classes):
    def objective(model, xb, yb, rng):
        adv = _inner_pgd(model, xb, yb, cfg.attack_for_training, bounds, rng)
        onehot = np.eye(n_classes)[yb]
        total, grads = 0.0, None
        for source in (xb, adv):
            lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
            perm = rng.permutation(len(xb))
            xm, ym = mixup(source, onehot, source[perm], onehot[perm], lam)
            logits, acts = forward(model, xm, return_cache=True)
            loss, dl = loss_soft_ce(logits, ym)
            g, _ = backward(model, acts, dl)
            total += loss
            grads = g if grads is None else _add(grads, g)
        return total, grads
    return objective


def _objective_trades(cfg, bounds):
    attack = cfg.attack_for_training

    def objective(model, xb, yb, rng):
        lc, acts_c = forward(model, xb, return_cache=True)
        p = softmax(lc)
        eps = attack.epsilon
        adv = _kl_ascent(model, xb, p, attack.steps, eps, attack.step_fraction * eps, bounds, rng) if eps > 0 else xb
        la, acts_a = forward(model, adv, return_cache=True)
        q = softmax(la)
        m = xb.shape[0]
        ce, dce = loss_ce(lc, yb)
        kl_rows = kl_divergence(p, q)
        kl = float(kl_rows.mean())
        # d KL(p||q) / d clean logits = p * (log p - log q - KL); / d adv logits = q - p
        logp, logq = log_softmax(lc), log_softmax(la)
        d_clean = p * (logp - logq - kl_rows[:, None])
        d_adv = q - p
        g_clean, _ = backward(model, acts_c, dce + cfg.trades_beta * d_clean / m)
        g_adv, _ = backward(model, acts_a, cfg.trades_beta * d_adv / m)
        return ce + cfg.trades_beta * kl, _add(g_clean, g_adv)
    return objective


def _objective_augment(cfg):
    def objective(model, xb, yb, rng):
        noisy = xb + cfg.augment_sigma * rng.standard_normal(xb.shape)
        logits, acts = forward(model, noisy, return_cache=True)
        loss, dl = loss_ce(logits, yb)
        grads, _ = backward(model, acts, dl)
        return loss, grads
    return objective


def _objective_soft(temperature):
    def objective(model, xb, tb, rng):
        logits, acts = forward(model, xb, return_cache=True)
        loss, dl = loss_soft_ce(logits, tb, temperature)
        grads, _ = backward(model, acts, dl)
        return loss, grads
    return objective


def _objective_rslad(cfg, bounds, teacher):
    attack = cfg.attack_for_training
    eps = attack.epsilon
    # adversarial / natural weights of the distillation loss
    w_adv, w_nat = 5.0 / 6.0, 1.0 / 6.0

    def objective(model, xb, yb, rng):
        soft = softmax(forward(teacher, xb))
        if eps > 0:
            adv = _kl_ascent(model, xb, soft, cfg.rslad_inner_steps, eps, attack.step_fraction * eps, bounds, rng)
        else:
            adv = xb
        la, ga = _kl_grads(model, adv, soft, w_adv)
        ln, gn = _kl_grads(model, xb, soft, w_nat)
        return la + ln, _add(ga, gn)
    return objective


def _train_free_at(model, x, y, cfg, tcfg, bounds):
    """Free adversarial training: each replay's input gradient also refreshes the perturbation."""
    tcfg.validate()
    model = model.copy()
    rng = np.random.default_rng(tcfg.seed)
    opt = Optimizer(tcfg)
    eps = cfg.attack_for_training.epsilon
    history = []
    epochs = max(1, math.ceil(tcfg.epochs / cfg.free_replays))
    for epoch in range(epochs):
        delta = None  # persists across batches, reset every epoch
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(x), tcfg, rng)):
            xb, yb = x[idx], y[idx]
            if delta is None or delta.shape[0] < len(idx):
                delta = np.zeros((tcfg.batch_size, x.shape[1]))
            for _ in range(cfg.free_replays):
                d = delta[: len(idx)]
                adv = _project(xb + d, xb, eps, bounds)
                logits, acts = forward(model, adv, return_cache=True)
                loss, dl = loss_ce(logits, yb)
                if not np.isfinite(loss):
                    raise TrainingError(f"[FreeAT] non-finite loss at epoch {epoch}, batch {b}")
                grads, gx = backward(model, acts, dl)
                opt.step(model.params(), grads)
                delta[: len(idx)] = _project(adv + eps * np.sign(gx), xb, eps, bounds) - xb
                total += loss * len(idx)
                count += len(idx)
        history.append(total / count)
    return model, history


def _fresh(baseline: MlpModel, seed: int) -> MlpModel:
    return init_mlp(baseline.dims, seed)


def train_defense(kind, config: DefenseConfig, train: Dataset, baseline: MlpModel, bounds,
                  train_config: TrainConfig | None = None, teacher: MlpModel | None = None) -> DefendedModel:
    """Train or wrap one defense. ``teacher`` (RSLAD only) should be adversarially trained;
    when omitted a PGD-AT teacher is trained first."""
    kind = DefenseKind(kind)
    config.validate()
    if train.n == 0:
        raise ValueError("cannot train a defense on an empty dataset")
    base_tc = train_config or TrainConfig()
    seed = derive_seed(config.seed, kind.name)
    tc = TrainConfig(**{**asdict(base_tc), "seed": seed})
    bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
    meta = {"config": asdict(config), "train_config": asdict(tc), "seed": seed}
    x, y = train.features, train.labels
    tag = kind.name

    if kind == DefenseKind.FeatureSqueezing:
        transform = {"type": "squeeze", "bits": config.squeeze_bits,
                     "lo": bounds[0].tolist(), "hi": bounds[1].tolist()}
        return DefendedModel(kind, baseline.copy(), transform, meta)
    if kind == DefenseKind.GaussianNoise:
        transform = {"type": "noise", "sigma": config.noise_sigma, "seed": seed,
                     "lo": bounds[0].tolist(), "hi": bounds[1].tolist()}
        return DefendedModel(kind, baseline.copy(), transform, meta)

    init = _fresh(baseline, derive_seed(seed, "init"))
    if kind == DefenseKind.PgdAT:
        model, hist = fit(init, x, y, tc, _objective_pgd_at(config, bounds), tag)
    elif kind == DefenseKind.InterpolatedAT:
        model, hist = fit(init, x, y, tc, _objective_interpolated(config, bounds, train.n_classes), tag)
    elif kind == DefenseKind.TRADES:
        model, hist = fit(init, x, y, tc, _objective_trades(config, bounds), tag)
    elif kind == DefenseKind.FreeAT:
        model, hist = _train_free_at(init, x, y, config, tc, bounds)
    elif kind == DefenseKind.GaussianAugmenter:
        model, hist = fit(init, x, y, tc, _objective_augment(config), tag)
    elif kind == DefenseKind.DefensiveDistillation:
        t = config.distill_temperature
        onehot = np.eye(train.n_classes)[y]
        teacher_dd, _ = fit(init, x, onehot, tc, _objective_soft(t), tag + "-teacher")
        soft = distill_soft_labels(teacher_dd, x, t)
        student_tc = TrainConfig(**{**asdict(tc), "seed": derive_seed(seed, "student")})
        student_init = _fresh(baseline, derive_seed(seed, "student-init"))
        model, hist = fit(student_init, x, soft, student_tc, _objective_soft(t), tag + "-student")
    elif kind == DefenseKind.RSLAD:
        if teacher is None:
            teacher = train_defense(DefenseKind.PgdAT, config, train, baseline, bounds, base_tc).model
        model, hist = fit(init, x, y, tc, _objective_rslad(config, bounds, teacher), tag)
        meta["variant"] = config.rslad_variant
    else:  # pragma: no cover - IntEnum makes this unreachable
        raise ValueError(f"unknown defense kind {kind}")
    meta["history"] = [float(h) for h in hist]
    return DefendedModel(kind, model, None, meta)


def apply_transform(dm: DefendedModel, x: np.ndarray) -> np.ndarray:
    t = dm.transform
    if t is None:
        return x
    bounds = (np.asarray(t["lo"]), np.asarray(t["hi"]))
    if t["type"] == "squeeze":
        return feature_squeeze(x, t["bits"], bounds)
    if t["type"] == "noise":
        return gaussian_perturb(x, t["sigma"], t["seed"], bounds)
    raise ValueError(f"unknown transform {t['type']!r}")


def defended_predict_arrays(dm: DefendedModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return predict_arrays(dm.model, apply_transform(dm, np.atleast_2d(np.asarray(x, dtype=np.float64))))


def defended_predict(dm: DefendedModel, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return defended_predict_arrays(dm, data.features)


def save_defense(dm: DefendedModel, path) -> None:
    meta = {
        "dims": dm.model.dims,
        "defense": {"kind": int(dm.kind), "name": dm.kind.name,
                    "variant": dm.train_meta.get("variant"), "transform": dm.transform},
        "train_meta": dm.train_meta,
    }
    write_container(path, "defended-mlp", DEFENSE_FORMAT_VERSION, meta, model_arrays(dm.model))


def load_defense(path) -> DefendedModel:
    meta, arrays = read_container(path, "defended-mlp", DEFENSE_FORMAT_VERSION)
    model = model_from_arrays(meta["dims"], arrays)
    header = meta["defense"]
    return DefendedModel(DefenseKind(header["kind"]), model, header["transform"], meta["train_meta"])
