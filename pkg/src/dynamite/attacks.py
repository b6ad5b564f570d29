"""Evasion attacks on the tabular classifier and the (attack, epsilon) grid built from them.

All attacks operate on a batch ``x`` of shape (n, d) in standardized feature space and keep
every output inside the per-feature box ``bounds = (lo, hi)``. The L-inf bounded attacks
also keep ``|x' - x| <= eps`` coordinate-wise.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import MlpModel, forward, input_gradient, logit_jacobian, per_sample_ce, softmax
from .utils import ArtifactError, derive_seed, fmt_eps, sha256_file

ATTACK_KINDS = ("FGSM", "BIM", "PGD", "AutoPGD", "DeepFool", "ZOO")
PAPER_EPSILONS = (0.01, 0.1, 0.2, 0.3)
BOUNDED_KINDS = ("FGSM", "BIM", "PGD", "AutoPGD", "ZOO")


def _box(x, bounds):
    lo, hi = bounds
    return np.minimum(np.maximum(x, lo), hi)


def _project(x_new, x_orig, eps, bounds):
    """Clip to the box, then to the eps-ball around x_orig (the result stays in both)."""
    return np.clip(_box(x_new, bounds), x_orig - eps, x_orig + eps)


def _as_batch(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if y is not None:
        y = np.broadcast_to(np.asarray(y, dtype=np.int64).reshape(-1), (x.shape[0],))
    return x, y, single


def _out(x, single):
    return x[0] if single else x


def fgsm(model: MlpModel, x, y, eps: float, bounds):
    x, y, single = _as_batch(x, y)
    g = input_gradient(model, x, y)
    return _out(_box(x + eps * np.sign(g), bounds), single)


def bim(model: MlpModel, x, y, eps: float, steps: int, alpha: float, bounds):
    x, y, single = _as_batch(x, y)
    if alpha <= 0 or steps < 1:
        raise ValueError("bim needs alpha > 0 and steps >= 1")
    adv = x.copy()
    for _ in range(steps):
        g = input_gradient(model, adv, y)
        adv = _project(adv + alpha * np.sign(g), x, eps, bounds)
    return _out(adv, single)


def pgd(model: MlpModel, x, y, eps: float, steps: int, alpha: float, bounds, seed: int):
    x, y, single = _as_batch(x, y)
    if alpha <= 0 or steps < 1:
        raise ValueError("pgd needs alpha > 0 and steps >= 1")
    rng = np.random.default_rng(seed)
    adv = _project(x + rng.uniform(-eps, eps, size=x.shape), x, eps, bounds)
    for _ in range(steps):
        g = input_gradient(model, adv, y)
        adv = _project(adv + alpha * np.sign(g), x, eps, bounds)
    return _out(adv, single)


def apgd_checkpoints(steps: int) -> list[int]:
    """Iteration indices at which the step-size rule is checked."""
    p = [0.0, 0.22]
    while True:
        nxt = p[-1] + max(p[-1] - p[-2] - 0.03, 0.06)
        if nxt > 1:
            break
        p.append(nxt)
    return sorted({int(math.ceil(v * steps)) for v in p[1:] if math.ceil(v * steps) < steps})


def auto_pgd(model: MlpModel, x, y, eps: float, steps: int, bounds, seed: int,
             momentum: float = 0.75, rho: float = 0.75, return_info: bool = False):
    """Step-size-free PGD: momentum iterates, step halving at checkpoints, best-loss output."""
    x, y, single = _as_batch(x, y)
    if steps < 2:
        raise ValueError("auto_pgd needs at least 2 steps")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    x0 = _project(x + rng.uniform(-eps, eps, size=x.shape), x, eps, bounds)
    eta = np.full((n, 1), 2.0 * eps)
    loss0 = per_sample_ce(forward(model, x0), y)
    x1 = _project(x0 + eta * np.sign(input_gradient(model, x0, y)), x, eps, bounds)
    loss1 = per_sample_ce(forward(model, x1), y)

    better = loss1 > loss0
    x_best = np.where(better[:, None], x1, x0)
    f_best = np.maximum(loss0, loss1)
    prev, cur, f_cur = x0, x1, loss1
    successes = better.astype(np.int64)
    checkpoints = apgd_checkpoints(steps)
    last_w = 0
    last_eta = eta.copy()
    last_f_best = f_best.copy()
    checkpoint_losses = []

    for k in range(1, steps - 1):
        z = _project(cur + eta * np.sign(input_gradient(model, cur, y)), x, eps, bounds)
        nxt = _project(cur + momentum * (z - cur) + (1.0 - momentum) * (cur - prev), x, eps, bounds)
        f_nxt = per_sample_ce(forward(model, nxt), y)
        successes += f_nxt > f_cur
        improved = f_nxt > f_best
        x_best = np.where(improved[:, None], nxt, x_best)
        f_best = np.where(improved, f_nxt, f_best)
        prev, cur, f_cur = cur, nxt, f_nxt
        if k + 1 in checkpoints:
            w = k + 1
            checkpoint_losses.append(f_cur.copy())
            cond1 = successes < rho * (w - last_w)
            cond2 = (last_eta[:, 0] == eta[:, 0]) & (last_f_best == f_best)
            halve = cond1 | cond2
            last_eta = eta.copy()
            last_f_best = f_best.copy()
            eta = np.where(halve[:, None], eta / 2.0, eta)
            cur = np.where(halve[:, None], x_best, cur)
            prev = np.where(halve[:, None], x_best, prev)
            f_cur = np.where(halve, f_best, f_cur)
            successes = np.zeros(n, dtype=np.int64)
            last_w = w
    out = _out(x_best, single)
    if return_info:
        losses = np.stack(checkpoint_losses, axis=1) if checkpoint_losses else np.zeros((n, 0))
        return out, {"best_loss": f_best, "checkpoint_losses": losses}
    return out


def deepfool(model: MlpModel, x, max_iter: int, overshoot: float, bounds, y=None):
    """Multiclass DeepFool. Returns (x', flags); flags mark samples with an all-flat model.

    When ``y`` is given, samples already misclassified are returned unchanged.
    """
    x, y, single = _as_batch(x, y)
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    n = x.shape[0]
    orig = np.argmax(forward(model, x), axis=1)
    active = np.ones(n, dtype=bool) if y is None else orig == y
    flags = np.zeros(n, dtype=bool)
    r_tot = np.zeros_like(x)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        point = x[idx] + (1.0 + overshoot) * r_tot[idx]
        logits, jac = logit_jacobian(model, point)
        cur = np.argmax(logits, axis=1)
        c = orig[idx]
        flipped = cur != c
        active[idx[flipped]] = False
        keep = ~flipped
        if not keep.any():
            break
        idx, logits, jac, c = idx[keep], logits[keep], jac[keep], c[keep]
        sub = np.arange(len(idx))
        w = jac - jac[sub, c][:, None, :]
        f_hat = logits - logits[sub, c][:, None]
        norms = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f_hat) / norms
        dist[sub, c] = np.inf
        dist[norms == 0] = np.inf
        flat = np.isinf(dist).all(axis=1)
        if flat.any():
            flags[idx[flat]] = True
            active[idx[flat]] = False
        ok = ~flat
        idx, sub_ok = idx[ok], sub[ok]
        k_star = np.argmin(dist[sub_ok], axis=1)
        w_star = w[sub_ok, k_star]
        f_star = np.abs(f_hat[sub_ok, k_star])
        r_tot[idx] += (f_star / np.sum(w_star * w_star, axis=1))[:, None] * w_star
    r_tot[flags] = 0.0
    adv = _box(x + (1.0 + overshoot) * r_tot, bounds)
    adv[flags] = x[flags]
    if single:
        return adv[0], flags
    return adv, flags


def query_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Black-box loss: CE computed from the model's output probabilities only."""
    probs = softmax(forward(model, x))
    return -np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))


def symmetric_difference(loss_fn, x: np.ndarray, coords: np.ndarray, delta: float) -> np.ndarray:
    """(L(x + delta e_i) - L(x - delta e_i)) / (2 delta) for each row's coordinates in ``coords``.

    ``loss_fn`` maps an (n, d) batch to n losses.
    """
    rows = np.arange(x.shape[0])
    est = np.empty(coords.shape)
    for j in range(coords.shape[1]):
        plus = x.copy()
        minus = x.copy()
        plus[rows, coords[:, j]] += delta
        minus[rows, coords[:, j]] -= delta
        est[:, j] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * delta)
    return est


def zoo_gradient_estimate(model: MlpModel, x, y, coords: np.ndarray, delta: float) -> np.ndarray:
    """Query-only gradient estimates for the coordinates in ``coords`` (n, k)."""
    x, y, _ = _as_batch(x, y)
    return symmetric_difference(lambda z: query_loss(model, z, y), x, coords, delta)


def zoo(model: MlpModel, x, y, eps: float, iters: int, delta: float, step: float,
        coords_per_iter: int, bounds, seed: int):
    x, y, single = _as_batch(x, y)
    if delta <= 0:
        raise ValueError("delta must be positive")
    n, d = x.shape
    k = min(coords_per_iter, d)
    rng = np.random.default_rng(seed)
    rows = np.arange(n)[:, None]
    adv = x.copy()
    for _ in range(iters):
        coords = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        g = zoo_gradient_estimate(model, adv, y, coords, delta)
        moved = adv.copy()
        moved[rows, coords] += step * np.sign(g)
        adv = _project(moved, x, eps, bounds)
    return _out(adv, single)


# -- grid -------------------------------------------------------------------------

@dataclass
class AttackParams:
    bim_steps: int = 10
    pgd_steps: int = 10
    step_fraction: float = 0.25  # alpha = step_fraction * eps for BIM/PGD/ZOO
    autopgd_steps: int = 20
    deepfool_max_iter: int = 50
    zoo_iters: int = 40
    zoo_delta: float = 1e-3
    zoo_coords: int = 16


def run_attack(kind: str, model: MlpModel, x, y, eps: float, bounds, seed: int,
               params: AttackParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch one attack. Returns (x', per-sample failure flags)."""
    p = params or AttackParams()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    flags = np.zeros(x.shape[0], dtype=bool)
    if kind == "FGSM":
        return fgsm(model, x, y, eps, bounds), flags
    if eps == 0 and kind in BOUNDED_KINDS:
        return x.copy(), flags
    alpha = p.step_fraction * eps
    if kind == "BIM":
        return bim(model, x, y, eps, p.bim_steps, alpha, bounds), flags
    if kind == "PGD":
        return pgd(model, x, y, eps, p.pgd_steps, alpha, bounds, seed), flags
    if kind == "AutoPGD":
        return auto_pgd(model, x, y, eps, p.autopgd_steps, bounds, seed), flags
    if kind == "DeepFool":
        return deepfool(model, x, p.deepfool_max_iter, eps, bounds, y=y)
    if kind == "ZOO":
        return zoo(model, x, y, eps, p.zoo_iters, p.zoo_delta, alpha, p.zoo_coords, bounds, seed), flags
    raise ValueError(f"unknown attack kind {kind!r}")


def cell_id(kind: str, eps: float) -> str:
    return f"{kind}_eps{fmt_eps(eps)}"


@dataclass
class AdversarialGrid:
    cells: dict[tuple[str, float], Dataset]
    flags: dict[tuple[str, float], np.ndarray]
    seeds: dict[tuple[str, float], int]
    provenance: dict = field(default_factory=dict)

    def keys(self) -> list[tuple[str, float]]:
        return list(self.cells)

    def __len__(self) -> int:
        return len(self.cells)


def generate_grid(model: MlpModel, test: Dataset, kinds, epsilons, bounds, seed: int,
                  params: AttackParams | None = None, threads: int = 1,
                  provenance: dict | None = None) -> AdversarialGrid:
    kinds, epsilons = list(kinds), [float(e) for e in epsilons]
    if not kinds or not epsilons:
        raise ValueError("at least one attack kind and one epsilon required")
    keys = [(k, e) for k in kinds for e in epsilons]
    seeds = {key: derive_seed(seed, key[0], fmt_eps(key[1])) for key in keys}

    def one(key):
        return run_attack(key[0], model, test.features, test.labels, key[1], bounds, seeds[key], params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, keys))
    else:
        results = [one(key) for key in keys]
    cells, flags = {}, {}
    for key, (adv, fl) in zip(keys, results):
        cells[key] = test.with_features(adv)
        flags[key] = fl
    prov = dict(provenance or {})
    prov.setdefault("params", asdict(params or AttackParams()))
    return AdversarialGrid(cells, flags, seeds, prov)


GRID_MANIFEST = "manifest.json"


def save_grid(grid: AdversarialGrid, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for (kind, eps), data in grid.cells.items():
        name = f"{cell_id(kind, eps)}.csv"
        path = directory / name
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([*data.feature_names, "label"])
            for row, label in zip(data.features, data.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])
        written.append(path)
        entries.append({
            "kind": kind, "epsilon": eps, "file": name, "seed": grid.seeds[(kind, eps)],
            "n": data.n, "sha256": sha256_file(path),
            "flagged": np.flatnonzero(grid.flags[(kind, eps)]).tolist(),
        })
    first = next(iter(grid.cells.values()))
    manifest = {
        "n_classes": first.n_classes, "feature_names": first.feature_names,
        "provenance": grid.provenance, "cells": entries,
    }
    mpath = directory / GRID_MANIFEST
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written


def load_grid(directory) -> AdversarialGrid:
    directory = Path(directory)
    mpath = directory / GRID_MANIFEST
    if not mpath.exists():
        raise ArtifactError(f"{mpath}: grid manifest missing")
    manifest = json.loads(mpath.read_text())
    cells, flags, seeds = {}, {}, {}
    for entry in manifest["cells"]:
        path = directory / entry["file"]
        if not path.exists():
            raise ArtifactError(f"{path}: grid cell missing")
        if sha256_file(path) != entry["sha256"]:
            raise ArtifactError(f"{path}: content hash does not match the grid manifest")
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [r for r in reader if r]
        feats = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), -1)
        labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        key = (entry["kind"], float(entry["epsilon"]))
        cells[key] = Dataset(feats, labels, manifest["n_classes"], manifest["feature_names"])
        fl = np.zeros(len(labels), dtype=bool)
        fl[entry["flagged"]] = True
        flags[key] = fl
        seeds[key] = entry["seed"]
    return AdversarialGrid(cells, flags, seeds, manifest["provenance"])
