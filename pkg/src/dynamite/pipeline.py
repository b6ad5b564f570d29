"""Six-stage orchestration over content-hashed artifacts.

Every stage verifies its upstream manifests (configuration fingerprint plus the SHA-256 of
each artifact it consumes), writes its outputs, then records a manifest under
``manifests/`` and appends the same record to ``ledger.jsonl``.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attacks, data, defenses, evaluation, gbt, nn, router
from .config import PipelineConfig
from .metrics import macro_f1
from .utils import ArtifactError, derive_seed, read_container, sha256_file, write_container

log = logging.getLogger("dynamite")

STAGES = ("preprocess", "train-baseline", "gen-attacks", "train-defenses", "build-router", "evaluate")

UPSTREAM = {
    "preprocess": (),
    "train-baseline": ("preprocess",),
    "gen-attacks": ("preprocess", "train-baseline"),
    "train-defenses": ("preprocess", "train-baseline"),
    "build-router": ("preprocess", "gen-attacks", "train-defenses"),
    "evaluate": ("preprocess", "train-baseline", "gen-attacks", "train-defenses", "build-router"),
}

# config sections each stage's outputs depend on
SECTIONS = {
    "preprocess": ("seed", "data"),
    "train-baseline": ("seed", "data", "model"),
    "gen-attacks": ("seed", "data", "model", "attack"),
    "train-defenses": ("seed", "data", "model", "defense"),
    "build-router": ("seed", "data", "model", "attack", "defense", "selector"),
    "evaluate": ("seed", "data", "model", "attack", "defense", "selector", "eval"),
}

TRAINING_SET_VERSION = 1


class InvariantError(RuntimeError):
    """An evaluation produced numbers that violate a hard invariant."""


@dataclass
class StageManifest:
    stage: str
    config_hash: str
    inputs: dict
    outputs: dict
    seeds: dict
    duration_s: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def stage_seeds(config: PipelineConfig) -> dict:
    s = config.seed
    return {
        "master": s,
        "synth": s,
        "split": derive_seed(s, "split"),
        "baseline_init": derive_seed(s, "baseline-init"),
        "baseline_train": derive_seed(s, "baseline-train"),
        "attacks": derive_seed(s, "attacks"),
        "defenses": derive_seed(s, "defenses"),
        "selector": derive_seed(s, "selector"),
        "random": derive_seed(s, "random"),
    }


class Run:
    """Paths and manifest bookkeeping for one output directory."""

    def __init__(self, config: PipelineConfig, out: str | Path | None = None):
        self.config = config
        self.root = Path(out if out is not None else config.output_dir)
        self.seeds = stage_seeds(config)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def load_manifest(self, stage: str) -> dict:
        p = self.manifest_path(stage)
        if not p.exists():
            raise ArtifactError(f"artifacts of stage '{stage}' are missing under {self.root}; run `dynamite {stage}` first")
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            raise ArtifactError(f"{p}: manifest is corrupt; rerun `dynamite {stage}`") from None

    def verify_upstream(self, stage: str) -> dict:
        """Check every upstream manifest and artifact; returns {relpath: sha256} of all inputs."""
        inputs = {}
        for up in UPSTREAM[stage]:
            m = self.load_manifest(up)
            if m.get("config_hash") != self.config.fingerprint(SECTIONS[up]):
                raise ArtifactError(f"stage '{up}' was produced with a different configuration; "
                                    f"rerun `dynamite {up}`")
            for rel, digest in m["outputs"].items():
                p = self.path(rel)
                if not p.exists():
                    raise ArtifactError(f"{p} is missing; rerun `dynamite {up}`")
                if sha256_file(p) != digest:
                    raise ArtifactError(f"{p} does not match the hash recorded by '{up}'; rerun `dynamite {up}`")
                inputs[rel] = digest
        return inputs

    def record(self, stage: str, inputs: dict, outputs: list[Path], seeds: dict, t0: float,
               warnings: list | None = None) -> StageManifest:
        rels = sorted(p.relative_to(self.root).as_posix() for p in outputs)
        manifest = StageManifest(stage, self.config.fingerprint(SECTIONS[stage]), dict(sorted(inputs.items())),
                                 {r: sha256_file(self.path(r)) for r in rels}, seeds,
                                 round(time.perf_counter() - t0, 3), list(warnings or []))
        mp = self.manifest_path(stage)
        mp.parent.mkdir(parents=True, exist_ok=True)
        mp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
        entry = {**manifest.to_dict(), "config": self.config.to_dict()}
        with self.path("ledger.jsonl").open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return manifest


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _bounds(run: Run):
    state = data.PreprocessState.from_dict(json.loads(run.path("data/preprocess.json").read_text()))
    return state.lo, state.hi


def _defense_file(kind: defenses.DefenseKind) -> str:
    return f"defenses/{int(kind)}_{kind.name}.bin"


def _load_defenses(run: Run) -> list[defenses.DefendedModel]:
    return [defenses.load_defense(run.path(_defense_file(k))) for k in defenses.DefenseKind]


# -- stages -----------------------------------------------------------------------

def stage_preprocess(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    cfg = run.config.data
    inputs = run.verify_upstream("preprocess")
    if cfg.source == "csv":
        schema = data.load_schema(cfg.schema_path)
        table = data.load_csv(cfg.csv_path, schema)
        inputs = {str(cfg.csv_path): sha256_file(cfg.csv_path), str(cfg.schema_path): sha256_file(cfg.schema_path)}
    else:
        table = data.synth_generate(cfg.synth)
    state, train, test = data.prepare(table, cfg.cleaning, cfg.test_fraction, run.seeds["split"], cfg.stratified)
    run.path("data").mkdir(parents=True, exist_ok=True)
    data.save_dataset(train, run.path("data/train.bin"))
    data.save_dataset(test, run.path("data/test.bin"))
    outs = [run.path("data/train.bin"), run.path("data/test.bin"),
            _write_json(run.path("data/preprocess.json"), state.to_dict())]
    log.info("preprocess: %d train / %d test rows, %d features", train.n, test.n, train.d)
    return run.record("preprocess", inputs, outs, {k: run.seeds[k] for k in ("synth", "split")}, t0)


def stage_train_baseline(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    inputs = run.verify_upstream("train-baseline")
    train = data.load_dataset(run.path("data/train.bin"))
    test = data.load_dataset(run.path("data/test.bin"))
    mcfg = run.config.model
    dims = [train.d, *mcfg.hidden, train.n_classes]
    model = nn.init_mlp(dims, run.seeds["baseline_init"])
    tc = replace(mcfg.train, seed=run.seeds["baseline_train"])
    model, history = nn.train(model, train, tc)
    clean = macro_f1(nn.predict(model, test)[0], test.labels, test.n_classes)
    run.path("models").mkdir(parents=True, exist_ok=True)
    nn.save_model(model, run.path("models/baseline.bin"))
    summary = {"dims": dims, "clean_test_macro_f1": clean, "loss_history": [float(h) for h in history]}
    outs = [run.path("models/baseline.bin"), _write_json(run.path("models/baseline.json"), summary)]
    log.info("train-baseline: clean macro-F1 %.4f", clean)
    return run.record("train-baseline", inputs, outs,
                      {k: run.seeds[k] for k in ("baseline_init", "baseline_train")}, t0)


def stage_gen_attacks(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    inputs = run.verify_upstream("gen-attacks")
    acfg = run.config.attack
    model = nn.load_model(run.path("models/baseline.bin"))
    test = data.load_dataset(run.path("data/test.bin"))
    grid = attacks.generate_grid(model, test, acfg.kinds, acfg.epsilons, _bounds(run), run.seeds["attacks"],
                                 acfg.params, threads=threads,
                                 provenance={"baseline_sha256": inputs["models/baseline.bin"],
                                             "test_sha256": inputs["data/test.bin"]})
    outs = attacks.save_grid(grid, run.path("attacks"))
    warnings = []
    if len(grid) == 1:
        warnings.append("single-cell grid: the attack-train cell doubles as the only attack-test cell")
        log.warning(warnings[-1])
    flagged = sum(int(f.sum()) for f in grid.flags.values())
    log.info("gen-attacks: %d cells, %d flagged samples", len(grid), flagged)
    return run.record("gen-attacks", inputs, outs, {"attacks": run.seeds["attacks"]}, t0, warnings)


def stage_train_defenses(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    inputs = run.verify_upstream("train-defenses")
    train = data.load_dataset(run.path("data/train.bin"))
    test = data.load_dataset(run.path("data/test.bin"))
    baseline = nn.load_model(run.path("models/baseline.bin"))
    bounds = _bounds(run)
    dcfg = replace(run.config.defense.params, seed=run.seeds["defenses"])
    tc = run.config.model.train

    def one(kind, teacher=None):
        t = time.perf_counter()
        dm = defenses.train_defense(kind, dcfg, train, baseline, bounds, tc, teacher=teacher)
        log.info("train-defenses: %s in %.1fs", kind.name, time.perf_counter() - t)
        return dm

    # RSLAD distils from the PGD-AT model, so that one is trained first
    pgd_at = one(defenses.DefenseKind.PgdAT)
    rest = [k for k in defenses.DefenseKind if k != defenses.DefenseKind.PgdAT]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        trained = list(pool.map(lambda k: one(k, pgd_at.model if k == defenses.DefenseKind.RSLAD else None), rest))
    run.path("defenses").mkdir(parents=True, exist_ok=True)
    outs, clean, warnings = [], {}, []
    for dm in [pgd_at, *trained]:
        p = run.path(_defense_file(dm.kind))
        defenses.save_defense(dm, p)
        outs.append(p)
        clean[dm.kind.name] = macro_f1(defenses.defended_predict(dm, test)[0], test.labels, test.n_classes)
        if dm.kind not in defenses.TRANSFORM_KINDS and clean[dm.kind.name] < run.config.defense.min_clean_f1:
            warnings.append(f"{dm.kind.name}: clean macro-F1 {clean[dm.kind.name]:.4f} below "
                            f"{run.config.defense.min_clean_f1}")
            log.warning(warnings[-1])
    outs.append(_write_json(run.path("defenses/summary.json"), {"clean_test_macro_f1": clean}))
    seeds = {"defenses": run.seeds["defenses"],
             **{k.name: derive_seed(dcfg.seed, k.name) for k in defenses.DefenseKind}}
    return run.record("train-defenses", inputs, outs, seeds, t0, warnings)


def save_training_set(ts: router.SelectorTrainingSet, path) -> None:
    write_container(path, "selector-training", TRAINING_SET_VERSION, {},
                    {"features": ts.features, "labels": ts.labels, "tie_meta": ts.tie_meta,
                     "cell_index": ts.cell_index})


def load_training_set(path) -> router.SelectorTrainingSet:
    _, a = read_container(path, "selector-training", TRAINING_SET_VERSION)
    return router.SelectorTrainingSet(a["features"], a["labels"], a["tie_meta"], a["cell_index"])


def split_cells(run: Run, grid: attacks.AdversarialGrid):
    train_cells, test_cells = router.select_attack_train_cells(grid, run.config.attack.train_epsilon)
    warnings = []
    if not test_cells:
        warnings.append("no attack-test cells: evaluating on the attack-train cells")
        test_cells = dict(train_cells)
    return train_cells, test_cells, warnings


def stage_build_router(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    inputs = run.verify_upstream("build-router")
    grid = attacks.load_grid(run.path("attacks"))
    defs = _load_defenses(run)
    train_cells, _, warnings = split_cells(run, grid)
    for w in warnings:
        log.warning(w)
    preds = router.cell_predictions(defs, train_cells)
    matrix = router.build_performance_matrix(defs, train_cells, preds)
    training = router.label_optimal(defs, train_cells, matrix, preds)
    gcfg = replace(run.config.selector, seed=run.seeds["selector"])
    t = time.perf_counter()
    selector = router.train_selector(training, gcfg)
    log.info("build-router: %d labelled samples, selector trained in %.1fs", len(training.labels),
             time.perf_counter() - t)
    run.path("router").mkdir(parents=True, exist_ok=True)
    matrix.save(run.path("router/matrix.csv"), run.path("router/matrix.json"),
                {"grid_manifest_sha256": inputs["attacks/manifest.json"]})
    save_training_set(training, run.path("router/labels.bin"))
    gbt.save_selector(selector, run.path("router/selector.bin"))
    summary = {
        "attack_train_cells": matrix.cell_ids,
        "label_counts": np.bincount(training.labels, minlength=router.N_DEFENSES).tolist(),
        "defense_priority": [matrix.defense_ids[i] for i in router.defense_priority(matrix)],
    }
    outs = [run.path(p) for p in ("router/matrix.csv", "router/matrix.json", "router/labels.bin",
                                  "router/selector.bin")]
    outs.append(_write_json(run.path("router/summary.json"), summary))
    return run.record("build-router", inputs, outs, {"selector": run.seeds["selector"]}, t0, warnings)


def stage_evaluate(run: Run, threads: int = 1) -> StageManifest:
    t0 = time.perf_counter()
    inputs = run.verify_upstream("evaluate")
    ecfg = run.config.eval
    grid = attacks.load_grid(run.path("attacks"))
    defs = _load_defenses(run)
    baseline = nn.load_model(run.path("models/baseline.bin"))
    selector = gbt.load_selector(run.path("router/selector.bin"))
    matrix = router.PerformanceMatrix.load(run.path("router/matrix.csv"), run.path("router/matrix.json"))
    _, test_cells, warnings = split_cells(run, grid)

    preds = router.cell_predictions(defs, test_cells)
    f1_table = evaluation.defense_f1_table(defs, test_cells, preds)
    no_def = evaluation.eval_no_defense(baseline, test_cells)
    rnd = evaluation.eval_random(defs, test_cells, ecfg.trials, run.seeds["random"], f1_table)
    best = evaluation.eval_best_static(matrix, defs, test_cells, f1_table)
    oracle = evaluation.eval_oracle(defs, test_cells, f1_table)
    dyn = evaluation.eval_dynamite(selector, defs, test_cells)

    baseline_summary = json.loads(run.path("models/baseline.json").read_text())
    meta = {
        "config_hash": run.config.fingerprint(),
        "seeds": run.seeds,
        "inputs": dict(sorted(inputs.items())),
        "clean_macro_f1": baseline_summary["clean_test_macro_f1"],
        "defense_clean_macro_f1": json.loads(run.path("defenses/summary.json").read_text())["clean_test_macro_f1"],
        "attack_train_cells": matrix.cell_ids,
        "attack_test_cells": [attacks.cell_id(*k) for k in sorted(test_cells, key=router.cell_sort_key)],
        "defense_f1": {attacks.cell_id(*k): v.tolist() for k, v in f1_table.items()},
        "warnings": warnings,
    }
    report = evaluation.build_report(test_cells, no_def, dyn, oracle, rnd, best, meta)
    report_path = _write_json(run.path("report.json"), report)

    timing_key = _timing_cell(ecfg.timing_cell, test_cells)
    timing = evaluation.measure_timing(selector, defs, baseline, test_cells[timing_key], ecfg.repeats,
                                       best[0], ecfg.timing_samples)
    timing["cell"] = attacks.cell_id(*timing_key)
    timing_path = _write_json(run.path("timing.json"), timing)
    text_path = run.path("report.txt")
    # wall-clock numbers stay in timing.json so the rendered tables are reproducible
    text_path.write_text(evaluation.render_text(report))

    problems = evaluation.check_invariants(report, {attacks.cell_id(*k): v for k, v in f1_table.items()},
                                           ordering=run.config.data.source == "synth")
    if problems:
        raise InvariantError("; ".join(problems))
    log.info("evaluate: dynamite %.4f, oracle %.4f, random %.4f, best-static %.4f (cell means)",
             *(report["cell_means"][m] for m in ("Dynamite", "Oracle", "Random", "BestStatic")))
    return run.record("evaluate", inputs, [report_path, timing_path, text_path],
                      {"random": run.seeds["random"]}, t0, warnings)


def _timing_cell(name, test_cells):
    keys = sorted(test_cells, key=router.cell_sort_key)
    if name is None:
        return keys[0]
    for k in keys:
        if attacks.cell_id(*k) == name:
            return k
    raise ArtifactError(f"timing cell {name!r} is not an attack-test cell")


STAGE_FUNCS = {
    "preprocess": stage_preprocess,
    "train-baseline": stage_train_baseline,
    "gen-attacks": stage_gen_attacks,
    "train-defenses": stage_train_defenses,
    "build-router": stage_build_router,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, config: PipelineConfig, out=None, threads: int = 1) -> StageManifest:
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    run = Run(config, out)
    run.root.mkdir(parents=True, exist_ok=True)
    # small matrices: a single BLAS thread is faster and keeps results bit-stable
    with threadpool_limits(limits=1):
        return STAGE_FUNCS[stage](run, threads)


def run_all(config: PipelineConfig, out=None, threads: int = 1) -> list[StageManifest]:
    return [run_stage(stage, config, out, threads) for stage in STAGES]


def render_report(out) -> str:
    root = Path(out)
    path = root / "report.json"
    if not path.exists():
        raise ArtifactError(f"{path} is missing; run `dynamite evaluate` first")
    mpath = root / "manifests" / "evaluate.json"
    if mpath.exists():
        recorded = json.loads(mpath.read_text())["outputs"].get("report.json")
        if recorded and recorded != sha256_file(path):
            raise ArtifactError(f"{path} does not match the hash recorded by 'evaluate'; rerun `dynamite evaluate`")
    report = json.loads(path.read_text())
    tpath = root / "timing.json"
    timing = json.loads(tpath.read_text()) if tpath.exists() else None
    return evaluation.render_text(report, timing)
