import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynamite.evaluation import (
    METHODS, build_report, check_invariants, defense_f1_table, dynamite_score, eval_best_static, eval_dynamite,
    eval_no_defense, eval_oracle, eval_random, measure_timing, render_text,
)
from dynamite.defenses import defended_predict
from dynamite.gbt import GBTConfig
from dynamite.metrics import macro_f1
from dynamite.nn import init_mlp, predict
from dynamite.router import (
    PerformanceMatrix, build_performance_matrix, constant_selector, label_optimal, train_selector,
)

from fakes import cell, threshold_model, wrap


def echo_cell(preds, labels):
    """A cell whose only feature is +1/-1 for the class a threshold defense will predict."""
    return cell(np.where(np.asarray(preds) == 1, 1.0, -1.0), labels)


def noisy_defenses(d=3, seed=0):
    """Nine small random MLP defenses: distinct, deterministic, cheap."""
    return [wrap(i, init_mlp([d, 4, 2], seed + i)) for i in range(9)]


def random_cells(d=3, seed=0, n=60):
    rng = np.random.default_rng(seed)
    return {(kind, 0.2): cell(rng.normal(size=(n, d)), rng.integers(0, 2, n)) for kind in ("FGSM", "PGD", "ZOO")}


def test_single_partition_equals_macro_f1():
    defs = noisy_defenses()
    data = random_cells()[("PGD", 0.2)]
    for dm in defs:
        b = dynamite_score(np.full(data.n, int(dm.kind)), defs, data)
        assert b.score == macro_f1(defended_predict(dm, data)[0], data.labels, 2)


def test_weighted_partition_example():
    # 60 samples at macro-F1 0.8 and 40 at 0.5
    preds_a = [0] * 24 + [1] * 6 + [1] * 24 + [0] * 6
    labels_a = [0] * 30 + [1] * 30
    preds_b = [0] * 10 + [1] * 10 + [1] * 10 + [0] * 10
    labels_b = [0] * 20 + [1] * 20
    data = echo_cell(preds_a + preds_b, labels_a + labels_b)
    defs = [wrap(0, threshold_model(1)), wrap(1, threshold_model(1))]
    b = dynamite_score([0] * 60 + [1] * 40, defs, data)
    assert b.model_performance[:2] == pytest.approx([0.8, 0.5], abs=1e-12)
    assert b.score == pytest.approx(0.68, abs=1e-12)
    assert abs(b.resum() - b.score) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_breakdown_order_invariant(seed):
    rng = np.random.default_rng(seed)
    defs = noisy_defenses()
    data = cell(rng.normal(size=(40, 3)), rng.integers(0, 2, 40))
    assign = rng.integers(0, 9, 40)
    perm = rng.permutation(40)
    a = dynamite_score(assign, defs, data)
    b = dynamite_score(assign[perm], defs, data.subset(perm))
    assert a.sample_counts == b.sample_counts
    assert a.model_performance == b.model_performance and a.score == b.score


def test_dynamite_score_errors():
    defs = noisy_defenses()
    data = random_cells()[("PGD", 0.2)]
    with pytest.raises(ValueError):
        dynamite_score(np.full(data.n, 11), defs, data)
    with pytest.raises(ValueError):
        dynamite_score([0], defs, data)


def test_no_defense_on_clean_cell_equals_test_f1():
    model = init_mlp([3, 4, 2], 1)
    data = random_cells()[("FGSM", 0.2)]
    assert eval_no_defense(model, {("clean", 0.0): data})[("clean", 0.0)] == macro_f1(
        predict(model, data)[0], data.labels, 2)


def test_random_single_defense_pool():
    defs, cells = noisy_defenses()[:1], random_cells()
    table = defense_f1_table(defs, cells)
    for trials in (1, 7, 100):
        out = eval_random(defs, cells, trials, 3)
        assert all(out[k] == pytest.approx(table[k][0], abs=1e-15) for k in cells)


def test_random_converges_to_analytic_mean():
    defs, cells = noisy_defenses(), random_cells()
    table = defense_f1_table(defs, cells)
    out = eval_random(defs, cells, 10_000, 11, table)
    for k in cells:
        assert abs(out[k] - table[k].mean()) < 0.005
    assert eval_random(defs, cells, 50, 4) == eval_random(defs, cells, 50, 4)
    with pytest.raises(ValueError):
        eval_random(defs, cells, 0)


def matrix_with_rows(avgs):
    return PerformanceMatrix(list(range(9)), [("PGD", 0.1)], np.asarray(avgs, float)[:, None], [1])


def test_best_static_dominant_and_tie():
    defs, cells = noisy_defenses(), random_cells()
    avgs = np.full(9, 0.2)
    avgs[6] = 0.9
    best, per_cell = eval_best_static(matrix_with_rows(avgs), defs, cells)
    assert best == 6
    assert per_cell == {k: macro_f1(defended_predict(defs[6], d)[0], d.labels, 2) for k, d in cells.items()}
    avgs[3] = 0.9
    assert eval_best_static(matrix_with_rows(avgs), defs, cells)[0] == 3


def test_oracle_dominates_every_defense_and_best_static():
    defs, cells = noisy_defenses(), random_cells()
    table = defense_f1_table(defs, cells)
    oracle = eval_oracle(defs, cells)
    _, static = eval_best_static(matrix_with_rows(np.linspace(0, 1, 9)), defs, cells)
    for k in cells:
        assert oracle[k][1] == table[k].max()
        assert oracle[k][1] >= static[k]
    single = eval_oracle(defs[:1], cells)
    assert all(single[k] == (0, table[k][0]) for k in cells)


def test_constant_router_scores_equal_defense_f1():
    defs, cells = noisy_defenses(), random_cells()
    table = defense_f1_table(defs, cells)
    for i in (0, 4, 8):
        out = eval_dynamite(constant_selector(i, 3), defs, cells)
        assert all(out[k].score == table[k][i] for k in cells)


def test_per_sample_optimal_refines_oracle():
    defs, cells = noisy_defenses(seed=5), random_cells(seed=5)
    matrix = build_performance_matrix(defs, cells)
    ts = label_optimal(defs, cells, matrix)
    oracle = eval_oracle(defs, cells)
    for j, (key, data) in enumerate(sorted(cells.items(), key=lambda kv: matrix.cell_keys.index(kv[0]))):
        score = dynamite_score(ts.labels[ts.cell_index == j], defs, data).score
        assert score >= oracle[key][1] - 1e-9


def test_timing_ordering():
    defs, cells = noisy_defenses(), random_cells(n=200)
    data = cells[("PGD", 0.2)]
    sel = constant_selector(2, 3)
    t = measure_timing(sel, defs, defs[0].model, data, repeats=5, best_static_id=2)
    assert t["oracle_ms"] >= t["best_static_ms"]
    assert t["dynamite_ms"] < t["oracle_ms"]
    assert t["samples"] == 200
    with pytest.raises(ValueError):
        measure_timing(sel, defs, defs[0].model, data, repeats=2)


def test_timing_median_stable():
    defs, cells = noisy_defenses(), random_cells(n=200)
    data = cells[("PGD", 0.2)]
    sel = constant_selector(2, 3)
    short = measure_timing(sel, defs, defs[0].model, data, repeats=3)["oracle_ms"]
    long = measure_timing(sel, defs, defs[0].model, data, repeats=30)["oracle_ms"]
    assert abs(short - long) / long < 0.20


@pytest.fixture(scope="module")
def report_parts():
    defs = noisy_defenses()
    cells = {(k, e): cell(np.random.default_rng(i).normal(size=(30 + 10 * i, 3)),
                          np.random.default_rng(100 + i).integers(0, 2, 30 + 10 * i))
             for i, (k, e) in enumerate([("FGSM", 0.01), ("FGSM", 0.3), ("PGD", 0.2), ("DeepFool", 0.2)])}
    table = defense_f1_table(defs, cells)
    matrix = matrix_with_rows(np.linspace(0.1, 0.5, 9))
    sel = train_selector(label_optimal(defs, cells, build_performance_matrix(defs, cells)),
                         GBTConfig(rounds=5, seed=0))
    parts = (cells, eval_no_defense(defs[0].model, cells), eval_dynamite(sel, defs, cells),
             eval_oracle(defs, cells, table), eval_random(defs, cells, 100, 0, table),
             eval_best_static(matrix, defs, cells, table))
    return parts, table


def test_report_layout_and_aggregation(report_parts):
    parts, table = report_parts
    rep = build_report(*parts, meta={"k": 1})
    assert rep["methods"] == ["NoDefense", "Dynamite", "Oracle", "Random", "BestStatic"] == list(METHODS)
    assert list(rep["table"]) == ["FGSM", "PGD", "DeepFool"]
    for m in METHODS:
        col = [row[m] for row in rep["table"].values()]
        assert abs(np.mean(col) - rep["averages"][m]) <= 1e-9
    # FGSM pools its two cells by sample count (30 and 40)
    cells, nd = parts[0], parts[1]
    want = (30 * nd[("FGSM", 0.01)] + 40 * nd[("FGSM", 0.3)]) / 70
    assert rep["table"]["FGSM"]["NoDefense"] == pytest.approx(100 * want, abs=1e-9)
    assert check_invariants(rep, {c["id"]: table[(c["kind"], c["epsilon"])] for c in rep["cells"]}) == []
    text = render_text(rep)
    assert "Best-Static" in text and "Average" in text


def test_report_improvement_identity_and_determinism(report_parts):
    parts, _ = report_parts
    cells, nd, dyn, oracle, _, best = parts
    same = {k: dyn[k].score for k in cells}
    rep = build_report(cells, nd, dyn, oracle, same, best)
    assert all(v == 0.0 for v in rep["improvement_rate"]["Random"]["per_attack"].values())
    a = json.dumps(build_report(*parts), sort_keys=True)
    assert a == json.dumps(build_report(*parts), sort_keys=True)


def test_report_incomplete_inputs(report_parts):
    parts, _ = report_parts
    cells, nd, *rest = parts
    partial = dict(list(nd.items())[:2])
    with pytest.raises(ValueError):
        build_report(cells, partial, *rest)


def test_invariant_checker_flags_tampering(report_parts):
    parts, _ = report_parts
    rep = build_report(*parts)
    rep["cells"][0]["dynamite_breakdown"]["score"] += 1e-9
    rep["cells"][1]["Oracle"] = -1.0
    problems = check_invariants(rep)
    assert len(problems) == 2
    rep = build_report(*parts)
    rep["cell_means"]["Random"] = rep["cell_means"]["Dynamite"] + 0.05
    assert check_invariants(rep) == []
    assert len(check_invariants(rep, ordering=True)) == 1
