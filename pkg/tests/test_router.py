import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynamite.attacks import ATTACK_KINDS, PAPER_EPSILONS
from dynamite.gbt import GBTConfig, gbt_predict
from dynamite.router import (
    PerformanceMatrix, build_performance_matrix, constant_selector, defense_priority, label_optimal,
    select_attack_train_cells, stack_cells, train_selector,
)

from fakes import cell, constant_defenses, threshold_model, wrap

KEY = ("PGD", 0.1)


def flat_matrix(avgs):
    return PerformanceMatrix(list(range(9)), [KEY], np.asarray(avgs, dtype=float)[:, None], [1])


def toy_grid():
    return {(k, e): cell([0.0], [0]) for k in ATTACK_KINDS for e in PAPER_EPSILONS}


def test_split_full_grid():
    train, test = select_attack_train_cells(toy_grid(), 0.1)
    # one attack-train cell per attack kind at the training epsilon
    assert len(train) == len(ATTACK_KINDS) == 6 and len(test) == 18
    assert all(e == 0.1 for _, e in train) and all(e != 0.1 for _, e in test)


def test_split_single_cell_and_missing_eps():
    train, test = select_attack_train_cells({KEY: cell([0.0], [0])}, 0.1)
    assert list(train) == [KEY] and test == {}
    with pytest.raises(KeyError):
        select_attack_train_cells(toy_grid(), 0.5)


def test_matrix_entries_and_identical_rows():
    data = {KEY: cell([-1.0, -0.5, 0.5, 1.0], [0, 0, 1, 1]), ("FGSM", 0.1): cell([-2.0, 2.0], [0, 1])}
    defs = [wrap(0, threshold_model(1))] + constant_defenses(1, [1] * 9)[1:]
    m = build_performance_matrix(defs, data)
    assert m.values.shape == (9, 2)
    assert (m.values[0] == 1.0).all()
    assert np.array_equal(m.values[1], m.values[5])
    assert ((m.values >= 0) & (m.values <= 1)).all()
    assert m.cell_ids == ["FGSM_eps0.1", "PGD_eps0.1"]


def test_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        PerformanceMatrix([0], [KEY], np.array([[1.5]]), [1])


def test_matrix_independent_of_cell_order():
    a = {KEY: cell([-1.0, 1.0], [0, 1]), ("BIM", 0.1): cell([0.5, 1.0, -3.0], [1, 1, 0])}
    b = dict(reversed(list(a.items())))
    defs = [wrap(0, threshold_model(1))] + constant_defenses(1, [0, 1] * 4)
    defs = defs[:9]
    ma, mb = build_performance_matrix(defs, a), build_performance_matrix(defs, b)
    assert ma.cell_keys == mb.cell_keys and ma.values.tobytes() == mb.values.tobytes()
    la, lb = label_optimal(defs, a, ma), label_optimal(defs, b, mb)
    assert la.labels.tolist() == lb.labels.tolist()


def test_matrix_roundtrip(tmp_path):
    m = PerformanceMatrix(list(range(9)), [KEY, ("ZOO", 0.1)], np.random.default_rng(0).random((9, 2)), [3, 4])
    m.save(tmp_path / "m.csv", tmp_path / "m.json", {"source": "unit"})
    back = PerformanceMatrix.load(tmp_path / "m.csv", tmp_path / "m.json")
    assert back.values.tobytes() == m.values.tobytes()
    assert back.cell_keys == m.cell_keys and back.counts == [3, 4]


def labels_for(correct_rows, matrix):
    """correct_rows: per sample, the defense ids that classify it correctly (true label 1)."""
    n = len(correct_rows)
    preds = np.zeros((9, n), dtype=int)
    for j, ids in enumerate(correct_rows):
        preds[list(ids), j] = 1
    data = {KEY: cell(np.zeros(n), np.ones(n, dtype=int))}
    return label_optimal(constant_defenses(1, [0] * 9), data, matrix, {KEY: preds})


def test_rule_one_single_correct_defense():
    ts = labels_for([{4}], flat_matrix(np.linspace(0.9, 0.1, 9)))
    assert ts.labels.tolist() == [4]
    assert ts.tie_meta[0].tolist() == [i == 4 for i in range(9)]


def test_rule_two_all_wrong_uses_row_average():
    avgs = [0.2, 0.3, 0.1, 0.8, 0.4, 0.5, 0.6, 0.7, 0.75]
    assert labels_for([set()], flat_matrix(avgs)).labels.tolist() == [3]


def test_rule_three_tie_to_twelve_decimals():
    avgs = [0.1] * 9
    avgs[5], avgs[2] = 0.9, 0.9 + 1e-14
    assert labels_for([set(range(9))], flat_matrix(avgs)).labels.tolist() == [2]
    assert defense_priority(flat_matrix(avgs))[:2] == [2, 5]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.frozensets(st.integers(0, 8)), min_size=1, max_size=20),
       st.lists(st.floats(0, 1), min_size=9, max_size=9))
def test_labeling_total_and_rule_consistent(rows, avgs):
    m = flat_matrix(avgs)
    ts = labels_for(rows, m)
    assert len(ts.labels) == len(rows)
    order = defense_priority(m)
    for ids, label in zip(rows, ts.labels):
        pool = ids or set(range(9))
        assert label == min(pool, key=order.index)


def test_training_set_stacks_all_train_cells():
    data = {KEY: cell([-1.0, 1.0], [0, 1]), ("BIM", 0.1): cell([2.0, -2.0, 0.3], [1, 0, 1])}
    defs = constant_defenses(1, [0, 1] * 4 + [1])
    ts = label_optimal(defs, data, build_performance_matrix(defs, data))
    assert ts.features.shape == (5, 1) and ts.tie_meta.shape == (5, 9)
    assert stack_cells(data).labels.tolist() == [1, 0, 1, 0, 1]
    assert set(ts.cell_index.tolist()) == {0, 1}


def test_selector_learns_separable_routing():
    # defense 0 is right when x < 0, defense 1 when x > 0
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(int)
    data = {KEY: cell(x, y)}
    defs = [wrap(0, threshold_model(1, 0, 5.0)), wrap(1, threshold_model(1, 0, -5.0))]
    defs += constant_defenses(1, [0] * 9)[2:]
    m = build_performance_matrix(defs, data)
    ts = label_optimal(defs, data, m)
    sel = train_selector(ts, GBTConfig(rounds=10, min_samples_leaf=2, subsample=1.0))
    assert (gbt_predict(sel, x[:, None]) == ts.labels).mean() == 1.0


def test_constant_selector():
    sel = constant_selector(6, 3)
    assert (gbt_predict(sel, np.random.default_rng(0).normal(size=(10, 3)) * 1e6) == 6).all()
