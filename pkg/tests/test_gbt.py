import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynamite.gbt import GBTConfig, gbt_predict, gbt_scores, gbt_train, load_selector, save_selector
from dynamite.utils import ArtifactError, write_container

XOR_X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
XOR_Y = np.array([0, 0, 1, 1])


def xor_model():
    return gbt_train(XOR_X, XOR_Y, 2, GBTConfig(rounds=20, max_depth=2, min_samples_leaf=1, subsample=1.0))


def test_xor_depth_two():
    assert gbt_predict(xor_model(), XOR_X).tolist() == XOR_Y.tolist()


def test_single_label_degenerate():
    x = np.random.default_rng(0).normal(size=(30, 3))
    m = gbt_train(x, np.full(30, 4), 9, GBTConfig(rounds=5))
    probe = np.random.default_rng(1).normal(size=(50, 3)) * 100
    assert (gbt_predict(m, probe) == 4).all()


def test_deterministic_trees():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(200, 4)), rng.integers(0, 3, 200)
    a = gbt_train(x, y, 3, GBTConfig(rounds=5, seed=2))
    b = gbt_train(x, y, 3, GBTConfig(rounds=5, seed=2))
    for name in ("feature", "threshold", "left", "right", "value"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_structure_invariants():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(300, 5)), rng.integers(0, 4, 300)
    cfg = GBTConfig(rounds=6, max_depth=3)
    m = gbt_train(x, y, 4, cfg)
    assert (m.feature < 5).all()
    assert all(m.tree_depth(r, k) <= 3 for r in range(m.rounds) for k in range(4))


def test_memorizes_pure_regions():
    x = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    y = np.array([0, 0, 0, 1, 1, 1])
    m = gbt_train(x, y, 2, GBTConfig(rounds=10, min_samples_leaf=1, subsample=1.0))
    assert gbt_predict(m, x).tolist() == y.tolist()
    assert gbt_predict(m, np.array([1e9])) == 1
    assert gbt_predict(m, np.array([-1e9])) == 0


def test_resubstitution_beats_constant():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(400, 3))
    y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0.5).astype(int)
    m = gbt_train(x, y, 9, GBTConfig(rounds=3, seed=1))
    acc = (gbt_predict(m, x) == y).mean()
    assert acc >= np.bincount(y).max() / len(y)


def test_empty_and_bad_labels():
    with pytest.raises(ValueError):
        gbt_train(np.zeros((0, 2)), np.zeros(0, dtype=int), 2, GBTConfig())
    with pytest.raises(ValueError):
        gbt_train(np.zeros((3, 2)), np.array([0, 1, 9]), 9, GBTConfig())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e12, 1e12), min_size=2, max_size=2))
def test_output_always_valid_id(row):
    assert 0 <= gbt_predict(xor_model(), np.array(row)) < 2


def test_scores_agree_with_training_accumulation():
    m = xor_model()
    s = gbt_scores(m, XOR_X)
    assert s.shape == (4, 2) and np.isfinite(s).all()


def test_selector_roundtrip_and_version(tmp_path):
    m = xor_model()
    p = tmp_path / "s.bin"
    save_selector(m, p)
    back = load_selector(p)
    assert gbt_scores(back, XOR_X).tobytes() == gbt_scores(m, XOR_X).tobytes()
    write_container(tmp_path / "v.bin", "gbt-selector", 2, {}, {})
    with pytest.raises(ArtifactError, match="v2.*v1"):
        load_selector(tmp_path / "v.bin")
