import json

import pytest

from dynamite.config import ConfigError, PipelineConfig, config_from_dict, validate_config


def test_minimal_config_echoes_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = validate_config(p, env={})
    assert cfg.to_dict() == PipelineConfig().to_dict()
    d = cfg.to_dict()
    assert d["attack"]["epsilons"] == [0.01, 0.1, 0.2, 0.3]
    assert d["eval"]["trials"] == 100 and d["selector"]["rounds"] == 60
    assert len(d["defense"]["kinds"]) == 9


def test_train_epsilon_must_be_in_grid():
    with pytest.raises(ConfigError, match="attack.train_epsilon"):
        config_from_dict({"attack": {"train_epsilon": 0.5}}, env={})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="attack.epsilonns: unknown key"):
        config_from_dict({"attack": {"epsilonns": [0.1]}}, env={})
    with pytest.raises(ConfigError, match="selector.seed"):
        config_from_dict({"selector": {"seed": 3}}, env={})


@pytest.mark.parametrize("patch,where", [
    ({"data": {"test_fraction": 1.0}}, "data.test_fraction"),
    ({"attack": {"kinds": ["FGSM", "FGSM"]}}, "attack.kinds"),
    ({"attack": {"kinds": ["Carlini"]}}, "attack.kinds"),
    ({"defense": {"kinds": ["PgdAT"]}}, "defense.kinds"),
    ({"defense": {"rslad_variant": "rslad7"}}, "defense.rslad_variant"),
    ({"defense": {"params": {"trades_beta": 0.0}}}, "defense.params"),
    ({"eval": {"repeats": 2}}, "eval.repeats"),
    ({"model": {"hidden": "wide"}}, "model.hidden"),
    ({"seed": True}, "seed"),
])
def test_constraint_violations_carry_field_path(patch, where):
    with pytest.raises(ConfigError) as err:
        config_from_dict(patch, env={})
    assert str(err.value).startswith(where)


def test_seed_env_override_and_derivation():
    cfg = config_from_dict({"seed": 3}, env={"DYNAMITE_SEED": "11"})
    assert cfg.seed == 11 and cfg.data.synth.seed == 11
    with pytest.raises(ConfigError, match="DYNAMITE_SEED"):
        config_from_dict({}, env={"DYNAMITE_SEED": "x"})


def test_rslad_variant_sets_inner_steps():
    cfg = config_from_dict({"defense": {"rslad_variant": "rslad100"}}, env={})
    assert cfg.defense.params.rslad_inner_steps == 25


def test_fingerprint_tracks_sections():
    a = config_from_dict({}, env={})
    b = config_from_dict({"eval": {"trials": 7}, "output_dir": "elsewhere"}, env={})
    assert a.fingerprint(("seed", "data")) == b.fingerprint(("seed", "data"))
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == config_from_dict(json.loads(json.dumps(a.to_dict())), env={}).fingerprint()


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ nope")
    with pytest.raises(ConfigError):
        validate_config(p, env={})
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "absent.json", env={})
