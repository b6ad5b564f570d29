"""Pipeline configuration: a fixed JSON schema built from dataclasses, fail-closed on unknown keys."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import get_type_hints

from .attacks import ATTACK_KINDS, PAPER_EPSILONS, AttackParams
from .data import CleaningSpec, SynthSpec
from .defenses import RSLAD_VARIANTS, DefenseConfig, DefenseKind, InnerAttack
from .gbt import GBTConfig
from .nn import TrainConfig
from .utils import canonical_json, sha256_bytes


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class DataSection:
    source: str = "synth"
    csv_path: str | None = None
    schema_path: str | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    cleaning: CleaningSpec = field(default_factory=CleaningSpec)
    test_fraction: float = 0.3
    stratified: bool = True


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class AttackSection:
    kinds: list[str] = field(default_factory=lambda: list(ATTACK_KINDS))
    epsilons: list[float] = field(default_factory=lambda: list(PAPER_EPSILONS))
    train_epsilon: float = 0.1
    params: AttackParams = field(default_factory=AttackParams)


@dataclass
class DefenseSection:
    kinds: list[str] = field(default_factory=lambda: [k.name for k in DefenseKind])
    rslad_variant: str = "rslad10"
    # usability floor for trained defenses; a shortfall is reported as a stage warning
    min_clean_f1: float = 0.70
    params: DefenseConfig = field(default_factory=DefenseConfig)


@dataclass
class EvalSection:
    trials: int = 100
    repeats: int = 5
    timing_samples: int = 200
    timing_cell: str | None = None


@dataclass
class PipelineConfig:
    seed: int = 7
    output_dir: str = "runs/synth"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    selector: GBTConfig = field(default_factory=GBTConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _strip(asdict(self), type(self))

    def fingerprint(self, sections=None) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        if sections is not None:
            d = {k: d[k] for k in sections}
        return sha256_bytes(canonical_json(d).encode())


# seeds are derived from the master seed; RSLAD inner steps follow the variant
_EXCLUDED = {
    SynthSpec: {"seed"}, TrainConfig: {"seed"}, DefenseConfig: {"seed", "rslad_variant", "rslad_inner_steps"},
    GBTConfig: {"seed"},
}


def _strip(d: dict, cls) -> dict:
    out = {}
    hints = get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in _EXCLUDED.get(cls, ()):
            continue
        v = d[f.name]
        t = hints[f.name]
        if dataclasses.is_dataclass(t):
            v = _strip(v, t)
        out[f.name] = v
    return out


def _coerce(value, t, path):
    origin = getattr(t, "__origin__", None)
    if dataclasses.is_dataclass(t):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return _build(t, value, path)
    if t is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if t is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if t is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if t is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        (inner,) = t.__args__
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    args = getattr(t, "__args__", ())
    if type(None) in args:  # Optional[X]
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, path)
    raise ConfigError(path, f"unsupported field type {t}")


def _build(cls, data: dict, path: str = ""):
    hints = get_type_hints(cls)
    excluded = _EXCLUDED.get(cls, set())
    allowed = {f.name for f in dataclasses.fields(cls)} - excluded
    unknown = sorted(set(data) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}" if path else f.name)
    return cls(**kwargs)


def _check(config: PipelineConfig) -> None:
    d, a, df, e = config.data, config.attack, config.defense, config.eval
    if d.source not in ("synth", "csv"):
        raise ConfigError("data.source", "must be 'synth' or 'csv'")
    if d.source == "csv" and (not d.csv_path or not d.schema_path):
        raise ConfigError("data.csv_path", "csv source needs csv_path and schema_path")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("data.test_fraction", "must lie in (0, 1)")
    try:
        d.synth.validate()
    except ValueError as exc:
        raise ConfigError("data.synth", str(exc)) from None
    if not config.model.hidden or min(config.model.hidden) < 1:
        raise ConfigError("model.hidden", "needs at least one positive layer width")
    try:
        config.model.train.validate()
    except ValueError as exc:
        raise ConfigError("model.train", str(exc)) from None
    if not a.kinds:
        raise ConfigError("attack.kinds", "at least one attack required")
    for i, k in enumerate(a.kinds):
        if k not in ATTACK_KINDS:
            raise ConfigError(f"attack.kinds[{i}]", f"unknown attack {k!r}")
    if len(set(a.kinds)) != len(a.kinds):
        raise ConfigError("attack.kinds", "duplicate attack")
    if not a.epsilons or min(a.epsilons) < 0:
        raise ConfigError("attack.epsilons", "need at least one non-negative epsilon")
    if not any(abs(a.train_epsilon - v) <= 1e-12 for v in a.epsilons):
        raise ConfigError("attack.train_epsilon", f"{a.train_epsilon} is not one of attack.epsilons {a.epsilons}")
    names = [k.name for k in DefenseKind]
    if sorted(df.kinds) != sorted(names):
        raise ConfigError("defense.kinds", f"all nine defenses must be configured exactly once: {names}")
    if not 0.0 <= df.min_clean_f1 <= 1.0:
        raise ConfigError("defense.min_clean_f1", "must lie in [0, 1]")
    if df.rslad_variant not in RSLAD_VARIANTS:
        raise ConfigError("defense.rslad_variant", f"must be one of {sorted(RSLAD_VARIANTS)}")
    try:
        df.params.validate()
    except ValueError as exc:
        raise ConfigError("defense.params", str(exc)) from None
    try:
        config.selector.validate()
    except ValueError as exc:
        raise ConfigError("selector", str(exc)) from None
    if e.trials < 1:
        raise ConfigError("eval.trials", "must be at least 1")
    if e.repeats < 3:
        raise ConfigError("eval.repeats", "must be at least 3")
    if e.timing_samples < 1:
        raise ConfigError("eval.timing_samples", "must be at least 1")


def config_from_dict(data: dict, env: dict | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be an object")
    config = _build(PipelineConfig, data)
    env = os.environ if env is None else env
    if env.get("DYNAMITE_SEED"):
        try:
            config.seed = int(env["DYNAMITE_SEED"])
        except ValueError:
            raise ConfigError("DYNAMITE_SEED", "must be an integer") from None
    config.data.synth.seed = config.seed
    config.defense.params.rslad_variant = config.defense.rslad_variant
    config.defense.params.rslad_inner_steps = RSLAD_VARIANTS[config.defense.rslad_variant] \
        if config.defense.rslad_variant in RSLAD_VARIANTS else 1
    _check(config)
    return config


def validate_config(path, env: dict | None = None) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    return config_from_dict(data, env)


__all__ = ["PipelineConfig", "ConfigError", "validate_config", "config_from_dict", "InnerAttack"]
