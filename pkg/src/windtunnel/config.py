"""Run configuration: versioned YAML sections, flag overrides and labeled seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class PathsSection:
    panel: str | None = None
    source_panel: str | None = None
    csv: str | None = None
    checkpoint: str | None = None
    out_dir: str = "out"


@dataclass
class DataSection:
    market: str = "SYNTH"
    frequency: str = "day"
    n_stocks: int = 60
    n_steps: int = 400
    n_factors: int = 6
    noise_vol: float = 0.002
    factor_vol: float = 0.02
    vol_regime_scale: float = 1.0
    vol_regime_switch: float = 0.0
    start: str = "2010-01-04"
    factor_seed: int | None = None  # markets sharing it share factor paths


@dataclass
class RetrievalSection:
    history_len: int = 250
    T: int = 20
    K: int = 16
    measure: str = "excess_return_correlation"
    use_excess: bool = True
    pool: str = "contemporaneous"
    stride: int = 1
    dtw_radius: int | None = None
    predicate: str | None = None


@dataclass
class ModelSection:
    layers: int = 4
    heads: int = 8
    d_model: int = 64
    step_embed_dim: int = 128
    ff_mult: int = 2


@dataclass
class ScheduleSection:
    H: int = 100
    beta_min: float | None = None
    beta_max: float | None = None


@dataclass
class TrainSection:
    batches: int = 500
    lr: float = 1.5e-4
    batch_size: int = 32
    objective: str = "noise"
    train_fraction: float = 0.7
    init_from: str | None = None


@dataclass
class GenerateSection:
    targets: list = field(default_factory=list)
    t: int | None = None  # history end; default is the end of the panel
    n_paths: int = 100
    pool: str = "analog"


@dataclass
class EvaluateSection:
    eval_windows: int = 100
    n_paths: int = 16


@dataclass
class WhatIfSection:
    predicate: str = "vol >= q(0.75)"
    pool: str = "analog"  # "both" needs generate.t early enough for a realized future


@dataclass
class AblateSection:
    methods: list = field(default_factory=lambda: ["excess_return_correlation", "dtw", "random", "none"])
    models: list = field(default_factory=lambda: ["fwt", "transformer", "gan", "linear"])


@dataclass
class SensitivitySection:
    ks: list = field(default_factory=lambda: [4, 8, 16, 32])
    steps: list = field(default_factory=lambda: [25, 50, 100, 200])


@dataclass
class OptimizeSection:
    strategies: list = field(
        default_factory=lambda: [{"name": "mom20", "signal": 20}, {"name": "mom60", "signal": 60}]
    )
    thresholds: dict = field(default_factory=lambda: {"min_sharpe": 0.0, "max_dd": 0.3, "min_ann_return": -1.0})
    horizon: int = 20
    rebalance_every: int = 5
    turnover_fraction: float = 0.25
    n_long: int = 5
    n_short: int = 5
    n_scenarios: int = 4
    scenario_predicate: str | None = None
    grid: list = field(default_factory=lambda: [{"lags": [1, 5, 20], "alpha": 1.0}])
    multipliers: list = field(default_factory=lambda: [0, 1, 5, 10])


@dataclass
class RuntimeSection:
    threads: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    whatif: WhatIfSection = field(default_factory=WhatIfSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)
    optimize: OptimizeSection = field(default_factory=OptimizeSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)


def derive_seed(root: int, label: str) -> int:
    """Stable 32-bit child seed for ``label`` under ``root``."""
    digest = hashlib.sha256(f"{int(root)}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# loading


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, addressed by its key path."""
    out: dict[tuple[str, ...], int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = prefix + (str(k.value),)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, ())
    return out


def _type_ok(value: Any, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if tp is list or origin is list:
        return isinstance(value, list)
    if tp is dict or origin is dict:
        return isinstance(value, dict)
    return True


def _build(cls, data: Any, path: tuple[str, ...], lines: dict, source: str | None):
    line = lines.get(path)
    if not isinstance(data, dict):
        raise ConfigError(f"section {'.'.join(path) or '<root>'} must be a mapping", line, source)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        kp = path + (str(key),)
        if key not in names:
            raise ConfigError(f"unknown key {'.'.join(kp)!r}", lines.get(kp, line), source)
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, kp, lines, source)
            continue
        if not _type_ok(value, tp):
            raise ConfigError(f"{'.'.join(kp)}: expected {tp}, got {value!r}", lines.get(kp, line), source)
        if tp is float and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict, *, lines: dict | None = None, source: str | None = None) -> RunConfig:
    data = dict(data or {})
    data.pop("tool_version", None)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
            (lines or {}).get(("schema_version",)),
            source,
        )
    return _build(RunConfig, data, (), lines or {}, source)


def parse_config(text: str, source: str | None = None) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML parse error: {getattr(exc, 'problem', None) or exc}", line, source) from None
    return from_dict(data or {}, lines=_line_index(text), source=source)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(), source=str(p))


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    data = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data, source="<overrides>")


def dump_config(cfg: RunConfig, tool_version: str) -> str:
    data = {"tool_version": tool_version, **cfg.to_dict()}
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False)
