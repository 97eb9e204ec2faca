"""Experiment configuration: nested dataclasses with a strict YAML round trip.

Unknown keys are rejected, every field has a default, and errors report the
dotted field path plus the YAML line when one is available.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..errors import ConfigError
from ..selector import FILTER_SCALES, STRATEGIES
from ..simkit.model import ACTIVATIONS, LOSSES

SCHEMA_VERSION = 1


@dataclass
class CorpusConfig:
    n: int = 4000
    d0: int = 32
    T: int = 4
    classes: int = 8
    mix: list[float] = field(default_factory=lambda: [0.4, 0.3, 0.3])
    n_target: int = 200
    n_test: int = 1000
    teacher_scale: float = 3.0
    offdist_scale: float = 3.0
    offdist_shift: float = 1.0


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [16])
    activation: str = "tanh"
    loss: str = "softmax_ce"
    init_scale: float = 0.5


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.05
    min_lr: float = 0.005
    warmup_steps: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ProjectionConfig:
    k: int = 16
    distribution: str = "rademacher"


@dataclass
class ScheduleConfig:
    b_tr: int = 8
    alpha: int = 4
    b_val: int = 4
    alpha_val: int = 4
    steps: Optional[int] = None
    budget_fraction: float = 0.05


@dataclass
class StrategyParams:
    lambda_rel: float = 1e-3
    filter_scale: str = "matched"
    precondition_residual_updates: bool = False
    moment_source: str = "applied"
    normalize_weights: bool = True
    fixed_validation: bool = False


@dataclass
class SeedOverrides:
    corpus: Optional[int] = None
    projection: Optional[int] = None
    pool: Optional[int] = None
    model: Optional[int] = None


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    strategies: list[str] = field(default_factory=lambda: ["two_stage"])
    params: StrategyParams = field(default_factory=StrategyParams)
    seeds: list[int] = field(default_factory=lambda: [0])
    seed_overrides: SeedOverrides = field(default_factory=SeedOverrides)
    eval_interval: int = 20
    loss_threshold: Optional[float] = None
    output: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c, s, o, p = self.corpus, self.schedule, self.optimizer, self.params
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {self.schema_version}")
        if len(c.mix) != 3 or any(m < 0 for m in c.mix) or abs(sum(c.mix) - 1.0) > 1e-9:
            raise ConfigError("corpus.mix: must be three non-negative fractions summing to 1")
        for name in ("n", "d0", "T", "classes", "n_target", "n_test"):
            if getattr(c, name) < 1:
                raise ConfigError(f"corpus.{name}: must be >= 1")
        m = self.model
        if any(h < 1 for h in m.hidden):
            raise ConfigError("model.hidden: layer widths must be >= 1")
        if m.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation: unknown {m.activation!r}")
        if m.loss not in LOSSES:
            raise ConfigError(f"model.loss: unknown {m.loss!r}")
        if s.alpha < 1 or s.alpha_val < 1:
            raise ConfigError("schedule.alpha: oversampling factor must be >= 1")
        if s.b_tr < 1 or s.b_val < 1:
            raise ConfigError("schedule.b_tr: batch sizes must be >= 1")
        if not 0 < s.budget_fraction <= 1:
            raise ConfigError("schedule.budget_fraction: must be in (0, 1]")
        if s.b_val * s.alpha_val > c.n_target:
            raise ConfigError("schedule.b_val: validation pool larger than the target set")
        if o.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer.kind: unknown optimizer {o.kind!r}")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1) or o.eps <= 0:
            raise ConfigError("optimizer: betas must lie in [0, 1) and eps > 0")
        if self.projection.k < 1:
            raise ConfigError("projection.k: must be >= 1")
        if self.projection.distribution not in ("rademacher", "gaussian"):
            raise ConfigError(f"projection.distribution: unknown {self.projection.distribution!r}")
        if not self.strategies:
            raise ConfigError("strategies: need at least one strategy")
        for name in self.strategies:
            if name not in STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {name!r}")
        if p.filter_scale not in FILTER_SCALES:
            raise ConfigError(f"params.filter_scale: unknown {p.filter_scale!r}")
        if p.moment_source not in ("applied", "pool_mean"):
            raise ConfigError(f"params.moment_source: unknown {p.moment_source!r}")
        if p.lambda_rel < 0:
            raise ConfigError("params.lambda_rel: must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval: must be >= 1")

    @property
    def sizes(self) -> list[int]:
        return [self.corpus.d0, *self.model.hidden, self.corpus.classes]

    @property
    def budget(self) -> int:
        """Total number of samples a run may train on."""
        return int(self.schedule.budget_fraction * self.corpus.n)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"projection.k": 64})``."""
        data = to_dict(self)
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"{key}: unknown field")
            node[leaf] = value
        return from_dict(data)


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, data: Any, path: str, lines: dict[str, int]):
    where = f" (line {lines[path]})" if path in lines else ""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping{where}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in fields:
            line = f" (line {lines[sub]})" if sub in lines else ""
            raise ConfigError(f"{sub}: unknown field{line}")
        ftype = fields[key].type
        target = _DATACLASS_FIELDS.get(ftype)
        kwargs[key] = _build(target, value, sub, lines) if target else _coerce(ftype, value, sub, lines)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        field_path = msg.split(":", 1)[0]
        full = f"{path}.{field_path}" if path and not field_path.startswith(path) else field_path
        if full in lines and "line" not in msg:
            raise ConfigError(f"{msg} (line {lines[full]})") from None
        raise


def _coerce(ftype: str, value: Any, path: str, lines: dict[str, int]):
    where = f" (line {lines[path]})" if path in lines else ""
    optional = ftype.startswith("Optional[")
    base = ftype[len("Optional["):-1] if optional else ftype
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null{where}")
    try:
        if base == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if base == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if base.startswith("list["):
            inner = base[5:-1]
            if not isinstance(value, list):
                raise TypeError
            return [_coerce(inner, v, f"{path}[{i}]", lines) for i, v in enumerate(value)]
    except TypeError:
        raise ConfigError(f"{path}: expected {base}, got {value!r}{where}") from None
    raise ConfigError(f"{path}: unsupported field type {ftype}")


_DATACLASS_FIELDS = {
    "CorpusConfig": CorpusConfig,
    "ModelConfig": ModelConfig,
    "OptimizerConfig": OptimizerConfig,
    "ProjectionConfig": ProjectionConfig,
    "ScheduleConfig": ScheduleConfig,
    "StrategyParams": StrategyParams,
    "SeedOverrides": SeedOverrides,
}


def from_dict(data: dict, lines: dict[str, int] | None = None) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "", lines or {})


def _key_lines(node, prefix: str = "", out: dict[str, int] | None = None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{where}malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    return from_dict(data, _key_lines(node))


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
