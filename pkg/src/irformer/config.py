"""
Run configuration file.

INI syntax with one section per component; values are JSON literals
(``[16, 32, 64]``, ``0.01``, ``true``, ``null``) and anything that does not
parse as JSON is taken as a bare string.  Every key is optional and defaults
to the dataclass default.  Unknown sections or keys are rejected.

::

    [run]
    seed = 0            ; copied into model/train/generate unless they set their own

    [model]             ; ModelConfig fields
    [train]             ; TrainConfig fields
    [generate]          ; GenConfig fields
    [metrics]           ; k_sigma, floor, dist_thresh, thresholds
    [baseline]          ; size
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from irformer.data import GenConfig
from irformer.errors import ConfigError
from irformer.metrics import DEFAULT_THRESHOLDS
from irformer.model import ModelConfig
from irformer.train import TrainConfig

CONFIG_HEADER = "; irformer run config v1"


@dataclass
class MetricsConfig:
    k_sigma: float = 4.0
    floor: float = 0.5
    dist_thresh: float = 4.0
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))

    def __post_init__(self):
        self.thresholds = [float(t) for t in self.thresholds]
        if len(self.thresholds) < 2:
            raise ConfigError("metrics.thresholds needs at least two values")
        if self.dist_thresh <= 0:
            raise ConfigError("metrics.dist_thresh must be positive")


@dataclass
class BaselineConfig:
    size: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenConfig = field(default_factory=GenConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "generate": GenConfig,
    "metrics": MetricsConfig,
    "baseline": BaselineConfig,
}
_SEEDED = ("model", "train", "generate")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(section: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{section}]: {exc}") from exc


def parse_config(text: str, seed: Optional[int] = None) -> RunConfig:
    """Build a RunConfig from INI text; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str   # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = sorted(set(parser.sections()) - set(_SECTIONS) - {"run"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")

    run = {k: _parse_value(v) for k, v in parser["run"].items()} if parser.has_section("run") else {}
    if set(run) - {"seed"}:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(set(run) - {'seed'}))}")
    base_seed = int(seed if seed is not None else run.get("seed", 0))

    built = {}
    for name, cls in _SECTIONS.items():
        values = ({k: _parse_value(v) for k, v in parser[name].items()}
                  if parser.has_section(name) else {})
        if name in _SEEDED and (seed is not None or "seed" not in values):
            values["seed"] = base_seed
        built[name] = _build(name, cls, values)
    return RunConfig(seed=base_seed, **built)


def load_config(path: Optional[str | Path], seed: Optional[int] = None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return parse_config("", seed)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), seed)


def _section_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return asdict(obj)


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration as INI text that parses back to ``cfg``."""
    lines = [CONFIG_HEADER, "", "[run]", f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        for key, value in _section_dict(getattr(cfg, name)).items():
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
