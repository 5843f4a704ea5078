"""JSON run configuration: one section per component, strict keys, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .bench import SynthSpec
from .diffeo import IntegrationConfig
from .energy import LossConfig
from .registrar import OptimConfig, PyramidConfig
from .smoothproper import SPConfig

__all__ = ["BenchConfig", "IOConfig", "RunConfig", "ConfigError", "parse_override", "to_jsonable"]

# short section names accepted on the command line
ALIASES = {"sp": "smoothproper", "opt": "optim", "integ": "integration"}


class ConfigError(ValueError):
    """Invalid configuration: unknown section or key, or a value that fails validation."""


@dataclass
class IOConfig:
    image_bits: int = 16
    write_warped: bool = True

    def __post_init__(self):
        if self.image_bits not in (8, 16):
            raise ValueError("image_bits must be 8 or 16")


@dataclass
class BenchConfig:
    """Benchmark size plus the per-pair generator spec; pair ``i`` uses ``seed + i``."""

    n_pairs: int = 8
    spec: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        self.spec.validate()

    def specs(self) -> list[SynthSpec]:
        return [dataclasses.replace(self.spec, seed=self.spec.seed + i) for i in range(self.n_pairs)]


_SECTIONS = {
    "pyramid": PyramidConfig,
    "smoothproper": SPConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "integration": IntegrationConfig,
    "io": IOConfig,
    "bench": BenchConfig,
}


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is BenchConfig and key == "spec":
            value = _build(SynthSpec, value, f"{where}.spec")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
        if isinstance(obj, SynthSpec):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return obj


@dataclass
class RunConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    smoothproper: SPConfig = field(default_factory=SPConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    io: IOConfig = field(default_factory=IOConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s) {', '.join(unknown)}")
        return cls(**{name: _build(_SECTIONS[name], sec, name) for name, sec in data.items()})

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def with_overrides(self, overrides: list[tuple[str, str]]) -> "RunConfig":
        """Apply ``("section.key", raw)`` pairs; ``raw`` is parsed as JSON, else kept as a string."""
        data = self.to_dict()
        for dotted, raw in overrides:
            parts = dotted.split(".")
            if len(parts) < 2:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            parts[0] = ALIASES.get(parts[0], parts[0])
            if parts[0] not in data:
                raise ConfigError(f"unknown config section {parts[0]!r}")
            if parts[0] == "bench" and len(parts) == 2 and parts[1] in data["bench"]["spec"]:
                # generator fields may skip the ``spec`` level
                parts.insert(1, "spec")
            node = data
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = parse_override(raw)
        return RunConfig.from_dict(data)


def parse_override(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
