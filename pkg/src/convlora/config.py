"""Run configuration: a JSON file with one object per section.

Sections mirror the library dataclasses::

    {"model": {...UNetConfig}, "data": {"seed", "size", "n_train", "n_test"},
     "domains": [{...DomainSpec}, ...],   # optional, source first
     "pretrain": {...PretrainSpec}, "esh": {...ESHSpec}, "adapt": {...AdaptSpec}}

Unknown sections or keys are errors. Command-line flags override file values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SOURCE, TARGETS, DomainSpec
from .pipeline import AdaptSpec, ESHSpec, PretrainSpec
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    seed: int = 0
    size: int = 64
    n_train: int = 48
    n_test: int = 16


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig.desk)
    data: DataSpec = field(default_factory=DataSpec)
    domains: tuple = (SOURCE,) + TARGETS
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    esh: ESHSpec = field(default_factory=ESHSpec)
    adapt: AdaptSpec = field(default_factory=AdaptSpec)

    _SECTIONS = {"model": UNetConfig, "data": DataSpec, "pretrain": PretrainSpec, "esh": ESHSpec, "adapt": AdaptSpec}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(cls._SECTIONS) - {"domains"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for name, typ in cls._SECTIONS.items():
            if name in raw:
                setattr(cfg, name, _build(typ, raw[name], name, base=getattr(cfg, name)))
        if "domains" in raw:
            if not isinstance(raw["domains"], list) or len(raw["domains"]) < 2:
                raise ConfigError("domains must list the source and at least one target")
            cfg.domains = tuple(_build(DomainSpec, d, "domains") for d in raw["domains"])
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def override(self, section: str, **values) -> None:
        """Apply command-line values; ``None`` means "not given"."""
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            setattr(self, section, _build(type(getattr(self, section)), values, section, base=getattr(self, section)))

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in self._SECTIONS}
        out["domains"] = [asdict(d) for d in self.domains]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(typ, values, section, base=None):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(typ)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return replace(base, **values) if base is not None else typ(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from exc
