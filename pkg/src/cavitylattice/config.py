"""Run configuration: a strict YAML schema with a canonical serialized form.

Every section is a dataclass; unknown keys, wrong types and a schema
version mismatch raise :class:`ConfigError`.  ``to_dict`` followed by
``from_dict`` reproduces the config exactly, and ``dump_yaml`` writes keys
in sorted order so equal configs give identical text.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


@dataclass
class PhysicsSection:
    eta: float = 6.0
    delta_c: float = -7.5
    u0: float = -10.0
    kappa: float = 1.0


@dataclass
class GeometrySection:
    n_ph_max: int = 60
    j_max: int = 30
    even_parity_only: bool = True


@dataclass
class BandsSection:
    depths: list[float] = field(default_factory=lambda: [-100.0])
    max_band: int = 8
    cutoff: int = 32
    q_grid: int = 128
    window_periods: int = 20
    wannier_bands: list[int] = field(default_factory=lambda: [0])


@dataclass
class ScanSection:
    """Detunings to visit and the bunching model used for roots and contours.

    ``delta_c`` lists explicit detunings; when empty the physics detuning
    is used.  ``bands`` lists the band indices whose stable roots count as
    branches for occupancy analysis.
    """

    model: str = "wannier"
    index: int = 0
    delta_c: list[float] = field(default_factory=list)
    n_samples: int = 400
    cache_points: int = 241
    bands: list[int] = field(default_factory=lambda: [0, 2, 4, 6, 8])


@dataclass
class MeanFieldSection:
    t_final: float = 50.0
    sample_dt: float = 0.1
    j_max: int = 20
    branch: int = 0
    perturbation: float = 0.0


@dataclass
class McwfSection:
    n0: int = 1
    j0: int = 0
    t_final: float = 10.0
    sample_dt: float = 0.1
    tol: float = 1e-8
    trajectories: int = 100
    joint_times: list[float] = field(default_factory=list)
    window: list[float] = field(default_factory=list)
    shift: float = 0.0
    tolerance_band: float = 3.0


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    bands: BandsSection = field(default_factory=BandsSection)
    scan: ScanSection = field(default_factory=ScanSection)
    meanfield: MeanFieldSection = field(default_factory=MeanFieldSection)
    mcwf: McwfSection = field(default_factory=McwfSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        config = _build(cls, data, "")
        if config.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {config.schema_version} is not supported (expected {SCHEMA_VERSION})")
        validate(config)
        return config

    def detunings(self) -> list[float]:
        return list(self.scan.delta_c) if self.scan.delta_c else [self.physics.delta_c]


def _coerce(value: Any, kind: Any, where: str) -> Any:
    origin = getattr(kind, "__origin__", None)
    if origin is list:
        (item_kind,) = kind.__args__
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, item_kind, f"{where}[{i}]") for i, v in enumerate(value)]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {kind!r}")


def _build(cls, data: dict, prefix: str):
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(hints))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    types = _resolved_types(cls)
    for name, value in data.items():
        kind = types[name]
        where = prefix + name
        if dataclasses.is_dataclass(kind):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            kwargs[name] = _build(kind, value, where + ".")
        else:
            kwargs[name] = _coerce(value, kind, where)
    return cls(**kwargs)


def _resolved_types(cls) -> dict:
    import typing

    return typing.get_type_hints(cls)


def validate(config: RunConfig) -> None:
    """Cross-field checks that the section dataclasses cannot express."""
    p = config.physics
    if not p.kappa > 0:
        raise ConfigError("physics.kappa must be positive")
    if p.eta < 0:
        raise ConfigError("physics.eta must be non-negative")
    g = config.geometry
    if g.n_ph_max < 1 or g.j_max < 2:
        raise ConfigError("geometry needs n_ph_max >= 1 and j_max >= 2")
    if g.even_parity_only and g.j_max % 2:
        raise ConfigError("geometry.j_max must be even with even_parity_only")
    b = config.bands
    if any(d > 0 for d in b.depths):
        raise ConfigError("bands.depths must be <= 0")
    if b.max_band < 0 or b.cutoff < 1 or b.q_grid < 2 or b.q_grid % 2:
        raise ConfigError("bands needs max_band >= 0, cutoff >= 1 and an even q_grid >= 2")
    if any(m < 0 or m > b.max_band for m in b.wannier_bands):
        raise ConfigError("bands.wannier_bands must lie in 0..max_band")
    s = config.scan
    if s.model not in ("harmonic", "wannier"):
        raise ConfigError("scan.model must be 'harmonic' or 'wannier'")
    if s.index < 0 or any(m < 0 for m in s.bands):
        raise ConfigError("band indices must be >= 0")
    if s.n_samples < 2 or s.cache_points < 8:
        raise ConfigError("scan.n_samples >= 2 and scan.cache_points >= 8 are required")
    mf = config.meanfield
    if not (mf.t_final > 0 and mf.sample_dt > 0) or mf.j_max < 2:
        raise ConfigError("meanfield needs positive t_final, sample_dt and j_max >= 2")
    mc = config.mcwf
    if not mc.sample_dt > 0 or mc.t_final < mc.sample_dt:
        raise ConfigError("mcwf needs sample_dt > 0 and t_final >= sample_dt")
    if not mc.tol > 0 or mc.trajectories < 1:
        raise ConfigError("mcwf needs tol > 0 and trajectories >= 1")
    if not 0 <= mc.n0 <= g.n_ph_max:
        raise ConfigError("mcwf.n0 must lie within the photon cutoff")
    if abs(mc.j0) > g.j_max or (g.even_parity_only and mc.j0 % 2):
        raise ConfigError("mcwf.j0 is not in the momentum basis")
    if mc.window and (len(mc.window) != 2 or not mc.window[0] < mc.window[1]):
        raise ConfigError("mcwf.window must be [t1, t2] with t1 < t2")
    if not mc.tolerance_band > 0:
        raise ConfigError("mcwf.tolerance_band must be positive")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    if config.seed < 0:
        raise ConfigError("seed must be non-negative")


def load_yaml(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_yaml(text)


def parse_yaml(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return RunConfig.from_dict(data if data is not None else {})


def dump_yaml(config: RunConfig) -> str:
    """Canonical text form: sorted keys, block style."""
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys such as ``physics.eta`` and revalidate."""
    data = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *path, last = dotted.split(".")
        for key in path:
            node = node[key]
        if last not in node:
            raise ConfigError(f"unknown key {dotted}")
        node[last] = value
    return RunConfig.from_dict(data)
