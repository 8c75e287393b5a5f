"""Run configuration: defaults, file parsing (INI or JSON), flag overrides.

The file format is flat sectioned key=value (configparser syntax); a nested
JSON object with the same section/key names is accepted as an alternative.
Unknown sections or keys are rejected. All randomized stages derive their
streams from one root seed via stable named substreams, so adding a stage
never perturbs another stage's randomness.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .optim import TrainConfig


@dataclass
class GeometryConfig:
    sod: float = 4.0
    sdd: float = 8.0
    det_width: float = 6.0
    det_height: float = 6.0
    n_u: int = 64
    n_v: int = 64
    i0: float = 1.0


@dataclass
class ReconConfig:
    dims: int = 64
    half_extent: float = 0.0  # 0 means: derive from the geometry FOV
    cgls_iters: int = 20
    sart_sweeps: int = 5
    tv_steps: int = 30
    sart_relax: float = 1.0
    tv_step: float = 0.0  # 0 means: auto from the volume range
    interleave: bool = False
    ct_method: str = "sart"
    ct_sweeps: int = 10


@dataclass
class SeedSection:
    threshold_frac: float = 0.1  # fraction of the volume max
    count: int = 400
    sigma_mode: str = "voxel-value"
    sigma_const: float = 0.1


@dataclass
class MetricsConfig:
    force_unit_range: bool = False


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 0  # 0 = leave the numba default


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    seeding: SeedSection = field(default_factory=SeedSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=RunSection)

    def resolved_half_extent(self) -> float:
        if self.recon.half_extent > 0:
            return self.recon.half_extent
        g = self.geometry
        return 0.5 * g.det_width * g.sod / g.sdd

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in ("geometry", "recon", "seeding", "train", "metrics", "run")}


_SECTIONS = {
    "geometry": GeometryConfig,
    "recon": ReconConfig,
    "seeding": SeedSection,
    "train": TrainConfig,
    "metrics": MetricsConfig,
    "run": RunSection,
}


def _coerce(raw, target_type, key):
    if isinstance(raw, bool) or not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if target_type is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {target_type.__name__}") \
            from exc
    return text


def _apply_section(section_name: str, values: dict, current):
    cls = _SECTIONS[section_name]
    valid = {f.name: f.type for f in fields(cls)}
    updates = {}
    for key, raw in values.items():
        if key not in valid:
            raise ConfigError(f"unknown config key [{section_name}] {key!r}")
        fld = next(f for f in fields(cls) if f.name == key)
        base_type = type(getattr(current, key))
        updates[key] = _coerce(raw, base_type, f"{section_name}.{key}")
    merged = dataclasses.asdict(current)
    merged.update(updates)
    return cls(**merged)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus {section: {key: value}} overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing config file: {path}")
        if path.suffix.lower() == ".json":
            with open(path) as fh:
                try:
                    data = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object of sections")
        else:
            parser = configparser.ConfigParser()
            try:
                parser.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: invalid config ({exc})") from exc
            data = {s: dict(parser.items(s)) for s in parser.sections()}

    config = RunConfig()
    for source in (data, overrides or {}):
        for section_name, values in source.items():
            if section_name not in _SECTIONS:
                raise ConfigError(f"unknown config section {section_name!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section_name!r} must hold key=value pairs")
            setattr(config, section_name,
                    _apply_section(section_name, values, getattr(config, section_name)))
    return config


def write_config_echo(directory, config: RunConfig, extra: dict | None = None) -> None:
    """Write the fully-resolved configuration next to a command's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = config.to_dict()
    payload["resolved_half_extent"] = config.resolved_half_extent()
    if extra:
        payload["command"] = extra
    with open(directory / "run_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def rng_for(root_seed: int, label: str) -> np.random.Generator:
    """Named deterministic substream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(
        entropy=int(root_seed) & 0xFFFFFFFF,
        spawn_key=(zlib.crc32(label.encode("utf-8")),)))


def substream_seed(root_seed: int, label: str) -> int:
    """Stable integer seed for stages that take a plain seed."""
    return int(rng_for(root_seed, label).integers(0, 2**31 - 1))
