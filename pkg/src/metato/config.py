"""Run configuration: dataclass sections persisted as an INI file.

Defaults are the full-scale settings; the ``desk`` preset shrinks mesh and
schedule so a full pipeline runs on a laptop CPU.
"""
from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fem import MaterialModel
from .meta import MetaConfig
from .network import NetworkConfig
from .optim import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class MeshSection:
    nelx: int = 64
    nely: int = 64
    fine_nelx: int = 256
    fine_nely: int = 256


@dataclass
class NetworkSection:
    hidden: int = 256
    hidden_layers: int = 4
    block_size: int = 2
    omega0: float = 60.0
    baseline_omega0: float = 30.0
    conditioned: bool = True


@dataclass
class MetaSection:
    meta_iterations: int = 6000
    meta_batch: int = 5
    inner_steps: int = 10
    inner_lr: float = 1e-4
    outer_lr: float = 1e-6
    outer_optimizer: str = "adam"
    validation_interval: int = 500
    validation_steps: int = 10


@dataclass
class OptimSection:
    lr: float = 1e-4
    max_iters: int = 200
    min_iters: int = 10
    eps: float = 1e-5
    filter_radius: float = 0.0  # 0 selects nelx / 32
    amplification: float = 10.0
    solver: str = "auto"
    mma_move: float = 0.2
    mma_asyinit: float = 0.5
    mma_asyincr: float = 1.2
    mma_asydecr: float = 0.7
    E0: float = 1.0
    Emin: float = 1e-9
    nu: float = 0.3
    penal: float = 3.0


@dataclass
class PretrainSection:
    epochs: int = 100
    lr: float = 1e-5  # 1e-4 diverges after about ten epochs at omega0 = 60


@dataclass
class SeedSection:
    root: int = 0


@dataclass
class PathSection:
    output_dir: str = "."


@dataclass
class RunConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    meta: MetaSection = field(default_factory=MetaSection)
    optim: OptimSection = field(default_factory=OptimSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    paths: PathSection = field(default_factory=PathSection)

    @classmethod
    def preset(cls, name: str) -> RunConfig:
        if name == "full":
            return cls()
        if name == "desk":
            return cls(
                mesh=MeshSection(20, 20, 80, 80),
                meta=MetaSection(meta_iterations=200, validation_interval=50),
            )
        raise ConfigError(f"unknown preset {name!r} (full, desk)")

    # -- conversion to module configs
    def network_config(self, baseline: bool = False) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            in_features=3 if n.conditioned else 2,
            hidden=n.hidden,
            hidden_layers=n.hidden_layers,
            block_size=n.block_size,
            omega0=n.baseline_omega0 if baseline else n.omega0,
        )

    def meta_config(self, seed: int) -> MetaConfig:
        return MetaConfig(**{f.name: getattr(self.meta, f.name) for f in fields(self.meta)}, seed=seed)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(
            lr=o.lr, max_iters=o.max_iters, min_iters=o.min_iters, eps=o.eps,
            filter_radius=o.filter_radius or None, amplification=o.amplification,
            material=MaterialModel(o.E0, o.Emin, o.nu, o.penal), solver=o.solver,
            mma_move=o.mma_move, mma_asyinit=o.mma_asyinit, mma_asyincr=o.mma_asyincr,
            mma_asydecr=o.mma_asydecr,
        )

    def seed(self, name: str) -> int:
        return derive_seed(self.seeds.root, name)

    # -- INI round trip
    def to_ini(self) -> str:
        cp = _parser()
        for sec in fields(self):
            section = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base: RunConfig | None = None) -> RunConfig:
        cp = _parser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = base or cls()
        for name in cp.sections():
            for key, value in cp[name].items():
                cfg = cfg.override(f"{name}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path: str | Path, base: RunConfig | None = None) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, base)

    def override(self, dotted: str, value: str) -> RunConfig:
        """Return a copy with ``section.key`` set from its string form."""
        try:
            sec_name, key = dotted.split(".", 1)
            section = getattr(self, sec_name)
            current = getattr(section, key)
        except (ValueError, AttributeError) as exc:
            raise ConfigError(f"unknown config key {dotted!r}") from exc
        return replace(self, **{sec_name: replace(section, **{key: _parse(value, type(current), dotted)})})


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive field names (E0, Emin)
    return cp


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind: type, key: str):
    text = str(text).strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def derive_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for a named substream of the root seed."""
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])
