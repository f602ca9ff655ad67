"""Experiment configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..geometry import FAN, GridSpec, ScanGeometry, protocol_geometry
from ..io import config_hash, read_json, write_json
from ..nn.optim import TrainConfig
from ..nn.unet import NetworkSpec
from ..phantom import PhantomSpec
from ..solver.sgp import SolverConfig

MODES = ("rising", "lpp")
SEED_KEYS = ("data", "noise", "init", "shuffle")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rebuild an experiment from scratch.

    ``geometry`` is either a named protocol such as ``"P_360_60"`` (expanded on
    the phantom grid with ``geometry_mode``) or an explicit geometry document.
    ``dataset`` holds either ``{"phantom": {...}, "count": N, "n_test": M}`` or
    ``{"manifest": path}`` pointing at an existing phantom manifest.
    """

    dataset: dict = field(default_factory=lambda: {"phantom": {}, "count": 140, "n_test": 20})
    geometry: str | dict = "P_360_60"
    geometry_mode: str = FAN
    noise_level: float = 0.01
    solver: SolverConfig = field(default_factory=SolverConfig)
    K: int = 10
    network: NetworkSpec = field(default_factory=NetworkSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "rising"
    output_dir: str = "experiment"
    seeds: dict = field(default_factory=lambda: {"data": 0, "noise": 1000, "init": 0, "shuffle": 0})

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        unknown = set(self.seeds) - set(SEED_KEYS)
        if unknown:
            raise ValueError(f"unknown seed keys: {sorted(unknown)}")
        if not ("phantom" in self.dataset or "manifest" in self.dataset):
            raise ValueError("dataset needs a 'phantom' spec or a 'manifest' path")
        object.__setattr__(self, "seeds", {**{"data": 0, "noise": 1000, "init": 0, "shuffle": 0}, **self.seeds})

    # derived pieces

    def phantom_spec(self) -> PhantomSpec:
        doc = dict(self.dataset.get("phantom") or {})
        doc["seed"] = self.seeds["data"]
        return PhantomSpec.from_dict(doc)

    @property
    def grid(self) -> GridSpec:
        if "manifest" in self.dataset:
            spec = read_json(self.dataset["manifest"])["spec"]
            return GridSpec(spec["grid"]["n"], spec["grid"].get("pixel_size", 1.0))
        return self.phantom_spec().grid

    def scan_geometry(self) -> ScanGeometry:
        if isinstance(self.geometry, str):
            return protocol_geometry(self.grid, self.geometry, self.geometry_mode)
        return ScanGeometry.from_dict(self.geometry)

    def train_config(self) -> TrainConfig:
        return replace(self.training, shuffle_seed=self.seeds["shuffle"])

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    # serialization

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "geometry": self.geometry,
            "geometry_mode": self.geometry_mode,
            "noise_level": self.noise_level,
            "solver": self.solver.to_dict(),
            "K": self.K,
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "mode": self.mode,
            "output_dir": self.output_dir,
            "seeds": dict(self.seeds),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "solver" in doc:
            doc["solver"] = SolverConfig.from_dict(doc["solver"])
        if "network" in doc:
            doc["network"] = NetworkSpec(**doc["network"])
        if "training" in doc:
            doc["training"] = TrainConfig.from_dict(doc["training"])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(read_json(path))

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    def with_overrides(self, *, K=None, mode=None, seeds=None, output_dir=None) -> "ExperimentConfig":
        changes = {}
        if K is not None:
            changes["K"] = K
        if mode is not None:
            changes["mode"] = mode
        if seeds:
            changes["seeds"] = {**self.seeds, **seeds}
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        return replace(self, **changes)

    # stage hashes: each covers exactly the settings its outputs depend on

    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        parts = {"dataset": d["dataset"], "data_seed": d["seeds"]["data"]}
        if stage == "generate-data":
            return config_hash(parts)
        parts.update(geometry=self.scan_geometry().to_dict(), noise_level=d["noise_level"],
                     noise_seed=d["seeds"]["noise"])
        if stage == "simulate":
            return config_hash(parts)
        parts["solver"] = d["solver"]
        if stage == "build-targets":
            return config_hash(parts)
        parts["K"] = d["K"]
        if stage == "build-ris":
            return config_hash(parts)
        parts.update(network=d["network"], training=self.train_config().to_dict(), mode=d["mode"],
                     init_seed=d["seeds"]["init"])
        if stage in ("train", "evaluate"):
            return config_hash(parts)
        raise ValueError(f"unknown stage {stage!r}")
