"""Experiment configuration: one JSON document, hashed for provenance."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .models import ArchitectureConfig, TrainConfig
from .phantom import RAW_SHAPE, PhantomConfig
from .preprocess import PAPER_BLOCK, PAPER_TRIM

MODEL_KINDS = ("vae", "ivae")
_ARCH_KEYS = set(ArchitectureConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__) - {"seed"}


def _default_models() -> dict:
    return {
        "vae": {"latent_dim": 8, "beta": 3e-4},
        "ivae": {"latent_dim": 32, "beta": 1e-4, "margin": 5.0},
    }


def _default_analysis() -> dict:
    return {
        "reg": None,
        "traversal_values": [-1.25, 0.0, 1.25],
        "top_k": 2,
        "merge_leuk": False,
        "gap_sd": 1.0,
    }


@dataclass
class ExperimentConfig:
    """Everything a run needs, with a content digest.

    ``models`` holds per-kind overrides (keys of either the architecture or
    the training section) so the VAE and IVAE can differ in latent size and
    loss weights while sharing the rest.
    """

    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 2024
    n_patients: int = 300
    train_fraction: float = 0.9
    raw: bool = False
    # acquisition contrast follows echo time, so the MS scan bias reaches the pixels
    phantom: dict = field(default_factory=lambda: {"shape": [20, 24, 20], "contrast_gain": 0.3})
    preprocess: dict = field(default_factory=lambda: {"trim": list(PAPER_TRIM), "block": PAPER_BLOCK, "q": 99.5})
    architecture: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    models: dict = field(default_factory=_default_models)
    analysis: dict = field(default_factory=_default_analysis)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 5:
            raise ValueError(f"n_patients must be >= 5, got {self.n_patients}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        unknown = set(self.models) - set(MODEL_KINDS)
        if unknown:
            raise ValueError(f"unknown model kinds {sorted(unknown)}")
        for kind, over in self.models.items():
            bad = set(over) - _ARCH_KEYS - _TRAIN_KEYS
            if bad:
                raise ValueError(f"models.{kind}: unknown keys {sorted(bad)}")
        bad = set(self.architecture) - _ARCH_KEYS
        if bad:
            raise ValueError(f"architecture: unknown keys {sorted(bad)}")
        bad = set(self.train) - _TRAIN_KEYS
        if bad:
            raise ValueError(f"train: unknown keys {sorted(bad)}")
        bad = set(self.analysis) - set(_default_analysis())
        if bad:
            raise ValueError(f"analysis: unknown keys {sorted(bad)}")
        # building the typed sections surfaces their own validation errors
        self.phantom_config()
        for kind in MODEL_KINDS:
            self.arch_for(kind)
            self.train_for(kind)

    # ------------------------------------------------------------ typed views

    def phantom_config(self) -> PhantomConfig:
        d = dict(self.phantom)
        if self.raw:
            d["shape"] = list(RAW_SHAPE)
        return PhantomConfig.from_dict(d)

    def arch_for(self, kind: str) -> ArchitectureConfig:
        d = dict(self.architecture)
        if "input_shape" not in d:
            d["input_shape"] = self.volume_shape()
        d.update({k: v for k, v in self.models.get(kind, {}).items() if k in _ARCH_KEYS})
        return ArchitectureConfig(**d)

    def train_for(self, kind: str) -> TrainConfig:
        d = dict(self.train)
        d.update({k: v for k, v in self.models.get(kind, {}).items() if k in _TRAIN_KEYS})
        return TrainConfig(seed=self.seed, **d)

    def volume_shape(self) -> tuple[int, int, int]:
        """Shape of the volumes the models see (after preprocessing in raw mode)."""
        if not self.raw:
            return tuple(self.phantom_config().shape)
        trim = self.preprocess.get("trim") or RAW_SHAPE
        block = int(self.preprocess.get("block", PAPER_BLOCK))
        return tuple(int(t) // block for t in trim)

    def analysis_value(self, key: str) -> Any:
        return self.analysis.get(key, _default_analysis()[key])

    # ------------------------------------------------------------ text form

    def to_dict(self) -> dict:
        return {
            "data_dir": self.data_dir, "out_dir": self.out_dir, "seed": self.seed,
            "n_patients": self.n_patients, "train_fraction": self.train_fraction, "raw": self.raw,
            "phantom": copy.deepcopy(self.phantom), "preprocess": copy.deepcopy(self.preprocess),
            "architecture": copy.deepcopy(self.architecture), "train": copy.deepcopy(self.train),
            "models": copy.deepcopy(self.models), "analysis": copy.deepcopy(self.analysis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown config keys {sorted(bad)}")
        return cls(**copy.deepcopy(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        """sha256 of the canonical (sorted, compact) JSON form."""
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def with_overrides(self, seed: int | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)
