"""Experiment configuration, run manifests and output files."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__
from .core import MODEL_KINDS, CoefficientModel

OUTPUT_ROOT_ENV = "BULKDIFF_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    kind: str = "identity"
    Lambda: float = Field(1.0, ge=1.0)
    threshold: float = Field(2.0, ge=0.0)
    width: float = Field(0.25, gt=0.0, le=1.0)

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {v!r}; choose from {sorted(MODEL_KINDS)}")
        return v

    def build(self) -> CoefficientModel:
        return CoefficientModel(self.kind, self.Lambda, self.threshold, self.width)


class BasisConfig(_Strict):
    spacing: float = Field(0.5, gt=0)
    degree: int = Field(1, ge=1, le=2)
    pairs: bool = True
    radial_spacing: float = Field(0.25, gt=0)
    n_radial: int = Field(8, ge=1)
    radial_degree: int = Field(1, ge=1, le=2)


class SampleConfig(_Strict):
    M: int = Field(1000, ge=1)
    eval_M: Optional[int] = Field(None, ge=1)
    palm_M: int = Field(20000, ge=1)
    replicas: int = Field(500, ge=1)
    control_variate: bool = False


class BumpConfig(_Strict):
    """Gaussian bump amplitude * exp(-|x - center|^2 / (2 width^2)) on the torus."""

    center: List[float] = Field(default_factory=lambda: [0.0])
    width: float = Field(1.0, gt=0)
    amplitude: float = 1.0


class DynamicsConfig(_Strict):
    dt: float = Field(0.05, gt=0)
    side: float = Field(27.0, gt=2)
    grid_h: float = Field(0.1, gt=0)
    scheme: Literal["metropolis-gaussian", "plain-euler"] = "metropolis-gaussian"
    pairs: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)])
    f: BumpConfig = Field(default_factory=BumpConfig)
    g: BumpConfig = Field(default_factory=BumpConfig)
    abar: Optional[List[List[float]]] = None

    @field_validator("pairs")
    @classmethod
    def _pairs(cls, v):
        for t, s in v:
            if not t >= s >= 0:
                raise ValueError("each (t, s) pair needs t >= s >= 0")
        return v


class GreenKuboConfig(_Strict):
    lambdas: List[float] = Field(default_factory=lambda: [0.0, 0.1, 1.0, 10.0])
    abar_ref: Optional[List[List[float]]] = None
    direction: Optional[List[float]] = None

    @field_validator("lambdas")
    @classmethod
    def _lams(cls, v):
        if any(l < 0 for l in v):
            raise ValueError("lambda values must be nonnegative")
        return v


class ExperimentConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    rho: float = Field(1.0, gt=0)
    dim: int = Field(1, ge=1, le=2)
    m_list: List[int] = Field(default_factory=lambda: [0, 1, 2])
    basis: BasisConfig = Field(default_factory=BasisConfig)
    samples: SampleConfig = Field(default_factory=SampleConfig)
    seed: int = Field(0, ge=0)
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    green_kubo: GreenKuboConfig = Field(default_factory=GreenKuboConfig)
    alpha_override: Optional[float] = Field(None, ge=0)
    output_dir: Optional[str] = None

    @field_validator("m_list")
    @classmethod
    def _ms(cls, v):
        if not v or any(m < 0 or m > 6 for m in v):
            raise ValueError("m_list entries must lie in [0, 6]")
        return sorted(set(v))

    @model_validator(mode="after")
    def _dims(self):
        for b in (self.dynamics.f, self.dynamics.g):
            if len(b.center) != self.dim:
                raise ValueError("bump centers must have length dim")
        for mat in (self.dynamics.abar, self.green_kubo.abar_ref):
            if mat is not None and np.shape(mat) != (self.dim, self.dim):
                raise ValueError("matrices must be dim x dim")
        if self.green_kubo.direction is not None and len(self.green_kubo.direction) != self.dim:
            raise ValueError("direction must have length dim")
        return self

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return ExperimentConfig.model_validate(raw)


def task_seed(seed, *key) -> int:
    """Independent per-task seed derived from the run seed and a task key."""
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# output

def output_root(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "bulkdiff_runs"))


def run_directory(cfg: ExperimentConfig, command: str) -> Path:
    """``<root>/<command>-<hash10>``; an existing directory gets a numeric suffix."""
    root = output_root(cfg)
    base = f"{command}-{cfg.config_hash()[:10]}"
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def write_csv(path, header: List[str], rows, meta: dict):
    """UTF-8 CSV with ``# key=value`` metadata lines before the column header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    """Returns (meta, header, rows as strings)."""
    meta, rows, header = {}, [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
                continue
            break
        fh.seek(0)
        body = [l for l in fh if not l.startswith("#")]
    r = list(csv.reader(body))
    header, rows = r[0], r[1:]
    return meta, header, rows


class RunManifest:
    """Config hash, version, per-task seeds, wall-clock and the output inventory."""

    def __init__(self, cfg: ExperimentConfig, command: str, directory: Path):
        self.cfg = cfg
        self.command = command
        self.directory = Path(directory)
        self.seeds = {}
        self.files = []
        self._t0 = time.perf_counter()

    def add_file(self, name):
        self.files.append(name)

    def to_dict(self):
        inv = {}
        for f in sorted(self.files):
            data = (self.directory / f).read_bytes()
            inv[f] = hashlib.sha256(data).hexdigest()
        return {"command": self.command, "config_hash": self.cfg.config_hash(), "version": __version__,
                "config": json.loads(self.cfg.canonical()), "seeds": self.seeds,
                "wall_clock_s": round(time.perf_counter() - self._t0, 3), "files": inv}

    def write(self):
        with open(self.directory / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, ensure_ascii=False)
