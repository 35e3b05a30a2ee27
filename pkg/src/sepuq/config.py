"""Experiment configuration: TOML files layered over built-in profiles.

A configuration is resolved as ``profile defaults <- file <- --seed``.  Its
hash is the SHA-256 of the canonical JSON text of the resolved settings
(sorted keys, no whitespace), so equal settings hash equally regardless of
how they were written.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import tomli

from .errors import ValidationError
from .gp import GPHyper
from .kle import CovarianceSpec
from .mcmc import McmcConfig
from .pgd import PGDTolerances, ThetaGrid
from .vb import ThetaPrior, VBConfig


@dataclass(frozen=True)
class MeshSpec:
    nx: int = 25
    ny: int = 25


@dataclass(frozen=True)
class SurrogateSpec:
    n_kl: int = 4
    n_terms: int = 6


@dataclass(frozen=True)
class ObservationSpec:
    count: int = 9
    noise_percent: float = 1.0

    def __post_init__(self):
        k = int(round(np.sqrt(self.count))) if self.count > 0 else 0
        if self.count < 1 or k * k != self.count:
            raise ValidationError(f"observation count must be a positive perfect square, "
                                  f"got {self.count}")
        if not self.noise_percent > 0:
            raise ValidationError("noise_percent must be positive")

    @property
    def per_axis(self) -> int:
        return int(round(np.sqrt(self.count)))


@dataclass(frozen=True)
class BenchmarkSpec:
    samples: int = 100


_SECTIONS = {
    "mesh": MeshSpec,
    "covariance": CovarianceSpec,
    "surrogate": SurrogateSpec,
    "theta_grid": ThetaGrid,
    "pgd": PGDTolerances,
    "gp": GPHyper,
    "observations": ObservationSpec,
    "prior": ThetaPrior,
    "vb": VBConfig,
    "mcmc": McmcConfig,
    "benchmark": BenchmarkSpec,
}

PROFILES = {
    "ci": {
        "seed": 0,
        "mesh": {"nx": 25, "ny": 25},
        "surrogate": {"n_kl": 4, "n_terms": 6},
        "observations": {"count": 9},
        "mcmc": {"iterations": 10_000, "burn_in": 2_000},
        "benchmark": {"samples": 100},
    },
    "paper": {
        "seed": 0,
        "mesh": {"nx": 50, "ny": 50},
        "surrogate": {"n_kl": 10, "n_terms": 10},
        "observations": {"count": 9},
        "mcmc": {"iterations": 100_000, "burn_in": 10_000},
        "benchmark": {"samples": 100},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    mesh: MeshSpec
    covariance: CovarianceSpec
    surrogate: SurrogateSpec
    theta_grid: ThetaGrid
    pgd: PGDTolerances
    gp: GPHyper
    observations: ObservationSpec
    prior: ThetaPrior
    vb: VBConfig
    mcmc: McmcConfig
    benchmark: BenchmarkSpec

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def rng(self, stream: str) -> np.random.Generator:
        """Independent generator per named stream, all derived from ``seed``."""
        tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
        return np.random.default_rng([self.seed, tag])


def canonical_text(settings: dict) -> str:
    return json.dumps(settings, sort_keys=True, separators=(",", ":"))


def config_hash(settings: dict) -> str:
    return hashlib.sha256(canonical_text(settings).encode()).hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _section(name: str, cls, values) -> object:
    if not isinstance(values, dict):
        raise ValidationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"[{name}]: {exc}") from exc


def build_config(settings: dict) -> ExperimentConfig:
    unknown = set(settings) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ValidationError(f"unknown configuration sections: {sorted(unknown)}")
    seed = settings.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"seed must be a nonnegative integer, got {seed!r}")
    parts = {name: _section(name, cls, settings.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(seed=seed, **parts)
    n2 = cfg.surrogate.n_kl
    if n2 < 0 or cfg.surrogate.n_terms < 0:
        raise ValidationError("n_kl and n_terms must be nonnegative")
    if n2 > (cfg.mesh.nx + 1) * (cfg.mesh.ny + 1):
        raise ValidationError("n_kl exceeds the number of mesh nodes")
    if cfg.mesh.nx < 2 or cfg.mesh.ny < 2:
        raise ValidationError("mesh needs at least 2 cells per axis")
    if (cfg.vb.theta_min, cfg.vb.theta_max) != (cfg.theta_grid.theta_min, cfg.theta_grid.theta_max):
        raise ValidationError("vb theta range must match the theta grid")
    return cfg


def load_config(path: str | Path | None = None, profile: str = "ci",
                seed: int | None = None, overrides: dict | None = None) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    settings = PROFILES[profile]
    if path is not None:
        try:
            with open(path, "rb") as fh:
                settings = _merge(settings, tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
        except OSError as exc:
            raise ValidationError(f"cannot read {path}: {exc}") from exc
    if overrides:
        settings = _merge(settings, overrides)
    if seed is not None:
        settings = _merge(settings, {"seed": seed})
    return build_config(settings)
