"""Experiment configuration: YAML schema, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..laws import LAW_KINDS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# per-kind parameter names with defaults; None means "required"
PARAMS: dict[str, dict] = {
    "boundary_check": {},
    "many_to_one": {"functionals": "all", "mode": "exact", "max_depth": 3},
    "mogulskii_rate": {"step": "pm1", "lower": -1.0, "upper": 1.0, "method": "both"},
    "curve_solve": {"c": 0.0, "x": 1.0, "sigma2": 1.0},
    "lambda": {"c": [0.0], "slope": 0.0, "sigma2": [1.0]},
    "killed_brw": {"c": -1.0},
    "selection_fixed": {"a": 1.0},
    "selection_profile": {"h": 1.0, "h_slope": 0.0},
    "consistent_displacement": {"bar_step": 0.5},
    "survival_scaling": {"theta": 1.0},
    "gw_tail": {"pmf": None, "z": [0.1, 0.3], "C": 1.0},
    "coupling_property": {"max_cap": 64},
}
KINDS = tuple(PARAMS)

# kinds that loop over a list of horizons, and kinds that need a reproduction law
NEEDS_N = {"many_to_one", "mogulskii_rate", "killed_brw", "selection_fixed", "selection_profile",
           "consistent_displacement", "survival_scaling", "gw_tail", "coupling_property"}
NEEDS_LAW = {"boundary_check", "many_to_one", "killed_brw", "selection_fixed",
             "selection_profile", "consistent_displacement", "survival_scaling",
             "coupling_property"}

TOP_KEYS = {"schema_version", "kind", "name", "law", "n", "reps", "seeds", "params", "cap", "out"}


@dataclass
class ExperimentConfig:
    kind: str
    law: dict | None = None
    n: list[int] = field(default_factory=list)
    reps: int = 1000
    seeds: list[int] = field(default_factory=lambda: [0])
    params: dict = field(default_factory=dict)
    cap: int = 50_000_000
    name: str | None = None
    out: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def label(self) -> str:
        return self.name or self.kind

    def to_dict(self) -> dict:
        d = {"schema_version": self.schema_version, "kind": self.kind, "name": self.name,
             "law": copy.deepcopy(self.law), "n": list(self.n), "reps": self.reps,
             "seeds": list(self.seeds), "params": copy.deepcopy(self.params), "cap": self.cap,
             "out": self.out}
        return {k: v for k, v in d.items() if v is not None}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        """Digest of everything that affects results (``out`` and ``name`` excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        d.pop("name", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        c.seeds = [int(s) for s in seeds]
        return c


def _int_list(value, key) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                              for v in value):
        raise ConfigError(f"'{key}' must be a list of integers")
    return list(value)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a mapping and fill defaults. Unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    kind = raw.get("kind")
    if kind not in PARAMS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {list(KINDS)}")

    law = raw.get("law")
    if kind in NEEDS_LAW and law is None:
        raise ConfigError(f"kind {kind!r} needs a 'law'")
    if law is not None:
        if not isinstance(law, dict) or law.get("kind") not in LAW_KINDS:
            raise ConfigError(f"'law' must be a mapping with kind in {list(LAW_KINDS)}")

    if "n" in raw:
        n = _int_list(raw["n"], "n")
        if not n:
            raise ConfigError("'n' must not be empty")
        if any(v < 0 for v in n):
            raise ConfigError("'n' entries must be non-negative")
    elif kind in NEEDS_N:
        raise ConfigError(f"kind {kind!r} needs an 'n' list")
    else:
        n = []

    reps = raw.get("reps", 1000)
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        raise ConfigError("'reps' must be a positive integer")
    seeds = _int_list(raw.get("seeds", [0]), "seeds")
    if not seeds:
        raise ConfigError("'seeds' must not be empty")
    cap = raw.get("cap", 50_000_000)
    if not isinstance(cap, int) or cap < 1:
        raise ConfigError("'cap' must be a positive integer")

    given = raw.get("params", {}) or {}
    if not isinstance(given, dict):
        raise ConfigError("'params' must be a mapping")
    allowed = PARAMS[kind]
    bad = set(given) - set(allowed)
    if bad:
        raise ConfigError(f"unknown params for {kind!r}: {sorted(bad)}; allowed {sorted(allowed)}")
    params = {}
    for key, default in allowed.items():
        if key in given:
            params[key] = given[key]
        elif default is None:
            raise ConfigError(f"kind {kind!r} needs params.{key}")
        else:
            params[key] = copy.deepcopy(default)

    name = raw.get("name")
    out = raw.get("out")
    return ExperimentConfig(kind, law, n, reps, seeds, params, cap,
                            None if name is None else str(name), None if out is None else str(out))


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(raw)
