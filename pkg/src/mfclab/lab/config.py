"""Experiment configuration in INI format with preset inheritance.

A config has an ``[experiment]`` section and a ``[model]`` section::

    [experiment]
    kind = chaos
    N_list = 8, 16, 32, 64
    M = 200
    n_steps = 50
    seed = 7

    [model]
    preset = tanh-drift
    lam = 0.5

A top-level ``base = other.ini`` key (in ``[experiment]``) loads that file
first; keys given here override it.  Keys other than the standard budgets are
kept in ``extra`` and interpreted by the individual experiments.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..model import SpecError
from ..presets import PRESETS

KINDS = ("simulate", "bsde", "hjb", "chaos", "value-rate", "stability", "cross-check", "partialobs")
_STANDARD = {"kind", "n_list", "m", "n_steps", "n_inner", "seed", "seeds", "out", "base"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    preset: str = "lq"
    overrides: dict = field(default_factory=dict)
    N_list: tuple[int, ...] = (8, 16, 32, 64)
    M: int = 1000
    n_steps: int = 50
    N_inner: int = 1024
    seed: int = 0
    seeds: tuple[int, ...] = ()
    out: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.preset not in PRESETS:
            raise SpecError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if any(b <= a for a, b in zip(self.N_list, self.N_list[1:])):
            raise ConfigError("N_list must be strictly increasing")
        if not self.N_list or min(self.N_list) < 1:
            raise ConfigError("N_list must contain positive integers")
        for name in ("M", "n_steps", "N_inner"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"budget {name} must be positive")

    @property
    def seed_list(self) -> tuple[int, ...]:
        return self.seeds or (self.seed,)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override the base seed; a seed list is shifted by the same offset."""
        shift = int(seed) - self.seed
        return replace(self, seed=int(seed), seeds=tuple(s + shift for s in self.seeds))

    def get(self, key: str, default=None, kind=float):
        v = self.extra.get(key.lower())
        if v is None:
            return default
        if kind is bool:
            return str(v).strip().lower() in ("1", "true", "yes", "on")
        if kind in (list, tuple):
            return [float(s) for s in _split(v)]
        return kind(v)


def _split(v: str) -> list[str]:
    return [s for s in str(v).replace(",", " ").split() if s]


def _int_tuple(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in _split(v))
    except ValueError as exc:
        raise ConfigError(f"expected a list of integers, got {v!r}") from exc


def _read(path: Path, seen: tuple = ()) -> tuple[dict, dict]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"circular base chain through {path}")
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read(path)
    exp = {k.lower(): v for k, v in cp["experiment"].items()} if cp.has_section("experiment") else {}
    model = {k.lower(): v for k, v in cp["model"].items()} if cp.has_section("model") else {}
    extra_sections = set(cp.sections()) - {"experiment", "model"}
    if extra_sections:
        raise ConfigError(f"unknown sections {sorted(extra_sections)}")
    if "base" in exp:
        b_exp, b_model = _read(path.parent / exp.pop("base"), seen + (path,))
        if "preset" in model and model["preset"] != b_model.get("preset", model["preset"]):
            b_model = {"preset": model["preset"]}
        exp, model = {**b_exp, **exp}, {**b_model, **model}
    return exp, model


def parse_config(exp: dict, model: dict) -> ExperimentConfig:
    if "kind" not in exp:
        raise ConfigError("missing [experiment] kind")
    model = dict(model)
    preset = model.pop("preset", "lq")
    try:
        overrides = {k: float(v) for k, v in model.items()}
    except ValueError as exc:
        raise ConfigError(f"model overrides must be numeric: {exc}") from exc
    kw = {"kind": exp["kind"].strip(), "preset": preset.strip(), "overrides": overrides}
    try:
        if "n_list" in exp:
            kw["N_list"] = _int_tuple(exp["n_list"])
        if "seeds" in exp:
            kw["seeds"] = _int_tuple(exp["seeds"])
        for key, name in (("m", "M"), ("n_steps", "n_steps"), ("n_inner", "N_inner"), ("seed", "seed")):
            if key in exp:
                kw[name] = int(exp[key])
    except ValueError as exc:
        raise ConfigError(f"schema violation: {exc}") from exc
    if "out" in exp:
        kw["out"] = exp["out"]
    kw["extra"] = {k: v for k, v in exp.items() if k not in _STANDARD}
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    return parse_config(*_read(Path(path)))
