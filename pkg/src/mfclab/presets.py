"""Named model presets with numeric overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import functionals as fn
from .measure import GaussianLaw
from .model import CoefficientSpec, LqParams, SpecError
from .partialobs import LqgParams, PartialObsSpec


@dataclass(frozen=True)
class InteractParams(LqParams):
    """LQ model with mean reversion of each particle towards the cloud mean, ``b0 = lam (m - x)``."""

    lam: float = 1.0

    def spec(self) -> CoefficientSpec:
        lam = self.lam

        def b0(t, x, s):
            return lam * (s.mean - x)

        def drift(t, x, s, a):
            return b0(t, x, s) + np.asarray(a)[..., None, :]

        return replace(super().spec(), b0=b0, drift=drift, interacting=bool(lam), name="lq-interact")


@dataclass(frozen=True)
class TanhParams:
    """``b0 = -kappa x + lam tanh(m)`` with LQ rewards on the mean."""

    kappa: float = 1.0
    lam: float = 0.5
    sigma: float = 1.0
    sigma0: float = 0.5
    a_max: float = 4.0
    c: float = 1.0
    gamma: float = 1.0
    theta: float = 0.0
    m0: float = 0.5
    v0: float = 1.0
    T: float = 1.0

    def spec(self) -> CoefficientSpec:
        kappa, lam = self.kappa, self.lam

        def b0(t, x, s):
            return -kappa * x + lam * np.tanh(s.mean)

        def drift(t, x, s, a):
            return b0(t, x, s) + np.asarray(a)[..., None, :]

        return CoefficientSpec(
            dim=1,
            a_lo=np.array([-self.a_max]),
            a_hi=np.array([self.a_max]),
            sigma0=np.array([[self.sigma0]]),
            sigma=np.array([[self.sigma]]),
            b0=b0,
            control_matrix=np.array([[1.0 / self.sigma0]]),
            F=fn.mean_penalty(self.c, self.theta, cap=100.0),
            g=fn.mean_penalty(self.gamma, self.theta, cap=100.0),
            initial_law=GaussianLaw.of([self.m0], [[self.v0]]),
            horizon=self.T,
            a0=np.zeros(1),
            b1_bound=self.a_max / self.sigma0,
            drift=drift,
            constant_vol=True,
            quadratic_control=True,
            interacting=bool(lam),
            name="tanh-drift",
        )


PRESETS = {
    "lq": LqParams,
    "lq-interact": InteractParams,
    "tanh-drift": TanhParams,
    "partial-obs-lqg": lambda **kw: LqgParams(**{"eta": 1.0, **kw}),
}


def preset_params(name: str, overrides: dict | None = None):
    """Parameter object of preset ``name`` with numeric ``overrides`` applied."""
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]()
    allowed = {f.name for f in fields(base)}
    overrides = dict(overrides or {})
    unknown = set(overrides) - allowed
    if unknown:
        raise SpecError(f"preset {name!r} has no parameters {sorted(unknown)}")
    return replace(base, **{k: float(v) for k, v in overrides.items()})


def build_preset(name: str, overrides: dict | None = None) -> CoefficientSpec | PartialObsSpec:
    p = preset_params(name, overrides)
    return p.pspec() if isinstance(p, LqgParams) else p.spec()
