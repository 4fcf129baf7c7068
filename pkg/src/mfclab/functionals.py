"""Functions of a measure through finitely many linear statistics.

A :class:`MeasureFunctional` has the form ``F(mu) = phi(<mu, l_1>, ..., <mu, l_K>)``.
For this class the linear functional derivative and its spatial gradients are
explicit::

    dF/dm(mu)(y)      = sum_j phi_j(s) l_j(y)
    D_m F(mu, y)      = sum_j phi_j(s) grad l_j(y)
    D2_mm F(mu, y, z) = sum_jk phi_jk(s) grad l_j(y) grad l_k(z)^T

with ``s = <mu, l>``.  All evaluations broadcast over leading batch axes, so
the same object serves a single measure and a stack of particle clouds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure


@dataclass(frozen=True)
class Feature:
    """Test function ``l`` with gradient and Hessian, vectorised over ``(..., d)``."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    name: str = "feature"


def power_feature(p: int, axis: int = 0) -> Feature:
    """``l(x) = x_axis ** p``."""

    def value(x):
        return x[..., axis] ** p

    def grad(x):
        g = np.zeros_like(x)
        g[..., axis] = p * x[..., axis] ** (p - 1) if p >= 1 else 0.0
        return g

    def hess(x):
        h = np.zeros(x.shape + (x.shape[-1],))
        if p >= 2:
            h[..., axis, axis] = p * (p - 1) * x[..., axis] ** (p - 2)
        return h

    return Feature(value, grad, hess, name=f"x{axis}^{p}")


def _cap(u, radius):
    if radius is None:
        return u, np.ones_like(u), np.zeros_like(u)
    r2 = radius * radius
    th = np.tanh(u / r2)
    sech2 = 1.0 - th * th
    return r2 * th, sech2, -2.0 * sech2 * th / r2


@dataclass(frozen=True)
class MeasureFunctional:
    features: tuple[Feature, ...]
    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    d2phi: Callable[[np.ndarray], np.ndarray]
    name: str = "F"

    @property
    def n_features(self) -> int:
        return len(self.features)

    # evaluation -----------------------------------------------------------
    def stats(self, x: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
        """Linear statistics ``<mu, l_j>`` of clouds ``x`` with shape ``(..., N, d)``."""
        if not self.features:
            return np.zeros(x.shape[:-2] + (0,))
        vals = np.stack([f.value(x) for f in self.features], axis=-1)
        if w is None:
            return vals.mean(axis=-2)
        return np.einsum("...n,...nk->...k", w, vals)

    def __call__(self, x: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
        return self.phi(self.stats(x, w))

    def of(self, mu: EmpiricalMeasure) -> float:
        return float(self(mu.points, mu.weights))

    def measure_stats(self, mu: EmpiricalMeasure) -> np.ndarray:
        return self.stats(mu.points, mu.weights)

    # derivatives at given statistics -------------------------------------
    def linear_derivative_at(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        if not self.features:
            return np.zeros(np.broadcast_shapes(s.shape[:-1], y.shape[:-1]))
        ls = np.stack([f.value(y) for f in self.features], axis=-1)
        return np.sum(self.dphi(s) * ls, axis=-1)

    def dm_at(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        if not self.features:
            return np.zeros(np.broadcast_shapes(s.shape[:-1] + (1,), y.shape))
        gs = np.stack([f.grad(y) for f in self.features], axis=-2)  # (..., K, d)
        return np.einsum("...k,...kd->...d", self.dphi(s), gs)

    def dm_grad_at(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``d/dy D_m F(mu, y)``, shape ``(..., d, d)``."""
        if not self.features:
            return np.zeros(np.broadcast_shapes(s.shape[:-1] + (1, 1), y.shape + (y.shape[-1],)))
        hs = np.stack([f.hess(y) for f in self.features], axis=-3)  # (..., K, d, d)
        return np.einsum("...k,...kde->...de", self.dphi(s), hs)

    def dmm_at(self, s: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        if not self.features:
            return np.zeros(np.broadcast_shapes(s.shape[:-1] + (1, 1), y.shape + (y.shape[-1],)))
        gy = np.stack([f.grad(y) for f in self.features], axis=-2)
        gz = np.stack([f.grad(z) for f in self.features], axis=-2)
        return np.einsum("...jk,...jd,...ke->...de", self.d2phi(s), gy, gz)

    # derivatives at a measure --------------------------------------------
    def linear_derivative(self, mu: EmpiricalMeasure, y) -> np.ndarray:
        return self.linear_derivative_at(self.measure_stats(mu), np.atleast_2d(y))

    def dm(self, mu: EmpiricalMeasure, y) -> np.ndarray:
        return self.dm_at(self.measure_stats(mu), np.atleast_2d(y))

    def dmm(self, mu: EmpiricalMeasure, y, z) -> np.ndarray:
        return self.dmm_at(self.measure_stats(mu), np.atleast_2d(y), np.atleast_2d(z))

    # algebra -------------------------------------------------------------
    def __add__(self, other: "MeasureFunctional") -> "MeasureFunctional":
        k = self.n_features
        a, b = self, other

        def phi(s):
            return a.phi(s[..., :k]) + b.phi(s[..., k:])

        def dphi(s):
            return np.concatenate([a.dphi(s[..., :k]), b.dphi(s[..., k:])], axis=-1)

        def d2phi(s):
            ha, hb = a.d2phi(s[..., :k]), b.d2phi(s[..., k:])
            kb = hb.shape[-1]
            top = np.concatenate([ha, np.zeros(ha.shape[:-1] + (kb,))], axis=-1)
            bot = np.concatenate([np.zeros(hb.shape[:-1] + (k,)), hb], axis=-1)
            return np.concatenate([top, bot], axis=-2)

        return MeasureFunctional(a.features + b.features, phi, dphi, d2phi, f"{a.name}+{b.name}")


def constant(c: float = 0.0) -> MeasureFunctional:
    def phi(s):
        return np.full(s.shape[:-1], float(c))

    def dphi(s):
        return np.zeros(s.shape[:-1] + (0,))

    def d2phi(s):
        return np.zeros(s.shape[:-1] + (0, 0))

    return MeasureFunctional((), phi, dphi, d2phi, f"const({c})")


def expectation(feature: Feature, scale: float = 1.0) -> MeasureFunctional:
    """``scale * <mu, l>``; covers rewards of the form ``E^mu[l(x)]``."""

    def phi(s):
        return scale * s[..., 0]

    def dphi(s):
        return np.full(s.shape, scale)

    def d2phi(s):
        return np.zeros(s.shape + (1,))

    return MeasureFunctional((feature,), phi, dphi, d2phi, f"{scale}*<mu,{feature.name}>")


def mean_coordinate(axis: int = 0) -> MeasureFunctional:
    return expectation(power_feature(1, axis))


def mean_penalty(weight: float, target: float = 0.0, axis: int = 0, cap: float | None = None) -> MeasureFunctional:
    """``-weight * cap((<mu, x_axis> - target)^2)`` with ``cap(u) = R^2 tanh(u / R^2)``.

    The cap keeps the functional bounded; with the default ``cap=None`` it is
    the plain quadratic.
    """

    def phi(s):
        u = (s[..., 0] - target) ** 2
        return -weight * _cap(u, cap)[0]

    def dphi(s):
        e = s[..., 0] - target
        _, c1, _ = _cap(e * e, cap)
        return (-weight * c1 * 2.0 * e)[..., None]

    def d2phi(s):
        e = s[..., 0] - target
        _, c1, c2 = _cap(e * e, cap)
        return (-weight * (c2 * 4.0 * e * e + 2.0 * c1))[..., None, None]

    return MeasureFunctional((power_feature(1, axis),), phi, dphi, d2phi, f"-{weight}(m-{target})^2")


def variance_penalty(weight: float, axis: int = 0) -> MeasureFunctional:
    """``-weight * Var_mu(x_axis)``."""

    def phi(s):
        return -weight * (s[..., 1] - s[..., 0] ** 2)

    def dphi(s):
        return np.stack([2.0 * weight * s[..., 0], np.full(s.shape[:-1], -weight)], axis=-1)

    def d2phi(s):
        h = np.zeros(s.shape + (2,))
        h[..., 0, 0] = 2.0 * weight
        return h

    feats = (power_feature(1, axis), power_feature(2, axis))
    return MeasureFunctional(feats, phi, dphi, d2phi, f"-{weight}Var")
