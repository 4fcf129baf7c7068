"""Control problem definitions: coefficients, Hamiltonian, validation and the
linear-quadratic Riccati benchmark.

Coefficients follow the drift-controlled split ``b = b0 + sigma0 b1`` and see
the measure argument only through a :class:`CloudSummary` (coordinatewise mean
and variance); rewards are :class:`~mfclab.functionals.MeasureFunctional`.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functionals as fn
from .measure import EmpiricalMeasure, GaussianLaw


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class CloudSummary:
    """Mean and coordinatewise variance of clouds ``x`` of shape ``(..., N, d)``."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray, w: np.ndarray | None = None) -> "CloudSummary":
        if w is None:
            m = x.mean(axis=-2)
            v = (x * x).mean(axis=-2) - m * m
        else:
            m = np.einsum("...n,...nd->...d", w, x)
            v = np.einsum("...n,...nd->...d", w, x * x) - m * m
        return cls(m, np.maximum(v, 0.0))

    @classmethod
    def of_measure(cls, mu: EmpiricalMeasure) -> "CloudSummary":
        return cls.of(mu.points, mu.weights)

    def expand(self) -> "CloudSummary":
        """Insert a particle axis so fields broadcast against ``(..., N, d)``."""
        return CloudSummary(self.mean[..., None, :], self.var[..., None, :])


def _zero_drift(t, x, s):
    return np.zeros_like(x)


def _quadratic_cost(t, a):
    return -0.5 * np.sum(a * a, axis=-1)


@dataclass(frozen=True)
class CoefficientSpec:
    """Markovian mean-field control problem with drift-controlled dynamics.

    ``b0(t, x, s)`` maps particles ``x (..., N, d)`` and a summary whose fields
    broadcast against ``x`` to drifts; ``sigma`` is a constant ``d x d`` matrix or
    a callable with the same signature returning ``(..., N, d, d)``;
    ``b1(t, s, a)`` maps controls ``(..., d)`` to ``(..., d)``.  When
    ``control_matrix`` is set, ``b1(t, s, a) = control_matrix @ a``.
    """

    dim: int
    a_lo: np.ndarray
    a_hi: np.ndarray
    sigma0: np.ndarray
    sigma: np.ndarray | Callable = None
    b0: Callable = _zero_drift
    b1: Callable | None = None
    control_matrix: np.ndarray | None = None
    L0: Callable = _quadratic_cost
    F: fn.MeasureFunctional = field(default_factory=fn.constant)
    g: fn.MeasureFunctional = field(default_factory=fn.constant)
    initial_law: GaussianLaw | EmpiricalMeasure | None = None
    horizon: float = 1.0
    a0: np.ndarray | None = None
    b1_bound: float = np.inf
    drift: Callable | None = None
    markovian: bool = True
    constant_vol: bool = False
    drift_controlled: bool = True
    quadratic_control: bool = False
    interacting: bool = False
    grid_points: int = 101
    name: str = "custom"

    # control set -------------------------------------------------------------
    def clamp(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.a_lo, self.a_hi)

    def in_control_set(self, a, tol: float = 1e-12) -> bool:
        a = np.asarray(a, dtype=float)
        return bool(np.all(a >= self.a_lo - tol) and np.all(a <= self.a_hi + tol))

    def control_grid(self, points: int | None = None) -> np.ndarray:
        g = points or self.grid_points
        axes = [np.linspace(lo, hi, g) for lo, hi in zip(self.a_lo, self.a_hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    # coefficients ------------------------------------------------------------
    def control_drift(self, t, s: CloudSummary, a: np.ndarray) -> np.ndarray:
        """``b1(t, mu, a)``."""
        if self.control_matrix is not None:
            return a @ self.control_matrix.T
        return self.b1(t, s, a)

    def sigma_at(self, t, x, s) -> np.ndarray:
        if callable(self.sigma):
            return self.sigma(t, x, s)
        return self.sigma

    def full_drift(self, t, x, s: CloudSummary, a) -> np.ndarray:
        """``b = b0 + sigma0 b1`` for particles ``x (..., N, d)`` and shared control ``a (..., d)``."""
        ctrl = self.control_drift(t, s, a) @ self.sigma0.T
        return self.b0(t, x, s.expand()) + ctrl[..., None, :]

    # Hamiltonians ------------------------------------------------------------
    def hamiltonian_core(self, t, z: np.ndarray, s: CloudSummary | None = None, points: int | None = None):
        """``sup_a L0(t, a) + b1(t, mu, a).z`` and its maximiser, batched over ``z (..., d)``."""
        z = np.asarray(z, dtype=float)
        if self.quadratic_control and self.control_matrix is not None:
            w = z @ self.control_matrix
            a = self.clamp(w)
            val = self.L0(t, a) + np.sum(a * w, axis=-1)
            return val, a
        grid = self.control_grid(points)
        lead = z.shape[:-1]
        zf = z.reshape(-1, self.dim)
        if s is None:
            sb = CloudSummary(np.zeros((1, 1, self.dim)), np.zeros((1, 1, self.dim)))
        else:
            sb = CloudSummary(np.broadcast_to(s.mean, lead + (self.dim,)).reshape(-1, 1, self.dim),
                              np.broadcast_to(s.var, lead + (self.dim,)).reshape(-1, 1, self.dim))
        drift = self.control_drift(t, sb, grid[None, :, :])  # (B, G, d)
        vals = self.L0(t, grid)[None, :] + np.einsum("bgd,bd->bg", np.broadcast_to(drift, (zf.shape[0],) + grid.shape), zf)
        k = np.argmax(vals, axis=1)
        best = vals[np.arange(zf.shape[0]), k]
        return best.reshape(lead), grid[k].reshape(lead + (self.dim,))

    def H0(self, t, p: np.ndarray) -> np.ndarray:
        """Strong-form Hamiltonian ``sup_a L0(t, a) + a.p`` (drift ``a``)."""
        val, _ = self._h0(t, p)
        return val

    def dH0(self, t, p: np.ndarray) -> np.ndarray:
        return self._h0(t, p)[1]

    def d2H0(self, t, p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        """``D2_zz H0`` as ``(..., d, d)``; exact for the quadratic clamp."""
        p = np.asarray(p, dtype=float)
        if self.quadratic_control:
            inside = ((p > self.a_lo) & (p < self.a_hi)).astype(float)
            return inside[..., None] * np.eye(self.dim)
        cols = []
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = eps
            cols.append((self.dH0(t, p + e) - self.dH0(t, p - e)) / (2 * eps))
        return np.stack(cols, axis=-1)

    def _h0(self, t, p):
        p = np.asarray(p, dtype=float)
        if self.quadratic_control:
            a = self.clamp(p)
            return self.L0(t, a) + np.sum(a * p, axis=-1), a
        grid = self.control_grid()
        pf = p.reshape(-1, self.dim)
        vals = self.L0(t, grid)[None, :] + pf @ grid.T
        k = np.argmax(vals, axis=1)
        return vals[np.arange(pf.shape[0]), k].reshape(p.shape[:-1]), grid[k].reshape(p.shape)


def hamiltonian(spec: CoefficientSpec, t: float, mu: EmpiricalMeasure | None, z, points: int | None = None):
    """``H(t, mu, z) = sup_a L(t, mu, a) + b1(t, mu, a).z`` with its argmax.

    Quadratic control costs use the coordinatewise clamp; otherwise a grid
    of ``points`` per axis is searched and ties go to the lexicographically
    smallest control.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s = CloudSummary.of_measure(mu) if mu is not None else None
    core, a = spec.hamiltonian_core(t, z, s, points)
    f_val = spec.F.of(mu) if mu is not None else 0.0
    return float(core + f_val), a


def eval_running_reward(spec: CoefficientSpec, t: float, mu: EmpiricalMeasure, a) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if not spec.in_control_set(a):
        raise SpecError(f"control {a} outside the control set")
    return float(spec.L0(t, a)) + spec.F.of(mu)


def eval_terminal_reward(spec: CoefficientSpec, mu: EmpiricalMeasure) -> float:
    return spec.g.of(mu)


# --- validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    decomposition_residual: float
    b1_sup: float
    b0_lipschitz: float
    b0_growth: float
    sigma0_condition: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_spec(spec: CoefficientSpec, n_samples: int = 64, seed: int = 0) -> ValidationReport:
    """Sample ``(t, x, mu, a)`` and check the structural assumptions.

    Raises :class:`SpecError` for a broken drift decomposition or a singular
    ``sigma0`` in drift-controlled mode; soft problems such as an exceeded
    ``b1`` bound are listed in ``violations``.
    """
    rng = np.random.default_rng(seed)
    d = spec.dim
    violations = []
    sig0 = np.atleast_2d(spec.sigma0)
    cond = float(np.linalg.cond(sig0)) if np.any(sig0) else np.inf
    if spec.drift_controlled and (not np.isfinite(cond) or cond > 1e12):
        raise SpecError("singular sigma0 in drift-controlled mode")

    t = rng.uniform(0, spec.horizon, n_samples)
    x = rng.normal(0, 2.0, (n_samples, 8, d))
    xp = x + rng.normal(0, 0.1, x.shape)
    s = CloudSummary.of(x)
    a = rng.uniform(spec.a_lo, spec.a_hi, (n_samples, d))

    b1 = np.stack([spec.control_drift(t[i], CloudSummary(s.mean[i], s.var[i]), a[i]) for i in range(n_samples)])
    b1_sup = float(np.max(np.abs(b1)))
    if b1_sup > spec.b1_bound * (1 + 1e-9):
        violations.append(f"b1 bound violated: sup|b1| = {b1_sup:.3g} > {spec.b1_bound:.3g}")

    resid = 0.0
    if spec.drift is not None:
        full = np.stack([spec.full_drift(t[i], x[i], CloudSummary(s.mean[i], s.var[i]), a[i]) for i in range(n_samples)])
        ref = np.stack([spec.drift(t[i], x[i], CloudSummary(s.mean[i], s.var[i]).expand(), a[i]) for i in range(n_samples)])
        resid = float(np.max(np.abs(full - ref)))
        if resid > 1e-9:
            raise SpecError(f"drift decomposition mismatch b != b0 + sigma0 b1 (residual {resid:.3g})")

    b0x = spec.b0(t[:, None, None], x, s.expand())
    b0xp = spec.b0(t[:, None, None], xp, s.expand())
    dx = np.linalg.norm(x - xp, axis=-1)
    lip = float(np.max(np.linalg.norm(b0x - b0xp, axis=-1) / np.maximum(dx, 1e-300)))
    growth = float(np.max(np.linalg.norm(b0x, axis=-1) / (1 + np.linalg.norm(x, axis=-1))))
    if not np.all(np.isfinite(b0x)):
        violations.append("non-finite b0")

    if spec.constant_vol:
        if callable(spec.sigma):
            violations.append("constant_vol spec with state-dependent sigma")
        if spec.control_matrix is None or not np.allclose(spec.control_matrix @ sig0, np.eye(d)):
            violations.append("constant_vol requires strong-form drift a (b1 = sigma0^{-1} a)")
    return ValidationReport(resid, b1_sup, lip, growth, cond, violations)


# --- linear-quadratic benchmark --------------------------------------------------


@dataclass(frozen=True)
class LqParams:
    """One-dimensional constant-volatility LQ model controlling the conditional mean.

    Rewards ``F(mu) = -c (m - theta)^2 - c_var Var(mu)`` and
    ``g(mu) = -gamma (m - theta)^2 - gamma_var Var(mu)``, control cost ``-a^2/2``,
    drift ``a`` in ``[-a_max, a_max]``.  ``cap`` bounds the quadratic mean
    penalties smoothly (``R^2 tanh(u / R^2)``); ``None`` disables it.
    """

    sigma: float = 1.0
    sigma0: float = 1.0
    a_max: float = 12.0
    c: float = 1.0
    gamma: float = 1.0
    theta: float = 0.0
    m0: float = 1.0
    v0: float = 0.25
    T: float = 1.0
    c_var: float = 0.0
    gamma_var: float = 0.0
    cap: float | None = 100.0

    def spec(self) -> CoefficientSpec:
        F = fn.mean_penalty(self.c, self.theta, cap=self.cap)
        g = fn.mean_penalty(self.gamma, self.theta, cap=self.cap)
        if self.c_var:
            F = F + fn.variance_penalty(self.c_var)
        if self.gamma_var:
            g = g + fn.variance_penalty(self.gamma_var)
        s0 = np.array([[self.sigma0]])

        def drift(t, x, s, a):
            return np.zeros_like(x) + np.asarray(a)[..., None, :]

        return CoefficientSpec(
            dim=1,
            a_lo=np.array([-self.a_max]),
            a_hi=np.array([self.a_max]),
            sigma0=s0,
            sigma=np.array([[self.sigma]]),
            control_matrix=np.array([[1.0 / self.sigma0]]),
            F=F,
            g=g,
            initial_law=GaussianLaw.of([self.m0], [[self.v0]]),
            horizon=self.T,
            a0=np.zeros(1),
            b1_bound=self.a_max / self.sigma0,
            drift=drift,
            constant_vol=True,
            quadratic_control=True,
            name="lq",
        )


@dataclass(frozen=True)
class RiccatiSolution:
    params: LqParams
    times: np.ndarray
    P: np.ndarray
    q: np.ndarray

    def at(self, t):
        return np.interp(t, self.times, self.P), np.interp(t, self.times, self.q)

    def value(self, t, m, var=None):
        """``U(t, nu)`` for ``nu`` with mean ``m`` (and variance ``var``, needed only
        when variance penalties are active)."""
        p = self.params
        P, q = self.at(t)
        u = -P * (np.asarray(m) - p.theta) ** 2 - q
        if p.c_var or p.gamma_var:
            if var is None:
                raise SpecError("variance penalties need the variance of nu")
            tau = p.T - np.asarray(t)
            u = u - p.gamma_var * (var + p.sigma**2 * tau) - p.c_var * (tau * var + 0.5 * p.sigma**2 * tau**2)
        return u

    def feedback(self, t, m):
        P, _ = self.at(t)
        a = -2.0 * P * (np.asarray(m) - self.params.theta)
        return np.clip(a, -self.params.a_max, self.params.a_max)

    def interior_ok(self, spread: float = 4.0) -> bool:
        """Unclamped optimum stays inside ``[-a_max, a_max]`` within ``spread`` std of the mean."""
        p = self.params
        reach = abs(p.m0 - p.theta) + spread * np.sqrt(p.sigma0**2 * p.T)
        return bool(2.0 * np.max(self.P) * reach <= p.a_max)


@functools.lru_cache(maxsize=64)
def solve_riccati(params: LqParams, n_steps: int = 10_000) -> RiccatiSolution:
    """RK4 backward integration of ``P' = 2P^2 - c, P(T) = gamma`` and ``q' = -sigma0^2 P``."""
    p = params
    h = p.T / n_steps

    def rhs(y):
        return np.array([2.0 * y[0] ** 2 - p.c, -(p.sigma0**2) * y[0]])

    ys = np.empty((n_steps + 1, 2))
    ys[n_steps] = [p.gamma, 0.0]
    y = ys[n_steps].copy()
    for i in range(n_steps, 0, -1):
        k1 = rhs(y)
        k2 = rhs(y - 0.5 * h * k1)
        k3 = rhs(y - 0.5 * h * k2)
        k4 = rhs(y - h * k3)
        y = y - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise SpecError("Riccati blow-up")
        ys[i - 1] = y
    assert np.all(ys[:, 0] >= -1e-12) or p.c < 0 or p.gamma < 0
    return RiccatiSolution(p, np.linspace(0.0, p.T, n_steps + 1), ys[:, 0], ys[:, 1])


def lq_value_oracle(params: LqParams, t: float, m: float, var: float | None = None) -> float:
    if t > params.T:
        raise SpecError("t beyond horizon")
    return float(solve_riccati(params).value(t, m, var))
