"""Partially observed control through the reference-probability reformulation.

Under the reference measure the observation ``B`` is a Brownian motion, the
state follows ``dX = (b - sigma0 h) dt + sigma dW + sigma0 dB`` and the
likelihood ``dZ = h Z dB`` reweights the rewards.  The particle version keeps
``N`` weighted copies driven by one common ``B`` and applies one control to
all of them.  For linear-Gaussian models a Kalman/Riccati oracle gives the
exact value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import quad, solve_ivp

from . import functionals as fn
from .measure import GaussianLaw
from .model import CloudSummary, CoefficientSpec, SpecError
from .noise import NoiseBundle, TimeGrid
from .particle import EmpiricalFeedback, Policy, PolicyInput, SimulationError, _step_noise


@dataclass(frozen=True)
class PartialObsSpec:
    """Dynamics ``base`` plus the observation drift ``h(t, x)``.

    ``base.F`` and ``base.g`` must be expectations ``<mu, l>`` so that the
    per-particle running reward ``ell(t, x)`` and terminal reward
    ``terminal(x)`` are their integrands; the control cost is ``base.L0``.
    ``h=None`` means an uninformative observation (``h = 0``).
    """

    base: CoefficientSpec
    ell: Callable[[float, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    h: Callable[[float, np.ndarray], np.ndarray] | None = None
    lqg: "LqgParams | None" = None

    @property
    def grid_T(self) -> float:
        return self.base.horizon


def validate_partial_spec(pspec: PartialObsSpec, n_samples: int = 64, seed: int = 0, bound: float = 1e6) -> list[str]:
    """Finite-difference Lipschitz estimates of ``h`` and ``sigma0 h``; returns violations."""
    if pspec.h is None:
        return []
    rng = np.random.default_rng(seed)
    d = pspec.base.dim
    x = rng.normal(0.0, 3.0, (n_samples, 1, d))
    y = x + rng.normal(0.0, 1e-3, x.shape)
    t = float(rng.uniform(0, pspec.base.horizon))
    hx, hy = pspec.h(t, x), pspec.h(t, y)
    dist = np.linalg.norm(x - y, axis=-1)
    out = []
    for name, fx, fy in (("h", hx, hy), ("sigma0 h", hx @ pspec.base.sigma0.T, hy @ pspec.base.sigma0.T)):
        lip = float(np.max(np.linalg.norm(fx - fy, axis=-1) / dist))
        if not np.isfinite(lip) or lip > bound:
            out.append(f"{name} Lipschitz estimate {lip:.3g}")
    return out


@dataclass
class WeightedCloud:
    """Weighted particle system: ``final (M, N, d)`` and ``log_weights (M, N)`` at ``T``.

    ``running`` and ``terminal`` are the per-replication weighted rewards
    ``1/N sum_k (sum_i Z^k_i L_i^k dt)`` and ``1/N sum_k Z^k_T g(X^k_T)``.
    """

    grid: TimeGrid
    final: np.ndarray
    log_weights: np.ndarray
    B: np.ndarray
    controls: np.ndarray | None
    running: np.ndarray
    terminal: np.ndarray
    states: np.ndarray | None = None
    step_ratio_mean: np.ndarray | None = None
    max_abs_log_weight: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def reward(self) -> np.ndarray:
        return self.running + self.terminal


def _weighted_summary(x, logw):
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return CloudSummary.of(x, w)


def simulate_weighted_particles(
    pspec: PartialObsSpec, policy: Policy | None, N: int, grid: TimeGrid, noise, store_states: bool = False
) -> WeightedCloud:
    """Euler scheme for the weighted system with exact exponential weight increments.

    ``log Z_{i+1} = log Z_i + h(t_i, X_i) dB_i - 1/2 |h(t_i, X_i)|^2 dt``.  The
    policy observes the normalised-weight summary of the cloud (for ``h = None``
    the plain empirical summary, which makes the state recursion identical to
    :func:`mfclab.particle.simulate_controlled_system`).
    """
    spec = pspec.base
    if noise.n_particles != N:
        raise SimulationError(f"noise prepared for {noise.n_particles} particles, asked for {N}")
    n, dt = grid.n_steps, grid.dt
    x = noise.initial(spec.initial_law)
    M, _, d = x.shape
    logw = np.zeros((M, N))
    B = np.zeros((M, n + 1, d))
    x0 = np.zeros((M, d))
    controls = np.empty((M, n, d)) if policy is not None else None
    running = np.zeros(M)
    states = np.empty((M, N, n + 1, d)) if store_states else None
    ratio = np.empty(n)
    max_log = 0.0
    for i in range(n):
        t = i * dt
        if states is not None:
            states[:, :, i] = x
        own = CloudSummary.of(x) if pspec.h is None else _weighted_summary(x, logw)
        dB = noise.common(i)
        dW = noise.idiosyncratic(i)
        if policy is None:
            a = np.zeros((M, d))
            drift = spec.b0(t, x, own.expand())
        else:
            a = policy(PolicyInput(i, t, B[:, : i + 1], x0, own), spec)
            controls[:, i] = a
            if spec.drift_controlled:
                drift = spec.full_drift(t, x, own, a)
                x0 = x0 + (spec.control_drift(t, own, a) @ spec.sigma0.T) * dt
            else:
                drift = spec.drift(t, x, own.expand(), a)
        step_reward = pspec.ell(t, x) + spec.L0(t, a)[:, None]
        running += np.mean(np.exp(logw) * step_reward, axis=1) * dt
        if pspec.h is not None:
            hx = pspec.h(t, x)
            drift = drift - hx @ spec.sigma0.T
            inc = np.einsum("mnd,md->mn", hx, dB) - 0.5 * np.sum(hx * hx, axis=-1) * dt
            ratio[i] = float(np.mean(np.exp(inc)))
            logw = logw + inc
            max_log = max(max_log, float(np.max(np.abs(logw))))
        else:
            ratio[i] = 1.0
        x = x + drift * dt + _step_noise(spec, t, x, own.expand(), dW, dB)
        x0 = x0 + dB @ spec.sigma0.T
        B[:, i + 1] = B[:, i] + dB
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(logw))):
            raise SimulationError(f"non-finite state or weight at step {i + 1}")
    if states is not None:
        states[:, :, n] = x
    terminal = np.mean(np.exp(logw) * pspec.terminal(x), axis=1)
    return WeightedCloud(grid, x, logw, B, controls, running, terminal, states, ratio, max_log)


@dataclass(frozen=True)
class PartialEstimate:
    value: float
    stderr: float
    N: int
    M: int
    per_rep: np.ndarray = field(repr=False)
    mean_weight: np.ndarray = field(repr=False)
    raw_value: float = float("nan")


def estimate_partial_value(
    pspec: PartialObsSpec,
    policy: Policy | None,
    N: int,
    M: int,
    grid: TimeGrid,
    seed: int,
    chunk: int = 2048,
    control_variate: bool = True,
) -> PartialEstimate:
    """Monte Carlo mean and standard error of the weighted particle reward.

    Most of the variance comes from the likelihood of the observation path,
    shared by all particles.  With ``control_variate`` the per-replication
    particle-mean weight ``Zbar_T`` (whose expectation is exactly 1) is used as
    a regression control variate; ``raw_value`` keeps the plain average.
    """
    noise = NoiseBundle(seed, M, N, grid, pspec.base.dim)
    r, zbar = [], []
    for lo in range(0, M, chunk):
        sub = noise.subset(lo, min(lo + chunk, M))
        cloud = simulate_weighted_particles(pspec, policy, N, grid, sub)
        r.append(cloud.reward)
        zbar.append(cloud.weights.mean(axis=1))
    r, zbar = np.concatenate(r), np.concatenate(zbar)
    raw = float(r.mean())
    if M < 2:
        return PartialEstimate(raw, float("nan"), N, M, r, zbar, raw)
    est = r
    if control_variate and pspec.h is not None:
        dz = zbar - 1.0
        var = float(np.var(dz))
        if var > 0:
            beta = float(np.mean((r - r.mean()) * (dz - dz.mean()))) / var
            est = r - beta * dz
    return PartialEstimate(float(est.mean()), float(est.std(ddof=1) / np.sqrt(M)), N, M, r, zbar, raw)


# --- linear-Gaussian instance ----------------------------------------------------------


@dataclass(frozen=True)
class LqgParams:
    """``dX = (beta X + a) dt + sigma dW + sigma0 dW0``, observation drift ``h = eta x``.

    Rewards ``-c (x - theta)^2 - a^2/2`` and ``-gamma (x - theta)^2``;
    ``X_0 ~ N(m0, v0)``.
    """

    beta: float = 0.0
    sigma: float = 0.5
    sigma0: float = 0.5
    eta: float = 2.0
    c: float = 0.5
    gamma: float = 0.5
    theta: float = 0.0
    m0: float = 1.0
    v0: float = 0.25
    T: float = 1.0
    a_max: float = 12.0

    def pspec(self) -> PartialObsSpec:
        c, gam, th, beta, eta = self.c, self.gamma, self.theta, self.beta, self.eta
        x2 = fn.power_feature(2)
        x1 = fn.power_feature(1)

        def quad_reward(w):
            f = fn.expectation(x2, -w)
            if th:
                f = f + fn.expectation(x1, 2 * w * th) + fn.constant(-w * th * th)
            return f

        def b0(t, x, s):
            return beta * x

        base = CoefficientSpec(
            dim=1,
            a_lo=np.array([-self.a_max]),
            a_hi=np.array([self.a_max]),
            sigma0=np.array([[self.sigma0]]),
            sigma=np.array([[self.sigma]]),
            b0=b0,
            control_matrix=np.array([[1.0 / self.sigma0]]) if self.sigma0 else None,
            F=quad_reward(c),
            g=quad_reward(gam),
            initial_law=GaussianLaw.of([self.m0], [[self.v0]]),
            horizon=self.T,
            a0=np.zeros(1),
            drift=lambda t, x, s, a: beta * x + np.asarray(a)[..., None, :],
            quadratic_control=True,
            drift_controlled=bool(self.sigma0),
            name="partial-obs-lqg",
        )
        return PartialObsSpec(
            base=base,
            ell=lambda t, x: -c * (x[..., 0] - th) ** 2,
            terminal=lambda x: -gam * (x[..., 0] - th) ** 2,
            h=(lambda t, x: eta * x) if eta else None,
            lqg=self,
        )


@dataclass(frozen=True)
class LqgSolution:
    """Kalman variance ``Sigma`` (forward), control Riccati ``P, s`` (backward) and the value."""

    params: LqgParams
    value: float
    P: Callable[[float], float]
    s: Callable[[float], float]
    Sigma: Callable[[float], float]
    gain: Callable[[float], float]

    def feedback(self, t: float, mhat):
        """Certainty-equivalence control ``-2 P(t) mhat + 2 s(t)`` clamped to ``A``."""
        a = -2.0 * self.P(t) * np.asarray(mhat) + 2.0 * self.s(t)
        return np.clip(a, -self.params.a_max, self.params.a_max)

    def policy(self) -> EmpiricalFeedback:
        return EmpiricalFeedback(lambda t, summ: self.feedback(t, summ.mean))


def _kalman(p: LqgParams):
    """Forward filter variance with correlated signal/observation noise, gain ``K = Sigma eta + sigma0``."""

    def rhs(t, y):
        K = y[0] * p.eta + p.sigma0
        return [2 * p.beta * y[0] + p.sigma**2 + p.sigma0**2 - K * K]

    def jac(t, y):
        return [[2 * p.beta - 2 * p.eta * (y[0] * p.eta + p.sigma0)]]

    sol = solve_ivp(rhs, (0.0, p.T), [p.v0], method="Radau", jac=jac, rtol=1e-10, atol=1e-14, dense_output=True)
    if not sol.success:
        raise SpecError(f"filter Riccati failed: {sol.message}")
    return sol.sol


def _control(p: LqgParams):
    def rhs(t, y):
        P, s = y
        return [2 * P * P - 2 * p.beta * P - p.c, 2 * P * s - p.beta * s - p.c * p.theta]

    sol = solve_ivp(rhs, (p.T, 0.0), [p.gamma, p.gamma * p.theta], method="RK45", rtol=1e-11, atol=1e-13,
                    dense_output=True)
    if not sol.success:
        raise SpecError(f"control Riccati failed: {sol.message}")
    return sol.sol


@lru_cache(maxsize=64)
def lqg_oracle(params: LqgParams) -> LqgSolution:
    """Separation-principle value of the linear-Gaussian partially observed problem.

    With ``mhat`` the filtered mean (innovation gain ``K``) the value is
    ``-P(0) m0^2 + 2 s(0) m0 - q(0) - c int Sigma - gamma Sigma_T`` where
    ``q(0) = gamma theta^2 + int (K^2 P - 2 s^2 + c theta^2) dt``.
    """
    p = params
    if p.c < 0 or p.gamma < 0:
        raise SpecError("the LQG oracle needs c, gamma >= 0")
    sig = _kalman(p)
    ctl = _control(p)
    S = lambda t: float(sig(t)[0])  # noqa: E731
    P = lambda t: float(ctl(t)[0])  # noqa: E731
    s = lambda t: float(ctl(t)[1])  # noqa: E731
    K = lambda t: S(t) * p.eta + p.sigma0  # noqa: E731
    brk = _breakpoints(p)
    q0 = p.gamma * p.theta**2 + quad(lambda t: K(t) ** 2 * P(t) - 2 * s(t) ** 2 + p.c * p.theta**2, 0.0, p.T,
                                     points=brk, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    int_S = quad(S, 0.0, p.T, points=brk, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    value = -P(0.0) * p.m0**2 + 2 * s(0.0) * p.m0 - q0 - p.c * int_S - p.gamma * S(p.T)
    return LqgSolution(p, float(value), P, s, S, lambda t: 2.0 * P(t))


def _breakpoints(p: LqgParams):
    """Resolve the initial filter transient, whose time scale is ``1 / (eta * sqrt(...))``."""
    if not p.eta:
        return None
    tau = 1.0 / (p.eta * max(np.sqrt(p.sigma**2 + p.sigma0**2), p.eta * p.v0, 1e-12))
    pts = [tau * k for k in (0.5, 1, 2, 5, 10, 30) if tau * k < p.T]
    return pts or None


def full_observation_value(params: LqgParams) -> float:
    """Fully observed LQ value ``E[V(0, X_0)]`` for state noise ``sigma^2 + sigma0^2``."""
    p = params
    ctl = _control(p)
    P = lambda t: float(ctl(t)[0])  # noqa: E731
    s = lambda t: float(ctl(t)[1])  # noqa: E731
    noise = p.sigma**2 + p.sigma0**2
    q0 = p.gamma * p.theta**2 + quad(lambda t: noise * P(t) - 2 * s(t) ** 2 + p.c * p.theta**2, 0.0, p.T,
                                     epsabs=1e-13, epsrel=1e-11)[0]
    return float(-P(0.0) * (p.m0**2 + p.v0) + 2 * s(0.0) * p.m0 - q0)


# --- parametric search -----------------------------------------------------------------


def linear_filter_policy(gain: float, offset: float = 0.0) -> EmpiricalFeedback:
    """``a = offset - gain * mhat`` with ``mhat`` the weighted particle mean."""
    g, o = float(gain), float(offset)
    return EmpiricalFeedback(lambda t, summ: o - g * summ.mean)


@dataclass(frozen=True)
class PolicySearchResult:
    params: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray
    best_index: int

    @property
    def best_params(self):
        return self.params[self.best_index]

    @property
    def best_value(self) -> float:
        return float(self.values[self.best_index])


def optimize_parametric_policy(
    pspec: PartialObsSpec,
    family: Callable[..., Policy],
    param_grid,
    N: int,
    M: int,
    grid: TimeGrid,
    seed: int,
) -> PolicySearchResult:
    """Grid search with common random numbers (one noise bundle for every candidate).

    Ties (equal estimated values) go to the parameter of smallest Euclidean norm.
    """
    params = np.asarray(param_grid, dtype=float)
    if params.ndim == 1:
        params = params[:, None]
    vals, ses = [], []
    for row in params:
        est = estimate_partial_value(pspec, family(*row), N, M, grid, seed)
        vals.append(est.value)
        ses.append(est.stderr)
    vals = np.array(vals)
    norms = np.linalg.norm(params, axis=1)
    order = np.lexsort((norms, -vals))
    return PolicySearchResult(params, vals, np.array(ses), int(order[0]))
