"""Euler-Maruyama simulation of N-particle systems with common noise.

All simulators are batched over replications: particle states have shape
``(M, N, d)`` and the common noise ``(M, d)``.  The planner's control is one
vector per replication, applied identically to every particle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measure import EmpiricalMeasure, from_points
from .model import CloudSummary, CoefficientSpec
from .noise import ROLE_REF_W, ROLE_REF_XI, NoiseBundle, TimeGrid


class SimulationError(RuntimeError):
    pass


# --- policies -------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyInput:
    """What a policy may observe at step ``i``.

    ``B_hist`` is the common-noise path up to ``t_i`` (``(M, i + 1, d)``),
    ``x0`` the common state ``int a ds + sigma0 B_t`` and ``summary`` the
    mean/variance of the current particle cloud.
    """

    i: int
    t: float
    B_hist: np.ndarray
    x0: np.ndarray
    summary: CloudSummary


class Policy:
    kind = "policy"

    def raw(self, inp: PolicyInput) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, inp: PolicyInput, spec: CoefficientSpec) -> np.ndarray:
        a = np.broadcast_to(self.raw(inp), inp.x0.shape)
        return spec.clamp(a)


@dataclass(frozen=True)
class OpenLoopPiecewise(Policy):
    """``a_i = fn(t_i, B_{t_0..t_i})``: adapted to the common noise only."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    kind = "open-loop"

    def raw(self, inp):
        return self.fn(inp.t, inp.B_hist)


@dataclass(frozen=True)
class CommonStateFeedback(Policy):
    """``a = fn(t, X0_t)`` for the constant-volatility reduction."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    kind = "common-state"

    def raw(self, inp):
        return self.fn(inp.t, inp.x0)


@dataclass(frozen=True)
class EmpiricalFeedback(Policy):
    """``a = fn(t, summary of mu^N_t)``: a symmetric statistic of the cloud."""

    fn: Callable[[float, CloudSummary], np.ndarray]
    kind = "empirical"

    def raw(self, inp):
        return self.fn(inp.t, inp.summary)


def constant_policy(a) -> OpenLoopPiecewise:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return OpenLoopPiecewise(lambda t, B: a)


# --- trajectories ---------------------------------------------------------------


@dataclass
class ParticleTrajectory:
    """Output of one batched simulation.

    ``states`` (``(M, N, n + 1, d)``) is kept only when requested; per-step
    summaries, controls, the common path and reward ingredients are always
    recorded.
    """

    grid: TimeGrid
    final: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    B: np.ndarray
    controls: np.ndarray | None
    running_F: np.ndarray
    terminal_g: np.ndarray
    states: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_reps(self) -> int:
        return self.final.shape[0]

    @property
    def n_particles(self) -> int:
        return self.final.shape[1]

    def measure(self, i: int, rep: int = 0) -> EmpiricalMeasure:
        """``mu^N_{t_i}`` of replication ``rep`` (needs stored states except at ``i = n``)."""
        if i == self.grid.n_steps or i == -1:
            return from_points(self.final[rep])
        if self.states is None:
            raise SimulationError("states were not stored")
        return from_points(self.states[rep, :, i])

    def to_csv(self, path) -> None:
        if self.states is None:
            raise SimulationError("states were not stored")
        M, N, n1, d = self.states.shape
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replication", "particle", "time"] + [f"x{j}" for j in range(d)])
            for r in range(M):
                for k in range(N):
                    for i in range(n1):
                        w.writerow([r, k, repr(float(times[i]))] + [repr(float(v)) for v in self.states[r, k, i]])


def _concat(parts: list[ParticleTrajectory]) -> ParticleTrajectory:
    if len(parts) == 1:
        return parts[0]

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=0)

    extras = {k: np.concatenate([p.extras[k] for p in parts], axis=0) for k in parts[0].extras}
    return ParticleTrajectory(
        parts[0].grid, cat("final"), cat("mean"), cat("var"), cat("B"), cat("controls"),
        cat("running_F"), cat("terminal_g"), cat("states"), extras,
    )


def _step_noise(spec, t, x, s, dW, dB):
    sig = spec.sigma_at(t, x, s)
    if sig is None:
        idio = 0.0
    elif np.ndim(sig) == 2:
        idio = dW @ sig.T
    else:
        idio = np.einsum("...ij,...j->...i", sig, dW)
    return idio + (dB @ spec.sigma0.T)[..., None, :]


def _run(
    spec: CoefficientSpec,
    noise,
    grid: TimeGrid,
    policy: Policy | None,
    flow: tuple[np.ndarray, np.ndarray] | None = None,
    store_states: bool = False,
    initial=None,
) -> ParticleTrajectory:
    """Core Euler loop.  ``flow`` replaces the cloud's own summary in ``b0`` and
    ``sigma`` by given ``(mean, var)`` arrays of shape ``(M, n + 1, d)``."""
    n, dt = grid.n_steps, grid.dt
    law = spec.initial_law if initial is None else initial
    x = noise.initial(law)
    M, N, d = x.shape
    if d != spec.dim:
        raise SimulationError(f"noise dimension {d} does not match spec dimension {spec.dim}")
    means = np.empty((M, n + 1, d))
    vars_ = np.empty((M, n + 1, d))
    B = np.zeros((M, n + 1, d))
    controls = np.empty((M, n, d)) if policy is not None else None
    running_F = np.empty((M, n))
    states = np.empty((M, N, n + 1, d)) if store_states else None
    x0 = np.zeros((M, d))
    dW_sum = np.empty((M, n, d))
    for i in range(n):
        t = i * dt
        own = CloudSummary.of(x)
        means[:, i], vars_[:, i] = own.mean, own.var
        if states is not None:
            states[:, :, i] = x
        s = own if flow is None else CloudSummary(flow[0][:, i], flow[1][:, i])
        running_F[:, i] = spec.F(x)
        dB = noise.common(i)
        dW = noise.idiosyncratic(i)
        dW_sum[:, i] = dW.sum(axis=1)
        if policy is None:
            drift = spec.b0(t, x, s.expand())
        else:
            a = policy(PolicyInput(i, t, B[:, : i + 1], x0, own), spec)
            if not np.all((a >= spec.a_lo - 1e-12) & (a <= spec.a_hi + 1e-12)):
                raise SimulationError("policy output outside the control set")
            controls[:, i] = a
            drift = spec.full_drift(t, x, s, a)
            x0 = x0 + (spec.control_drift(t, s, a) @ spec.sigma0.T) * dt
        x = x + drift * dt + _step_noise(spec, t, x, s.expand(), dW, dB)
        x0 = x0 + dB @ spec.sigma0.T
        B[:, i + 1] = B[:, i] + dB
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {i + 1}")
    last = CloudSummary.of(x)
    means[:, n], vars_[:, n] = last.mean, last.var
    if states is not None:
        states[:, :, n] = x
    return ParticleTrajectory(grid, x, means, vars_, B, controls, running_F, spec.g(x), states, {"dW_sum": dW_sum})


def _chunked(run, noise, chunk: int | None):
    if chunk is None or not hasattr(noise, "subset") or noise.n_reps <= chunk:
        return run(noise)
    parts = [run(noise.subset(lo, min(lo + chunk, noise.n_reps))) for lo in range(0, noise.n_reps, chunk)]
    return _concat(parts)


def _check(noise, N):
    if noise.n_particles != N:
        raise SimulationError(f"noise prepared for {noise.n_particles} particles, asked for {N}")
    if N < 1:
        raise SimulationError("need N >= 1")


def simulate_controlled_system(
    spec: CoefficientSpec,
    policy: Policy,
    N: int,
    grid: TimeGrid,
    noise,
    store_states: bool = False,
    chunk: int | None = None,
    initial=None,
) -> ParticleTrajectory:
    """Centralised N-particle system: every particle receives the same control.

    ``X^k_{i+1} = X^k_i + b(t_i, X^k_i, mu^N_i, a_i) dt + sigma dW^k_i + sigma0 dB_i``
    with ``mu^N_i`` taken before the step.  ``initial`` overrides
    ``spec.initial_law`` (an ``(N, d)`` array gives quenched initial positions).
    """
    _check(noise, N)
    return _chunked(lambda nz: _run(spec, nz, grid, policy, None, store_states, initial), noise, chunk)


def simulate_mkv_cloud(
    spec: CoefficientSpec, N: int, grid: TimeGrid, noise, store_states: bool = False, chunk: int | None = None, initial=None
) -> ParticleTrajectory:
    """Uncontrolled cloud (drift ``b0`` only) approximating the conditional law given ``B``."""
    _check(noise, N)
    return _chunked(lambda nz: _run(spec, nz, grid, None, None, store_states, initial), noise, chunk)


def reference_flow(spec: CoefficientSpec, noise: NoiseBundle, grid: TimeGrid, n_ref: int):
    """Mean/variance flow of an independent auxiliary cloud sharing the common noise."""
    traj = _reference_run(spec, noise, grid, n_ref)
    return traj.mean, traj.var


def _reference_run(spec, noise, grid, n_ref):
    return _run(spec, _RoleShift(noise.with_particles(n_ref)), grid, None)


@dataclass(frozen=True)
class _RoleShift:
    """Reads the reference-cloud roles of a bundle as if they were the primary ones."""

    base: NoiseBundle

    @property
    def n_particles(self):
        return self.base.n_particles

    def common(self, i):
        return self.base.common(i)

    def idiosyncratic(self, i):
        return self.base.idiosyncratic(i, role=ROLE_REF_W)

    def initial(self, law):
        return self.base.initial(law, role=ROLE_REF_XI)


def simulate_coupled_clouds(
    spec: CoefficientSpec, N: int, grid: TimeGrid, noise: NoiseBundle, ref_factor: int = 16
) -> tuple[ParticleTrajectory, ParticleTrajectory]:
    """Interacting cloud and its decoupled copies driven by identical noise.

    The decoupled particles feel a reference measure flow computed from an
    auxiliary cloud of ``ref_factor * N`` particles instead of their own
    empirical measure.  The auxiliary cloud's terminal states are kept in
    ``decoupled.extras["ref_final"]``.
    """
    _check(noise, N)
    interacting = _run(spec, noise, grid, None)
    ref = _reference_run(spec, noise, grid, ref_factor * N)
    flow = (ref.mean, ref.var)
    decoupled = _run(spec, noise, grid, None, flow=flow)
    decoupled.extras["ref_mean"], decoupled.extras["ref_var"] = flow
    decoupled.extras["ref_final"] = ref.final
    return interacting, decoupled


def estimate_reward(spec: CoefficientSpec, traj: ParticleTrajectory, policy: Policy | None = None) -> np.ndarray:
    """Per-replication reward ``sum_i L(t_i, mu^N_i, a_i) dt + g(mu^N_T)`` (left endpoint)."""
    dt = traj.grid.dt
    total = traj.running_F.sum(axis=1) * dt + traj.terminal_g
    if traj.controls is not None:
        times = traj.grid.times[:-1]
        L0 = np.stack([spec.L0(t, traj.controls[:, i]) for i, t in enumerate(times)], axis=1)
        total = total + L0.sum(axis=1) * dt
    return total
