"""Time grids and reproducible Brownian increments.

Every random stream is a Philox generator keyed by ``(seed, role, step,
block)`` through :class:`numpy.random.SeedSequence`, where ``block`` groups
``REP_BLOCK`` consecutive replications.  A draw therefore never depends on the
order in which other streams were consumed, nor on how a caller chunks the
replications.  Within one stream values are laid out replication-major, then
particle, then coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .measure import EmpiricalMeasure, GaussianLaw

ROLE_XI = 1
ROLE_W = 2
ROLE_B = 3
ROLE_REF_XI = 4
ROLE_REF_W = 5
ROLE_INNER_XI = 6
ROLE_INNER_W = 7
ROLE_QUENCHED = 8

REP_BLOCK = 256


def stream(seed: int, role: int, step: int = 0, block: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(role), int(step), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def blocked_draw(seed: int, role: int, step: int, start: int, stop: int, draw) -> np.ndarray:
    """Rows ``start:stop`` of a replication-indexed stream; ``draw(gen, rows)`` makes one block."""
    out = []
    for b in range(start // REP_BLOCK, (stop - 1) // REP_BLOCK + 1):
        lo, hi = b * REP_BLOCK, (b + 1) * REP_BLOCK
        rows = min(hi, stop) - lo
        chunk = draw(stream(seed, role, step, b), rows)
        out.append(chunk[max(start - lo, 0):])
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, self.n_steps + 1)
        t[-1] = self.T
        return t

    def t(self, i: int) -> float:
        return i * self.dt


def sample_initial(law, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if isinstance(law, (GaussianLaw, EmpiricalMeasure)):
        return law.sample(rng, shape)
    raise TypeError(f"cannot sample from {type(law).__name__}")


@dataclass(frozen=True)
class NoiseBundle:
    """Lazy noise for ``n_reps`` replications of an ``n_particles`` system.

    ``w_seed`` (default ``seed``) keys the idiosyncratic and initial streams so
    the common noise can be held fixed while the rest is redrawn.
    """

    seed: int
    n_reps: int
    n_particles: int
    grid: TimeGrid
    dim: int = 1
    w_seed: int | None = None
    rep_offset: int = 0

    @property
    def _wseed(self) -> int:
        return self.seed if self.w_seed is None else self.w_seed

    def _rows(self, seed, role, step, draw):
        return blocked_draw(seed, role, step, self.rep_offset, self.rep_offset + self.n_reps, draw)

    def subset(self, start: int, stop: int) -> "NoiseBundle":
        """The same streams restricted to replications ``start:stop``."""
        return replace(self, rep_offset=self.rep_offset + start, n_reps=stop - start)

    def with_particles(self, n: int) -> "NoiseBundle":
        return replace(self, n_particles=n)

    def common(self, i: int) -> np.ndarray:
        """``dB_i`` with shape ``(M, d)``."""
        d, h = self.dim, np.sqrt(self.grid.dt)
        return self._rows(self.seed, ROLE_B, i, lambda g, r: g.standard_normal((r, d)) * h)

    def idiosyncratic(self, i: int, role: int = ROLE_W, n: int | None = None) -> np.ndarray:
        """``dW^k_i`` with shape ``(M, N, d)``."""
        n = self.n_particles if n is None else n
        d, h = self.dim, np.sqrt(self.grid.dt)
        return self._rows(self._wseed, role, i, lambda g, r: g.standard_normal((r, n, d)) * h)

    def initial(self, law, role: int = ROLE_XI, n: int | None = None) -> np.ndarray:
        """``xi_k`` with shape ``(M, N, d)``; a fixed ``(N, d)`` array is broadcast (quenched)."""
        n = self.n_particles if n is None else n
        if isinstance(law, np.ndarray):
            law = np.asarray(law, dtype=float).reshape(n, self.dim)
            return np.broadcast_to(law, (self.n_reps, n, self.dim)).copy()
        return self._rows(self._wseed, role, 0, lambda g, r: sample_initial(law, g, (r, n)))

    def common_path(self) -> np.ndarray:
        """Cumulative ``B_{t_i}``, shape ``(M, n_steps + 1, d)``."""
        inc = np.stack([self.common(i) for i in range(self.grid.n_steps)], axis=1)
        out = np.zeros((self.n_reps, self.grid.n_steps + 1, self.dim))
        np.cumsum(inc, axis=1, out=out[:, 1:])
        return out

    def materialize(self, law) -> "ExplicitNoise":
        n = self.grid.n_steps
        dB = np.stack([self.common(i) for i in range(n)], axis=1)
        dW = np.stack([self.idiosyncratic(i) for i in range(n)], axis=2)
        return ExplicitNoise(self.grid, self.initial(law), dB, dW)


@dataclass(frozen=True)
class ExplicitNoise:
    """Fully materialised noise: ``xi (M, N, d)``, ``dB (M, n, d)``, ``dW (M, N, n, d)``."""

    grid: TimeGrid
    xi: np.ndarray
    dB: np.ndarray
    dW: np.ndarray

    @property
    def n_reps(self) -> int:
        return self.xi.shape[0]

    @property
    def n_particles(self) -> int:
        return self.xi.shape[1]

    @property
    def dim(self) -> int:
        return self.xi.shape[2]

    def common(self, i: int) -> np.ndarray:
        return self.dB[:, i]

    def idiosyncratic(self, i: int, role: int = ROLE_W, n: int | None = None) -> np.ndarray:
        if role != ROLE_W:
            raise ValueError("explicit noise carries a single idiosyncratic stream")
        return self.dW[:, :, i]

    def initial(self, law=None, role: int = ROLE_XI, n: int | None = None) -> np.ndarray:
        return self.xi.copy()

    def common_path(self) -> np.ndarray:
        out = np.zeros((self.n_reps, self.grid.n_steps + 1, self.dim))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    def permuted(self, perm: np.ndarray) -> "ExplicitNoise":
        """Relabel particles: particle ``k`` receives the streams of ``perm[k]``."""
        return ExplicitNoise(self.grid, self.xi[:, perm], self.dB, self.dW[:, perm])
