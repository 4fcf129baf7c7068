"""Probability measures as weighted point clouds, Gaussian convolutions and
Wasserstein distances.

Every measure in the package is a finite weighted cloud of atoms.  Continuous
laws enter either through sampling or through Gauss-Hermite quadrature
(:func:`gaussian_measure`, :func:`convolve_gaussian`).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtr, ndtri

ASSIGNMENT_CAP = 512


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms ``points[k]`` with masses ``weights[k]`` (summing to 1)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c

    def integrate(self, phi) -> float:
        """``<mu, phi>`` for a vectorised ``phi: (K, d) -> (K,)``."""
        return float(self.weights @ np.asarray(phi(self.points), dtype=float))

    def shifted(self, shift) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points + np.asarray(shift, dtype=float), self.weights.copy())

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        idx = rng.choice(self.size, size=shape, p=self.weights)
        return self.points[idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)] + ["weight"])
            for p, q in zip(self.points, self.weights):
                w.writerow([repr(float(v)) for v in p] + [repr(float(q))])

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return from_points(data[:, :-1], data[:, -1])


def from_points(points, weights=None) -> EmpiricalMeasure:
    """Build a measure from an ``(N, d)`` (or ``(N,)``) array of atoms.

    Weights default to ``1/N`` exactly and are otherwise normalised.
    Zero-weight atoms are kept.
    """
    pts = np.array(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise MeasureError("empty cloud")
    if not np.all(np.isfinite(pts)):
        raise MeasureError("non-finite coordinate in cloud")
    n = pts.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.array(weights, dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise MeasureError("weights and points disagree in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise MeasureError("all-zero weights")
        w = w / total
    return EmpiricalMeasure(pts, w)


def moments(mu: EmpiricalMeasure, order: int) -> list[np.ndarray]:
    """Raw mixed moments up to ``order``.

    Entry ``j`` is the order ``j+1`` moment tensor ``E[x^{(x)(j+1)}]``; entry 0 is the
    mean vector, entry 1 the ``d x d`` second moment matrix, and so on.
    """
    if order < 1:
        raise MeasureError("moment order must be >= 1")
    out = []
    term = mu.points
    for j in range(order):
        if j:
            term = np.einsum("k...,ki->k...i", term, mu.points)
        out.append(np.tensordot(mu.weights, term, axes=(0, 0)))
    return out


# --- Wasserstein distances -------------------------------------------------


def _quantile_pieces(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Merged quantile coupling: interval lengths and paired atoms."""
    ia = np.argsort(mu.points[:, 0], kind="stable")
    ib = np.argsort(nu.points[:, 0], kind="stable")
    xa, wa = mu.points[ia, 0], mu.weights[ia]
    xb, wb = nu.points[ib, 0], nu.weights[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    lengths = np.diff(np.concatenate(([0.0], breaks)))
    mids = breaks - 0.5 * lengths
    ka = np.minimum(np.searchsorted(ca, mids), len(xa) - 1)
    kb = np.minimum(np.searchsorted(cb, mids), len(xb) - 1)
    return lengths, xa[ka], xb[kb]


def wasserstein_p_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> float:
    """Exact ``W_p`` between two weighted clouds on the real line."""
    if mu.dim != 1 or nu.dim != 1:
        raise MeasureError("wasserstein_p_1d needs one-dimensional measures")
    if p < 1:
        raise MeasureError("p must be >= 1")
    lengths, a, b = _quantile_pieces(mu, nu)
    cost = float(lengths @ np.abs(a - b) ** p)
    return cost ** (1.0 / p)


def wasserstein2_sorted(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared ``W_2`` between equal-size, equal-weight 1-D clouds.

    Vectorised over leading axes: ``x, y`` have shape ``(..., N)``.
    """
    return np.mean((np.sort(x, axis=-1) - np.sort(y, axis=-1)) ** 2, axis=-1)


def wasserstein2_assignment(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = ASSIGNMENT_CAP) -> float:
    """Exact ``W_2`` for equal-size uniform clouds in any dimension."""
    n = mu.size
    if nu.size != n or mu.dim != nu.dim:
        raise MeasureError("assignment needs clouds of equal size and dimension")
    if not (np.allclose(mu.weights, 1.0 / n, rtol=0, atol=1e-14) and np.allclose(nu.weights, 1.0 / n, rtol=0, atol=1e-14)):
        raise MeasureError("assignment needs equal weights 1/N")
    if n > cap:
        raise MeasureError(f"cloud size {n} exceeds assignment cap {cap}")
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def wasserstein2_bruteforce(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Minimum over all N! pairings; only for tiny clouds."""
    n = mu.size
    if n > 8:
        raise MeasureError("brute force limited to N <= 8")
    best = np.inf
    for perm in itertools.permutations(range(n)):
        d = mu.points - nu.points[list(perm)]
        best = min(best, float(np.mean(np.sum(d * d, axis=1))))
    return float(np.sqrt(best))


def wasserstein2_to_gaussian_1d(x: np.ndarray, mean, var) -> np.ndarray:
    """Squared ``W_2`` between uniform clouds ``x`` (shape ``(..., N)``) and
    ``N(mean, var)`` with ``mean, var`` broadcasting against ``x[..., 0]``.

    Uses the monotone coupling with closed-form integrals of the Gaussian
    quantile function over each block ``[(i-1)/N, i/N]``.
    """
    x = np.sort(np.asarray(x, dtype=float), axis=-1)
    n = x.shape[-1]
    u = np.linspace(0.0, 1.0, n + 1)
    z = ndtri(u)
    fin = np.isfinite(z)
    zf = np.where(fin, z, 0.0)
    phi = np.where(fin, np.exp(-0.5 * zf**2) / np.sqrt(2 * np.pi), 0.0)
    zphi = zf * phi
    # per block: int q du and int q^2 du for the standard quantile q = ndtri
    i1 = phi[:-1] - phi[1:]
    i2 = (ndtr(z[1:]) - zphi[1:]) - (ndtr(z[:-1]) - zphi[:-1])
    mean = np.asarray(mean, dtype=float)[..., None]
    sd = np.sqrt(np.asarray(var, dtype=float))[..., None]
    # int (x_i - m - s q)^2 = (x_i-m)^2/N - 2 (x_i-m) s i1 + s^2 i2
    c = x - mean
    return np.sum(c * c / n - 2.0 * c * sd * i1 + sd * sd * i2, axis=-1)


# --- Gaussian quadrature and convolutions ----------------------------------


def hermite_rule(order: int, dim: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes ``(order**dim, dim)`` and weights for N(0, I)."""
    if order < 1:
        raise MeasureError("quadrature order must be positive")
    z, w = hermegauss(order)
    w = w / w.sum()
    if dim == 1:
        return z[:, None], w
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return nodes, weights


def _psd_root(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise MeasureError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.min(vals) < -1e-12 * scale:
        raise MeasureError("covariance is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gaussian_measure(mean, cov, order: int = 8) -> EmpiricalMeasure:
    """Quadrature cloud for ``N(mean, cov)``; exact on polynomials of degree ``<= 2*order-1``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    root = _psd_root(cov)
    nodes, w = hermite_rule(order, mean.size)
    return EmpiricalMeasure(mean + nodes @ root.T, w)


@dataclass(frozen=True)
class GaussianConvolution:
    """``base * N(shift, covariance)`` represented by tensorised quadrature."""

    base: EmpiricalMeasure
    shift: np.ndarray
    covariance: np.ndarray
    quadrature_order: int

    def atoms(self) -> EmpiricalMeasure:
        nodes, w = hermite_rule(self.quadrature_order, self.base.dim)
        root = _psd_root(self.covariance)
        offs = nodes @ root.T
        pts = self.base.points[:, None, :] + self.shift + offs[None, :, :]
        wts = self.base.weights[:, None] * w[None, :]
        return EmpiricalMeasure(pts.reshape(-1, self.base.dim), wts.reshape(-1))

    def integrate(self, phi) -> float:
        return self.atoms().integrate(phi)


def convolve_gaussian(nu0: EmpiricalMeasure, shift, covariance, order: int = 8) -> GaussianConvolution:
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (nu0.dim,)).copy()
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    _psd_root(cov)
    return GaussianConvolution(nu0, shift, cov, order)


@dataclass(frozen=True)
class GaussianLaw:
    """``N(mean, cov)`` initial law; sampled by draws or by a quantile stratification."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, mean, cov) -> "GaussianLaw":
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        c = np.atleast_2d(np.asarray(cov, dtype=float))
        _psd_root(c)
        return cls(m, c)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        z = rng.standard_normal(shape + (self.dim,))
        return self.mean + z @ _psd_root(self.cov).T

    def quadrature(self, order: int = 8) -> EmpiricalMeasure:
        return gaussian_measure(self.mean, self.cov, order)

    def stratified(self, n: int) -> np.ndarray:
        """``n`` points with exactly the law's mean and covariance (d = 1: quantile grid)."""
        if self.dim == 1:
            z = ndtri((np.arange(n) + 0.5) / n)[:, None]
        else:
            z = np.random.default_rng(0).standard_normal((n, self.dim))
        if n > 1:
            z = z - z.mean(axis=0)
            cov = np.atleast_2d(np.cov(z, rowvar=False, bias=True))
            z = z @ np.linalg.inv(np.linalg.cholesky(cov)).T
        else:
            z = np.zeros_like(z)
        return self.mean + z @ _psd_root(self.cov).T


def stratified_points(law, n: int) -> np.ndarray:
    """Deterministic ``n``-point representation of an initial law.

    Gaussian laws use moment-matched quantiles; empirical measures are tiled
    (exact when ``n`` is a multiple of the atom count) or systematically
    resampled.
    """
    if isinstance(law, GaussianLaw):
        return law.stratified(n)
    if n % law.size == 0 and np.allclose(law.weights, 1.0 / law.size):
        return np.tile(law.points, (n // law.size, 1))
    u = (np.arange(n) + 0.5) / n
    idx = np.minimum(np.searchsorted(np.cumsum(law.weights), u), law.size - 1)
    return law.points[idx]
