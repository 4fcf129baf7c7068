"""Least-squares conditional expectations on polynomial features of cloud statistics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class RegressionError(RuntimeError):
    pass


def monomial_exponents(k: int, degree: int) -> np.ndarray:
    """All exponent vectors of total degree ``<= degree`` in ``k`` variables, graded order."""
    out = [e for deg in range(degree + 1) for e in itertools.product(range(deg + 1), repeat=k) if sum(e) == deg]
    return np.array(out, dtype=int).reshape(-1, k)


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis in the named statistics.

    ``stats`` picks columns from ``"mean"``, ``"var"`` (coordinatewise, of the
    cloud) and ``"B"`` (the common noise).  Columns are standardised per fit and
    constant ones are dropped, so a time step where every path shares the same
    statistics reduces to a sample mean.
    """

    stats: tuple[str, ...] = ("mean", "var")
    degree: int = 3
    ridge: float = 1e-8
    max_condition: float = 1e12
    min_samples_per_feature: int = 10

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        unknown = set(self.stats) - {"mean", "var", "B"}
        if unknown:
            raise ValueError(f"unknown statistics {sorted(unknown)}")

    def design(self, mean: np.ndarray, var: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
        cols = {"mean": mean, "var": var, "B": B}
        parts = []
        for name in self.stats:
            if cols[name] is None:
                raise RegressionError(f"statistic {name!r} not available")
            parts.append(np.asarray(cols[name]).reshape(len(mean), -1))
        return np.concatenate(parts, axis=1)

    def n_features(self, k: int) -> int:
        return len(monomial_exponents(k, self.degree))

    def fit(self, S: np.ndarray, y: np.ndarray) -> "LinearFit":
        """Ridge least squares of ``y`` (``(M,)`` or ``(M, q)``) on the basis of ``S`` (``(M, k)``)."""
        M, k = S.shape
        if self.n_features(k) * self.min_samples_per_feature > M:
            raise RegressionError(f"{self.n_features(k)} features for {M} samples")
        center = S.mean(axis=0)
        spread = S.std(axis=0)
        scale_ref = np.maximum(np.abs(center), 1.0)
        live = spread > 1e-10 * scale_ref
        scale = np.where(live, spread, 1.0)
        exps = monomial_exponents(k, self.degree)
        exps = exps[np.all((exps == 0) | live, axis=1)]
        X = _monomials((S - center) / scale, exps)
        G = X.T @ X / M
        cond = float(np.linalg.cond(G)) if G.shape[0] > 1 else 1.0
        if self.ridge == 0 and not cond < self.max_condition:
            raise RegressionError(f"rank-deficient regression (condition number {cond:.3g})")
        lam = self.ridge * np.trace(G) / G.shape[0]
        rhs = X.T @ y / M
        # the intercept is not penalised, so constants are reproduced exactly
        pen = np.where(exps.sum(axis=1) == 0, 0.0, lam)
        coef = np.linalg.solve(G + np.diag(pen), rhs)
        return LinearFit(center, scale, exps, coef, cond)


def _monomials(Z: np.ndarray, exps: np.ndarray) -> np.ndarray:
    out = np.ones((Z.shape[0], len(exps)))
    for j, e in enumerate(exps):
        for c, p in enumerate(e):
            if p:
                out[:, j] *= Z[:, c] ** p
    return out


@dataclass(frozen=True)
class LinearFit:
    center: np.ndarray
    scale: np.ndarray
    exps: np.ndarray
    coef: np.ndarray
    condition: float

    def predict(self, S: np.ndarray) -> np.ndarray:
        return _monomials((S - self.center) / self.scale, self.exps) @ self.coef

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "exponents": self.exps.tolist(),
            "coef": np.asarray(self.coef).tolist(),
            "condition": self.condition,
        }
