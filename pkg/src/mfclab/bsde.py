"""Regression Monte Carlo for the value BSDEs of the mean-field and N-particle problems.

Both solvers simulate the *uncontrolled* dynamics (drift ``b0``) and run the
explicit backward scheme

    Z_i = E[(Y_{i+1} - E[Y_{i+1} | G_i]) dB_i | G_i] / dt
    Y_i = E[Y_{i+1} - Z_i.dB_i | G_i] + H(t_i, mu_i, Z_i) dt,      Y_n = g(mu_T),

with ``H(t, mu, z) = sup_a L(t, mu, a) + b1(t, mu, a).z``.  The conditional
expectations are regressions on polynomial features of the cloud statistics.
Besides the regression value ``Y0`` each path carries the telescoped estimator

    zeta = g(mu_T) + sum_i H_i dt - sum_i Z_i.dB_i  [- sum_i c_i.dS_i]

whose mean equals ``Y0`` up to regression error and whose sample deviation
gives the reported standard error.  ``dS_i`` is the particle-summed
idiosyncratic increment; its coefficient ``c_i`` is an aggregated projection
that serves as a control variate and as the cross-term diagnostic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .measure import EmpiricalMeasure, stratified_points, wasserstein2_sorted
from .model import CloudSummary, CoefficientSpec, SpecError
from .noise import ROLE_INNER_W, NoiseBundle, TimeGrid, stream
from .particle import Policy, PolicyInput, _run
from .regression import LinearFit, RegressionBasis

PARTICLE_CAP = 4096


@dataclass
class BsdeSolution:
    """Backward-induction output.

    ``Y`` (``(M, n + 1)``) and ``Z`` (``(M, n, d)``) are the realised values on the
    simulated paths; ``y_fits[i]`` / ``z_fits[i]`` the regressions at step ``i``.
    """

    Y0: float
    Y0_stderr: float
    zeta: np.ndarray
    grid: TimeGrid
    basis: RegressionBasis
    y_fits: list[LinearFit]
    z_fits: list[LinearFit]
    Y: np.ndarray
    Z: np.ndarray
    stats: list[np.ndarray]
    terminal: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    final_cloud: np.ndarray | None = None

    @property
    def Y0_pathwise(self) -> float:
        return float(self.zeta.mean())

    def Z_at(self, i: int, S: np.ndarray) -> np.ndarray:
        return self.z_fits[i].predict(S)

    def to_json(self, path=None) -> str:
        doc = {
            "Y0": self.Y0,
            "Y0_stderr": self.Y0_stderr,
            "Y0_pathwise": self.Y0_pathwise,
            "T": self.grid.T,
            "n_steps": self.grid.n_steps,
            "basis": {"stats": list(self.basis.stats), "degree": self.basis.degree, "ridge": self.basis.ridge},
            "y_coefficients": [f.to_dict() for f in self.y_fits],
            "z_coefficients": [f.to_dict() for f in self.z_fits],
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def diagnostics_csv(self, path) -> None:
        """Per-step residuals and condition numbers; ``path`` may be a file object."""
        d = self.diagnostics
        lines = ["step,residual_mean,residual_stderr,y_condition,z_condition\n"]
        for i in range(self.grid.n_steps):
            lines.append(
                f"{i},{float(d['residual_mean'][i])!r},{float(d['residual_stderr'][i])!r},"
                f"{float(self.y_fits[i].condition)!r},{float(self.z_fits[i].condition)!r}\n"
            )
        if hasattr(path, "write"):
            path.writelines(lines)
        else:
            with open(path, "w") as fh:
                fh.writelines(lines)


def _check_spec(spec: CoefficientSpec):
    if not spec.drift_controlled:
        raise SpecError("the value BSDE needs a drift-controlled model")
    cond = np.linalg.cond(np.atleast_2d(spec.sigma0))
    if not np.isfinite(cond) or cond > 1e12:
        raise SpecError("singular sigma0")


def _backward(spec, grid, basis, traj, cv: np.ndarray | None, n_cv: int) -> BsdeSolution:
    n, dt = grid.n_steps, grid.dt
    dB = np.diff(traj.B, axis=1)
    M = dB.shape[0]
    stats = [basis.design(traj.mean[:, i], traj.var[:, i], traj.B[:, i]) for i in range(n + 1)]
    Y = np.empty((M, n + 1))
    Z = np.empty((M, n, spec.dim))
    H = np.empty((M, n))
    Y[:, n] = traj.terminal_g
    y_fits, z_fits = [None] * n, [None] * n
    res_mean, res_se = np.empty(n), np.empty(n)
    cv_coef = np.zeros((M, n, spec.dim)) if cv is not None else None
    for i in range(n - 1, -1, -1):
        S = stats[i]
        resid = Y[:, i + 1] - basis.fit(S, Y[:, i + 1]).predict(S)
        zfit = basis.fit(S, resid[:, None] * dB[:, i] / dt)
        Z[:, i] = zfit.predict(S)
        # subtracting the fitted martingale increment leaves E[. | G_i] unchanged
        # and removes most of the sampling noise from the conditional mean
        mart = np.sum(Z[:, i] * dB[:, i], axis=-1)
        if cv is not None:
            cfit = basis.fit(S, resid[:, None] * cv[:, i] / (n_cv * dt))
            cv_coef[:, i] = cfit.predict(S)
            mart = mart + np.sum(cv_coef[:, i] * cv[:, i], axis=-1)
        yfit = basis.fit(S, Y[:, i + 1] - mart)
        cond = yfit.predict(S)
        s = CloudSummary(traj.mean[:, i], traj.var[:, i])
        core, _ = spec.hamiltonian_core(i * dt, Z[:, i], s)
        H[:, i] = core + traj.running_F[:, i]
        Y[:, i] = cond + H[:, i] * dt
        r = cond - Y[:, i + 1] + mart
        res_mean[i], res_se[i] = r.mean(), r.std() / np.sqrt(M)
        y_fits[i], z_fits[i] = yfit, zfit
    zeta = traj.terminal_g + H.sum(axis=1) * dt - np.einsum("mid,mid->m", Z, dB)
    diag = {"residual_mean": res_mean, "residual_stderr": res_se}
    if cv is not None:
        zeta = zeta - np.einsum("mid,mid->m", cv_coef, cv)
        diag["cross_term_norm"] = float(np.mean(np.sum(n_cv * cv_coef**2, axis=(1, 2)) * dt))
    diag["terminal_error"] = float(np.max(np.abs(Y[:, n] - traj.terminal_g)))
    Y0 = float(Y[:, 0].mean())
    se = float(zeta.std() / np.sqrt(M)) if M > 1 else float("inf")
    return BsdeSolution(Y0, se, zeta, grid, basis, y_fits, z_fits, Y, Z, stats, traj.terminal_g, diag)


@dataclass(frozen=True)
class _SharedInnerNoise:
    """Inner-cloud noise shared by all outer paths.

    Initial positions are a stratified ``N_inner``-point representation of the
    law and each idiosyncratic increment is centred and rescaled to the exact
    step variance, so low-order moments of the conditional law are reproduced
    without sampling error.
    """

    outer: NoiseBundle
    xi: np.ndarray
    moment_match: bool

    @property
    def n_reps(self):
        return self.outer.n_reps

    @property
    def n_particles(self):
        return self.xi.shape[0]

    def subset(self, lo, hi):
        return _SharedInnerNoise(self.outer.subset(lo, hi), self.xi, self.moment_match)

    def common(self, i):
        return self.outer.common(i)

    def idiosyncratic(self, i):
        n, d = self.xi.shape
        dt = self.outer.grid.dt
        w = stream(self.outer._wseed, ROLE_INNER_W, i).standard_normal((n, d))
        if self.moment_match and n > 1:
            w = w - w.mean(axis=0)
            w = w / np.sqrt((w**2).mean(axis=0))
        return np.broadcast_to(w * np.sqrt(dt), (self.n_reps, n, d))

    def initial(self, law):
        return np.broadcast_to(self.xi, (self.n_reps,) + self.xi.shape).copy()


def solve_mf_bsde(
    spec: CoefficientSpec,
    N_inner: int,
    M_outer: int,
    grid: TimeGrid,
    basis: RegressionBasis | None = None,
    seed: int = 0,
    inner_noise: str = "shared",
    moment_match: bool = True,
    initial=None,
    chunk: int | None = 1000,
) -> BsdeSolution:
    """Mean-field value BSDE; ``Y0`` estimates the value from the initial law.

    Along each of ``M_outer`` common-noise paths an inner cloud of ``N_inner``
    particles stands in for the conditional law ``mu_t``.  With
    ``inner_noise="shared"`` the inner idiosyncratic noise is one stratified,
    moment-matched draw reused on every outer path; ``"independent"`` draws it
    per path from the same streams as :func:`solve_particle_bsde`.
    """
    _check_spec(spec)
    basis = basis or RegressionBasis()
    law = spec.initial_law if initial is None else initial
    outer = NoiseBundle(seed, M_outer, N_inner, grid, spec.dim)
    if inner_noise == "shared":
        xi = stratified_points(law, N_inner) if moment_match else outer.subset(0, 1).initial(law)[0]
        noise = _SharedInnerNoise(outer, xi, moment_match)
        cv = None
    elif inner_noise == "independent":
        noise, cv = outer, "dW_sum"
    else:
        raise ValueError(f"unknown inner_noise mode {inner_noise!r}")
    traj = _simulate_uncontrolled(spec, noise, grid, chunk, law)
    sol = _backward(spec, grid, basis, traj, traj.extras["dW_sum"] if cv else None, N_inner)
    sol.final_cloud = traj.final
    return sol


def _simulate_uncontrolled(spec, noise, grid, chunk, law):
    from .particle import _chunked

    return _chunked(lambda nz: _run(spec, nz, grid, None, initial=law), noise, chunk)


def solve_particle_bsde(
    spec: CoefficientSpec,
    N: int,
    M_outer: int,
    grid: TimeGrid,
    basis: RegressionBasis | None = None,
    seed: int = 0,
    initial=None,
    chunk: int | None = 1000,
    cap: int = PARTICLE_CAP,
) -> BsdeSolution:
    """N-particle value BSDE; ``Y0`` estimates the centralised N-agent value.

    ``initial`` may be an ``(N, d)`` array of quenched starting points.
    """
    _check_spec(spec)
    if N > cap:
        raise SpecError(f"N = {N} exceeds the particle cap {cap}")
    basis = basis or RegressionBasis()
    law = spec.initial_law if initial is None else initial
    noise = NoiseBundle(seed, M_outer, N, grid, spec.dim)
    traj = _simulate_uncontrolled(spec, noise, grid, chunk, law)
    sol = _backward(spec, grid, basis, traj, traj.extras["dW_sum"], N)
    sol.final_cloud = traj.final
    return sol


@dataclass(frozen=True)
class BsdeFeedback(Policy):
    """Control read off the fitted ``Z`` regression: ``argmax_a L0 + b1(a).Z``."""

    spec: CoefficientSpec
    solution: BsdeSolution
    kind = "empirical"

    def raw(self, inp: PolicyInput) -> np.ndarray:
        sol = self.solution
        i = min(int(round(inp.t / sol.grid.dt)), sol.grid.n_steps - 1)
        S = sol.basis.design(inp.summary.mean, inp.summary.var, inp.B_hist[:, -1])
        Z = sol.Z_at(i, S)
        _, a = self.spec.hamiltonian_core(inp.t, Z, inp.summary)
        return a


def extract_control(spec: CoefficientSpec, solution: BsdeSolution) -> BsdeFeedback:
    return BsdeFeedback(spec, solution)


# --- stability of the N-particle BSDE ---------------------------------------------


def w2_squared_batch(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared W2 between equal-weight 1-D clouds row by row; sizes may differ."""
    x = np.sort(x, axis=-1)
    y = np.sort(y, axis=-1)
    n, k = x.shape[-1], y.shape[-1]
    if n == k:
        return wasserstein2_sorted(x, y)
    u = np.unique(np.concatenate([np.arange(n + 1) / n, np.arange(k + 1) / k]))
    mid = 0.5 * (u[1:] + u[:-1])
    ix = np.minimum((mid * n).astype(int), n - 1)
    iy = np.minimum((mid * k).astype(int), k - 1)
    return np.sum(np.diff(u) * (x[..., ix] - y[..., iy]) ** 2, axis=-1)


@dataclass
class StabilityRow:
    N: int
    y_gap: float
    z_gap: float
    w2: float
    y_gap_se: float
    w2_se: float

    @property
    def ratio(self) -> float:
        if self.exact or self.w2 == 0:
            return float("nan")
        return self.y_gap / self.w2

    @property
    def exact(self) -> bool:
        # y_gap is a mean of squares, so 1e-20 is round-off (1e-10 pathwise)
        return self.w2 == 0 and self.y_gap < 1e-20


def stability_gap(
    spec: CoefficientSpec,
    N_list,
    grid: TimeGrid,
    M_outer: int = 4000,
    N_inner: int = 1024,
    seed: int = 0,
    basis: RegressionBasis | None = None,
    reference: BsdeSolution | None = None,
) -> list[StabilityRow]:
    """Coupled comparison of the N-particle and mean-field BSDE solutions.

    Both solvers share the common-noise paths, so ``Y^N_t - Y_t`` is evaluated
    pathwise; ``mu_T`` is represented by the mean-field solver's inner cloud.
    Returns ``E sup_t |Y^N - Y|^2``, ``E sum |Z^N - Z|^2 dt`` and
    ``E W2^2(mu^N_T, mu_T)`` per ``N``.
    """
    if spec.dim != 1:
        raise SpecError("stability_gap evaluates W2 in one dimension")
    basis = basis or RegressionBasis()
    ref = reference or solve_mf_bsde(spec, N_inner, M_outer, grid, basis, seed)
    rows = []
    for N in N_list:
        sol = solve_particle_bsde(spec, N, M_outer, grid, basis, seed)
        dy = np.max((sol.Y - ref.Y) ** 2, axis=1)
        dz = np.sum((sol.Z - ref.Z) ** 2, axis=(1, 2)) * grid.dt
        w2 = w2_squared_batch(sol.final_cloud[..., 0], ref.final_cloud[..., 0])
        M = len(dy)
        rows.append(
            StabilityRow(
                int(N), float(dy.mean()), float(dz.mean()), float(w2.mean()),
                float(dy.std() / np.sqrt(M)), float(w2.std() / np.sqrt(M)),
            )
        )
    return rows
