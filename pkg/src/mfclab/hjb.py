"""Constant-volatility reduction: lifted rewards, the HJB for U~ and the linear
PDEs for the measure derivatives.

When the drift is the control itself and the volatilities are constant, the
conditional law is ``nu0 * N(x, sigma sigma^T t)`` evaluated at the common state
``x``.  The mean-field value is then ``U(t, nu0) = U~(t, 0; nu0)`` where

    dU~/dt + H0(D_x U~) + 1/2 sigma0^2 D_xx U~ + F~(t, x) = 0,   U~(T) = G~,

with ``F~(t, x) = F(nu0 * N(x, sigma^2 t))`` and ``G~(x) = g(nu0 * N(x, sigma^2 T))``.
``D_m U`` and ``D2_mm U`` at ``x = 0`` come from linear parabolic equations
advected by ``D_z H0(D_x U~)``.  Everything here is one-dimensional.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .measure import EmpiricalMeasure, from_points, hermite_rule
from .model import CoefficientSpec, SpecError


class HjbError(RuntimeError):
    pass


@dataclass(frozen=True)
class HjbGrid:
    """``n_t`` time steps on ``[0, T]`` and ``n_x`` cells on ``[-R, R]``."""

    T: float
    n_t: int = 400
    n_x: int = 400
    R: float = 6.0

    def __post_init__(self):
        if self.n_x % 2:
            raise HjbError("n_x must be even so that x = 0 is a node")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.n_x + 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def h(self) -> float:
        return 2 * self.R / self.n_x

    @property
    def center(self) -> int:
        return self.n_x // 2

    def refined(self) -> "HjbGrid":
        return replace(self, n_t=2 * self.n_t, n_x=2 * self.n_x)


def default_grid(spec: CoefficientSpec, n_t: int = 400, n_x: int = 400, T: float | None = None) -> HjbGrid:
    """Radius six standard deviations of the common noise over the horizon."""
    T = spec.horizon if T is None else T
    s0 = float(np.sqrt(np.trace(spec.sigma0 @ spec.sigma0.T)))
    return HjbGrid(T, n_t, n_x, max(6.0 * s0 * np.sqrt(T), 1.0))


def _require_reducible(spec: CoefficientSpec):
    if spec.dim != 1:
        raise SpecError("the lifted HJB is implemented for d = 1")
    if not spec.constant_vol or callable(spec.sigma):
        raise SpecError("the lifted HJB needs a constant-volatility model with drift a")


# --- lifted rewards ---------------------------------------------------------------


def _feature_table(functional, pts: np.ndarray, kind: str) -> np.ndarray:
    """Stack ``l_j``, ``grad l_j`` or ``hess l_j`` (1-D) of every feature on ``pts``; shape ``pts.shape + (K,)``."""
    p = pts[..., None]
    cols = []
    for f in functional.features:
        if kind == "value":
            cols.append(f.value(p))
        elif kind == "grad":
            cols.append(f.grad(p)[..., 0])
        else:
            cols.append(f.hess(p)[..., 0, 0])
    if not cols:
        return np.zeros(pts.shape + (0,))
    return np.stack(cols, axis=-1)


@dataclass
class LiftedRewards:
    """``F~``, ``G~`` with ``D_x`` and the measure-derivative sources on an HJB grid."""

    grid: HjbGrid
    nu0: EmpiricalMeasure
    spec: CoefficientSpec
    order: int
    F: np.ndarray
    G: np.ndarray
    DxF: np.ndarray
    DxG: np.ndarray
    sF: np.ndarray
    sG: np.ndarray

    @property
    def sigma(self) -> float:
        return float(np.asarray(self.spec.sigma).reshape(()))

    def _gauss(self, t: float):
        z, w = hermite_rule(self.order, 1)
        return self.sigma * np.sqrt(t) * z[:, 0], w

    def _expect(self, functional, t, y, kind):
        """``E[grad l_j(x + sigma W_t + y)]`` (or hess) for all nodes ``x`` and probes ``y``: ``(n_x+1, P, K)``."""
        nodes, w = self._gauss(t)
        pts = self.grid.x[:, None, None] + np.asarray(y)[None, :, None] + nodes[None, None, :]
        return np.einsum("xpqk,q->xpk", _feature_table(functional, pts, kind), w)

    def _dm(self, functional, stats_at, times, y, kind):
        out = np.empty((len(times), self.grid.n_x + 1, len(y)))
        for i, t in enumerate(times):
            e = self._expect(functional, t, y, kind)
            out[i] = np.einsum("xk,xpk->xp", functional.dphi(stats_at(i)), e)
        return out

    def dmF(self, y, kind: str = "grad") -> np.ndarray:
        """``D_m F~(t, x; y)`` (``kind="hess"``: its ``y``-derivative), shape ``(n_t+1, n_x+1, P)``."""
        return self._dm(self.spec.F, lambda i: self.sF[i], self.grid.times, np.atleast_1d(y), kind)

    def dmG(self, y, kind: str = "grad") -> np.ndarray:
        return self._dm(self.spec.g, lambda i: self.sG, [self.grid.T], np.atleast_1d(y), kind)[0]

    def _dmm(self, functional, stats_at, times, y, z):
        out = np.empty((len(times), self.grid.n_x + 1, len(y)))
        for i, t in enumerate(times):
            ey = self._expect(functional, t, y, "grad")
            ez = self._expect(functional, t, z, "grad")
            out[i] = np.einsum("xjk,xpj,xpk->xp", functional.d2phi(stats_at(i)), ey, ez)
        return out

    def dmmF(self, y, z) -> np.ndarray:
        """``D2_mm F~(t, x; y_p, z_p)`` for paired probes."""
        return self._dmm(self.spec.F, lambda i: self.sF[i], self.grid.times, np.atleast_1d(y), np.atleast_1d(z))

    def dmmG(self, y, z) -> np.ndarray:
        return self._dmm(self.spec.g, lambda i: self.sG, [self.grid.T], np.atleast_1d(y), np.atleast_1d(z))[0]


def _lift_one(functional, nu0, x, sd, order):
    """Statistics, value and ``D_x`` of ``functional`` on ``nu0 * N(x, sd^2)`` for all ``x``."""
    z, w = hermite_rule(order, 1)
    pts = nu0.points[None, :, 0, None] + x[:, None, None] + sd * z[None, None, :, 0]
    wt = nu0.weights[:, None] * w[None, :]
    s = np.einsum("xaqk,aq->xk", _feature_table(functional, pts, "value"), wt)
    ds = np.einsum("xaqk,aq->xk", _feature_table(functional, pts, "grad"), wt)
    val = functional.phi(s)
    dx = np.sum(functional.dphi(s) * ds, axis=-1) if s.shape[-1] else np.zeros_like(val)
    return s, val, dx


def lift_rewards(spec: CoefficientSpec, nu0: EmpiricalMeasure, grid: HjbGrid, quadrature_order: int = 8) -> LiftedRewards:
    """Evaluate ``F`` and ``g`` on the Gaussian convolutions ``nu0 * N(x, sigma^2 t)``.

    ``D_x F~`` uses the exact identity ``D_x F~ = E[D_m F(., x + sigma W_t + xi)]``,
    which for these functionals is the chain rule through the statistics.
    """
    _require_reducible(spec)
    if nu0.dim != 1:
        raise SpecError("nu0 must be one-dimensional")
    sig = float(np.asarray(spec.sigma).reshape(()))
    x = grid.x
    sF, F, DxF = [], [], []
    for t in grid.times:
        s, v, d = _lift_one(spec.F, nu0, x, sig * np.sqrt(t), quadrature_order)
        sF.append(s), F.append(v), DxF.append(d)
    sG, G, DxG = _lift_one(spec.g, nu0, x, sig * np.sqrt(grid.T), quadrature_order)
    return LiftedRewards(grid, nu0, spec, quadrature_order, np.array(F), G, np.array(DxF), DxG, np.array(sF), sG)


# --- finite-difference machinery ----------------------------------------------------


@dataclass(frozen=True)
class Scheme:
    """``theta``-scheme for the diffusion; explicit Hamiltonian/advection.

    The default (Crank-Nicolson with a Heun corrector and central gradients) is
    second order.  ``gradient="upwind"`` uses the monotone Godunov flux, which
    is first order in ``h``.  For ``theta < 1`` the explicit
    part is corrected with a Heun (trapezoidal) step.  ``bc`` is ``"linear"``
    (zero second derivative) or ``"quadratic"`` (zero third derivative).
    """

    theta: float = 0.5
    gradient: str = "central"
    bc: str = "linear"
    cfl: str = "refine"


class _Operator:
    """Sparse implicit/explicit diffusion matrices with boundary closure rows."""

    def __init__(self, grid: HjbGrid, sigma0: float, dt: float, theta: float, bc: str):
        n = grid.n_x + 1
        k = 0.5 * sigma0**2 / grid.h**2
        main = np.full(n, -2.0 * k)
        off = np.full(n - 1, k)
        lap = sparse.diags([off, main, off], [-1, 0, 1], format="lil")
        lap[0, :] = 0
        lap[n - 1, :] = 0
        self.lap = lap.tocsr()
        impl = (sparse.identity(n, format="lil") - theta * dt * lap).tolil()
        if bc == "linear":
            closure = [1.0, -2.0, 1.0]
        elif bc == "quadratic":
            closure = [1.0, -3.0, 3.0, -1.0]
        else:
            raise HjbError(f"unknown boundary closure {bc!r}")
        impl[0, :] = 0
        impl[n - 1, :] = 0
        for j, c in enumerate(closure):
            impl[0, j] = c
            impl[n - 1, n - 1 - j] = c
        self.lu = splu(impl.tocsc())
        self.explicit = (sparse.identity(n) + (1.0 - theta) * dt * self.lap).tocsr()
        self.dt = dt
        self.theta = theta

    def step(self, U, rhs_extra):
        """Solve for the earlier time level given the later one and ``dt * N``."""
        rhs = self.explicit @ U + rhs_extra
        rhs[0] = 0.0
        rhs[-1] = 0.0
        return self.lu.solve(rhs)


def _grad(U, h):
    g = np.empty_like(U)
    g[1:-1] = (U[2:] - U[:-2]) / (2 * h)
    g[0] = (U[1] - U[0]) / h
    g[-1] = (U[-1] - U[-2]) / h
    return g


def _lap(U, h):
    out = np.zeros_like(U)
    out[1:-1] = (U[2:] - 2 * U[1:-1] + U[:-2]) / h**2
    out[0], out[-1] = out[1], out[-2]
    return out


def _z_star(spec, t):
    if spec.quadratic_control:
        return float(np.clip(0.0, spec.a_lo[0], spec.a_hi[0])) if spec.a_lo[0] <= 0 <= spec.a_hi[0] else (
            -np.inf if spec.a_lo[0] > 0 else np.inf
        )
    from scipy.optimize import minimize_scalar

    bound = 1e3
    res = minimize_scalar(lambda p: float(spec.H0(t, np.array([[p]]))[0]), bounds=(-bound, bound), method="bounded")
    return float(res.x)


def _hamiltonian_term(spec, t, U, h, gradient, z_star):
    """Discrete ``H0(D_x U)`` at every node (boundary values unused)."""
    H0 = lambda p: spec.H0(t, p[:, None])  # noqa: E731
    if gradient == "central":
        return H0(_grad(U, h))
    pm = np.empty_like(U)
    pp = np.empty_like(U)
    pm[1:] = (U[1:] - U[:-1]) / h
    pm[0] = pm[1]
    pp[:-1] = (U[1:] - U[:-1]) / h
    pp[-1] = pp[-2]
    return np.maximum(H0(np.maximum(pp, z_star)), H0(np.minimum(pm, z_star)))


def _advection_term(v, V, h, gradient):
    """``v . D_x V`` with upwinding for the backward equation; ``V`` may carry trailing probe axes."""
    vv = v.reshape(v.shape + (1,) * (V.ndim - 1))
    if gradient == "central":
        return vv * _grad(V, h)
    fwd = np.empty_like(V)
    bwd = np.empty_like(V)
    fwd[:-1] = (V[1:] - V[:-1]) / h
    fwd[-1] = fwd[-2]
    bwd[1:] = (V[1:] - V[:-1]) / h
    bwd[0] = bwd[1]
    return np.where(vv > 0, vv * fwd, vv * bwd)


def _substeps(spec, grid, scheme) -> int:
    amax = float(np.max(np.abs(np.concatenate([spec.a_lo, spec.a_hi]))))
    cfl = amax * grid.dt / grid.h
    if cfl <= 1.0 + 1e-9:
        return 1
    if scheme.cfl == "refine":
        return int(np.ceil(cfl - 1e-9))
    raise HjbError(f"CFL number {cfl:.3g} > 1 for the explicit Hamiltonian")


# --- fields ---------------------------------------------------------------------


@dataclass
class LiftedField:
    """Grid solution ``U~(t_i, x_j; nu0)`` with its ``x``-derivatives."""

    grid: HjbGrid
    lifted: LiftedRewards
    spec: CoefficientSpec
    scheme: Scheme
    U: np.ndarray
    Ux: np.ndarray
    Uxx: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def nu0(self) -> EmpiricalMeasure:
        return self.lifted.nu0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "U", "DxU", "DxxU"])
            for i, t in enumerate(self.grid.times):
                for j, x in enumerate(self.grid.x):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(self.U[i, j])),
                                repr(float(self.Ux[i, j])), repr(float(self.Uxx[i, j]))])


def solve_hjb(lifted: LiftedRewards, scheme: Scheme | None = None) -> LiftedField:
    """Backward semi-implicit solve of the lifted HJB on ``lifted.grid``.

    Diffusion is treated with the ``theta`` scheme, the Hamiltonian explicitly
    (monotone Godunov flux by default).  If the explicit part violates the CFL
    bound ``max|a| dt / h <= 1`` each step is split into sub-steps (or an error is
    raised with ``scheme.cfl="error"``).
    """
    scheme = scheme or Scheme()
    spec, grid = lifted.spec, lifted.grid
    sub = _substeps(spec, grid, scheme)
    dt = grid.dt / sub
    op = _Operator(grid, float(spec.sigma0[0, 0]), dt, scheme.theta, scheme.bc)
    zs = _z_star(spec, 0.0)
    times = grid.times
    U = np.empty((grid.n_t + 1, grid.n_x + 1))
    U[-1] = lifted.G
    cur = lifted.G.copy()
    for i in range(grid.n_t - 1, -1, -1):
        for k in range(sub, 0, -1):
            t1 = times[i] + k * dt
            t0 = t1 - dt
            F1 = _interp_time(lifted.F, grid, t1)
            N1 = _hamiltonian_term(spec, t1, cur, grid.h, scheme.gradient, zs) + F1
            nxt = op.step(cur, dt * N1)
            if scheme.theta < 1.0:
                F0 = _interp_time(lifted.F, grid, t0)
                N0 = _hamiltonian_term(spec, t0, nxt, grid.h, scheme.gradient, zs) + F0
                nxt = op.step(cur, 0.5 * dt * (N1 + N0))
            cur = nxt
        if not np.all(np.isfinite(cur)):
            raise HjbError("non-finite values in the HJB solve")
        U[i] = cur
    Ux = np.array([_grad(u, grid.h) for u in U])
    Uxx = np.array([_lap(u, grid.h) for u in U])
    return LiftedField(grid, lifted, spec, scheme, U, Ux, Uxx, {"substeps": sub})


def _interp_time(arr, grid, t):
    """Linear interpolation of a time-indexed array at ``t``."""
    s = t / grid.dt
    i = int(np.floor(s + 1e-9))
    if i >= grid.n_t:
        return arr[grid.n_t]
    w = s - i
    if w < 1e-9:
        return arr[i]
    return (1 - w) * arr[i] + w * arr[i + 1]


def value_at(field: LiftedField, t: float = 0.0) -> float:
    """``U(t, .) = U~(t, 0; nu0)`` interpolated in time."""
    if t < -1e-12 or t > field.grid.T + 1e-12:
        raise HjbError(f"t = {t} outside [0, {field.grid.T}]")
    return float(np.interp(t, field.grid.times, field.U[:, field.grid.center]))


def solve_value(spec: CoefficientSpec, nu0: EmpiricalMeasure, grid: HjbGrid | None = None,
                scheme: Scheme | None = None, quadrature_order: int = 8) -> LiftedField:
    grid = grid or default_grid(spec)
    return solve_hjb(lift_rewards(spec, nu0, grid, quadrature_order), scheme)


def boundary_influence(spec: CoefficientSpec, nu0: EmpiricalMeasure, grid: HjbGrid,
                       scheme: Scheme | None = None, shrink: float = 0.75) -> float:
    """Relative change of ``U~(., 0)`` when the radius shrinks by ``1 - shrink`` at fixed ``h``."""
    full = solve_value(spec, nu0, grid, scheme)
    n_small = int(round(grid.n_x * shrink / 2)) * 2
    small = solve_value(spec, nu0, replace(grid, R=grid.R * n_small / grid.n_x, n_x=n_small), scheme)
    a = full.U[:, grid.center]
    b = small.U[:, small.grid.center]
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))


# --- measure derivatives --------------------------------------------------------------


@dataclass
class DerivativeField:
    """Solutions of the linear equations, one column per probe: ``V[t, x, p]``."""

    base: LiftedField
    probes: np.ndarray
    V: np.ndarray
    kind: str

    def at_origin(self, i: int = 0) -> np.ndarray:
        return self.V[i, self.base.grid.center]

    def Vx(self) -> np.ndarray:
        return np.stack([_grad(v, self.base.grid.h) for v in self.V])


def _solve_linear(base: LiftedField, source: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """Backward solve of ``dV/dt + D_zH0(D_x U~) D_x V + 1/2 sigma0^2 D_xx V + source = 0``."""
    spec, grid, scheme = base.spec, base.grid, base.scheme
    sub = _substeps(spec, grid, scheme)
    dt = grid.dt / sub
    op = _Operator(grid, float(spec.sigma0[0, 0]), dt, scheme.theta, scheme.bc)
    times = grid.times
    V = np.empty(source.shape)
    V[-1] = terminal
    cur = terminal.copy()
    for i in range(grid.n_t - 1, -1, -1):
        for k in range(sub, 0, -1):
            t1 = times[i] + k * dt
            t0 = t1 - dt
            v1 = spec.dH0(t1, _interp_time(base.Ux, grid, t1)[:, None])[:, 0]
            N1 = _advection_term(v1, cur, grid.h, scheme.gradient) + _interp_time(source, grid, t1)
            nxt = op.step(cur, dt * N1)
            if scheme.theta < 1.0:
                v0 = spec.dH0(t0, _interp_time(base.Ux, grid, t0)[:, None])[:, 0]
                N0 = _advection_term(v0, nxt, grid.h, scheme.gradient) + _interp_time(source, grid, t0)
                nxt = op.step(cur, 0.5 * dt * (N1 + N0))
            cur = nxt
        V[i] = cur
    return V


def solve_dm_pde(base: LiftedField, y, derivative: str = "dm") -> DerivativeField:
    """``U~_1(t, x; y)`` whose value at ``x = 0`` is ``D_m U(t, nu0, y)``.

    ``derivative="dm_dy"`` solves the same equation with ``y``-differentiated
    data, giving ``d/dy D_m U``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    kind = {"dm": "grad", "dm_dy": "hess"}[derivative]
    src = base.lifted.dmF(y, kind)
    term = base.lifted.dmG(y, kind)
    return DerivativeField(base, y, _solve_linear(base, src, term), derivative)


def solve_dmm_pde(base: LiftedField, u1_y: DerivativeField, u1_z: DerivativeField) -> DerivativeField:
    """``U~_2(t, x; y_p, z_p)`` for paired probes; at ``x = 0`` this is ``D2_mm U(t, nu0, y_p, z_p)``."""
    if u1_y.V.shape != u1_z.V.shape:
        raise HjbError("probe sets must be paired")
    grid, spec = base.grid, base.spec
    d2 = np.stack([spec.d2H0(t, base.Ux[i][:, None])[:, 0, 0] for i, t in enumerate(grid.times)])
    src = d2[..., None] * u1_y.Vx() * u1_z.Vx() + base.lifted.dmmF(u1_y.probes, u1_z.probes)
    term = base.lifted.dmmG(u1_y.probes, u1_z.probes)
    pairs = np.stack([u1_y.probes, u1_z.probes], axis=-1)
    return DerivativeField(base, pairs, _solve_linear(base, src, term), "dmm")


# --- consistency checks ------------------------------------------------------------------


@dataclass(frozen=True)
class MeasureDerivativeProbe:
    """Move the atoms ``atoms`` (all atoms when ``None``) of ``nu0`` by ``eps * direction``."""

    direction: float = 1.0
    atoms: tuple[int, ...] | None = None
    eps: tuple[float, ...] = (0.2, 0.1, 0.05)

    def perturb(self, nu0: EmpiricalMeasure, eps: float) -> EmpiricalMeasure:
        pts = nu0.points.copy()
        idx = slice(None) if self.atoms is None else list(self.atoms)
        pts[idx] += eps * self.direction
        return from_points(pts, nu0.weights)


@dataclass
class DmReport:
    eps: np.ndarray
    differences: np.ndarray
    predicted_differences: np.ndarray
    quotients: np.ndarray
    richardson: np.ndarray
    predicted: float
    rel_err: np.ndarray

    @property
    def best_rel_err(self) -> float:
        return float(self.rel_err[-1]) if len(self.rel_err) else float("nan")


def dm_consistency_check(spec: CoefficientSpec, nu0: EmpiricalMeasure, probe: MeasureDerivativeProbe,
                         grid: HjbGrid | None = None, scheme: Scheme | None = None) -> DmReport:
    """Compare difference quotients of ``U(0, .)`` with the ``D_m U`` field.

    For a move of atoms ``y_k`` (weights ``w_k``) by ``eps * v`` the first-order
    change is ``eps * sum_k w_k D_m U(0, nu0, y_k) v``.  Forward quotients are
    Richardson-extrapolated over consecutive halvings of ``eps``.
    """
    grid = grid or default_grid(spec)
    base = solve_value(spec, nu0, grid, scheme)
    u0 = value_at(base)
    idx = np.arange(nu0.size) if probe.atoms is None else np.array(probe.atoms)
    dm = solve_dm_pde(base, nu0.points[idx, 0]).at_origin()
    predicted = float(np.sum(nu0.weights[idx] * dm) * probe.direction)
    eps = np.array(probe.eps, dtype=float)
    diffs = np.array([value_at(solve_value(spec, probe.perturb(nu0, e), grid, scheme)) - u0 if e else 0.0 for e in eps])
    with np.errstate(invalid="ignore", divide="ignore"):
        quot = np.where(eps != 0, diffs / np.where(eps != 0, eps, 1.0), 0.0)
    rich = []
    for k in range(len(eps) - 1):
        if eps[k] and np.isclose(eps[k + 1], eps[k] / 2):
            rich.append(2 * quot[k + 1] - quot[k])
    rich = np.array(rich)
    rel = np.abs(rich - predicted) / max(abs(predicted), 1e-300) if len(rich) else np.array([])
    return DmReport(eps, diffs, eps * predicted, quot, rich, predicted, rel)


@dataclass
class MasterResidual:
    residual: np.ndarray
    scale: np.ndarray
    terms: list[dict]

    @property
    def relative(self) -> np.ndarray:
        return np.abs(self.residual) / self.scale


def _derivatives_at(spec, nu, tau, grid_template, scheme):
    """Value, ``D_m U``, ``d/dy D_m U`` and ``D2_mm U`` at time 0 of a horizon-``tau`` problem."""
    g = replace(grid_template, T=tau, n_t=max(int(round(grid_template.n_t * tau / grid_template.T)), 2))
    base = solve_value(spec, nu, g, scheme)
    y = nu.points[:, 0]
    u1 = solve_dm_pde(base, y)
    u1y = solve_dm_pde(base, y, "dm_dy")
    K = len(y)
    yy, zz = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    a = DerivativeField(base, y[yy.ravel()], u1.V[..., yy.ravel()], "dm")
    b = DerivativeField(base, y[zz.ravel()], u1.V[..., zz.ravel()], "dm")
    u2 = solve_dmm_pde(base, a, b)
    return value_at(base), u1.at_origin(), u1y.at_origin(), u2.at_origin().reshape(K, K)


def master_residual(spec: CoefficientSpec, measures, t_list=(0.0, 0.25, 0.5), grid: HjbGrid | None = None,
                    scheme: Scheme | None = None, dtau: float | None = None) -> MasterResidual:
    """Plug the computed derivatives into the master equation.

    The model is time-homogeneous, so ``U(t, nu)`` is the time-0 value of the
    problem with horizon ``T - t``; ``d_t U`` is a central difference in the
    horizon.  Terms at ``(t, nu)``::

        d_t U + F(nu) + H0(<nu, D_m U>) + 1/2 (sigma^2 + sigma0^2) <nu, d_y D_m U>
              + 1/2 sigma0^2 <nu x nu, D2_mm U>
    """
    _require_reducible(spec)
    grid = grid or default_grid(spec)
    dtau = dtau or 10 * grid.dt
    sig2 = float(np.asarray(spec.sigma).reshape(())) ** 2
    s02 = float(spec.sigma0[0, 0]) ** 2
    res, scale, terms = [], [], []
    for nu in measures:
        w = nu.weights
        for t in t_list:
            tau = spec.horizon - t
            u, dm, dmy, dmm = _derivatives_at(spec, nu, tau, grid, scheme)
            up = _derivatives_at(spec, nu, tau + dtau, grid, scheme)[0]
            um = _derivatives_at(spec, nu, tau - dtau, grid, scheme)[0]
            parts = {
                "dt": -(up - um) / (2 * dtau),
                "F": spec.F.of(nu),
                "H0": float(spec.H0(t, np.array([[w @ dm]]))[0]),
                "dy": 0.5 * (sig2 + s02) * float(w @ dmy),
                "dmm": 0.5 * s02 * float(w @ dmm @ w),
            }
            terms.append({"t": t, **parts})
            res.append(sum(parts.values()))
            scale.append(max(abs(v) for v in parts.values()))
    return MasterResidual(np.array(res), np.array(scale), terms)


@dataclass
class NParticleResidual:
    N: int
    E_N: float
    bound: float
    dmm_diag: np.ndarray


def nparticle_residual(spec: CoefficientSpec, x, t: float = 0.0, grid: HjbGrid | None = None,
                       scheme: Scheme | None = None) -> NParticleResidual:
    """``E_N(t, x) = -1/(2 N^2) sum_k sigma^2 D2_mm U(t, m^x, x_k, x_k)`` with its bound
    ``sup_k |D2_mm U| sigma^2 / (2N)``."""
    _require_reducible(spec)
    x = np.asarray(x, dtype=float).reshape(-1)
    N = len(x)
    grid = grid or default_grid(spec)
    g = replace(grid, T=spec.horizon - t, n_t=max(int(round(grid.n_t * (spec.horizon - t) / grid.T)), 2))
    base = solve_value(spec, from_points(x[:, None]), g, scheme)
    u1 = solve_dm_pde(base, x)
    diag = solve_dmm_pde(base, u1, u1).at_origin()
    sig2 = float(np.asarray(spec.sigma).reshape(())) ** 2
    E = -sig2 * float(diag.sum()) / (2 * N**2)
    return NParticleResidual(N, E, float(np.max(np.abs(diag))) * sig2 / (2 * N), diag)
