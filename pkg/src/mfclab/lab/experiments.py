"""Convergence studies: each experiment turns a config into tables, statistics and checks."""

from __future__ import annotations

import csv
import io
import json
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from ..bsde import solve_mf_bsde, solve_particle_bsde, stability_gap, w2_squared_batch
from ..hjb import boundary_influence, default_grid, solve_value, value_at
from ..measure import from_points
from ..model import CloudSummary, CoefficientSpec, LqParams, SpecError, lq_value_oracle, solve_riccati
from ..noise import ROLE_QUENCHED, NoiseBundle, TimeGrid, stream
from ..partialobs import (
    LqgParams,
    estimate_partial_value,
    linear_filter_policy,
    lqg_oracle,
    optimize_parametric_policy,
    simulate_weighted_particles,
)
from ..particle import EmpiricalFeedback, constant_policy, estimate_reward, simulate_controlled_system, simulate_coupled_clouds
from ..presets import build_preset, preset_params
from .config import ExperimentConfig

SCHEMA_VERSION = 1


class ExperimentError(RuntimeError):
    pass


# --- rate tables --------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci: tuple[float, float]
    r2: float
    n_points: int


def fit_loglog_slope(N, stat, stderr=None, min_points: int = 4) -> SlopeFit:
    """Weighted least squares of ``log stat`` on ``log N`` with a t-based 95% interval.

    The weight of a point is the inverse variance of ``log stat``, i.e.
    ``(stat / stderr)^2``; without standard errors all weights are equal.
    """
    x = np.log(np.asarray(N, dtype=float))
    s = np.asarray(stat, dtype=float)
    if len(s) < min_points:
        raise ExperimentError(f"need at least {min_points} points for a slope fit, got {len(s)}")
    if np.any(~(s > 0)):
        raise ExperimentError("log-log fit needs positive statistics")
    y = np.log(s)
    if stderr is None or np.any(~(np.asarray(stderr, dtype=float) > 0)):
        w = np.ones_like(y)
    else:
        w = (s / np.asarray(stderr, dtype=float)) ** 2
    w = w / w.sum()
    xm, ym = w @ x, w @ y
    sxx = w @ (x - xm) ** 2
    slope = float(w @ ((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - intercept - slope * x
    ss_res = float(w @ resid**2)
    ss_tot = float(w @ (y - ym) ** 2)
    n = len(y)
    dof = n - 2
    sigma2 = ss_res * n / dof if dof > 0 else 0.0
    se = np.sqrt(sigma2 / (n * sxx)) if dof > 0 else float("inf")
    half = float(sps.t.ppf(0.975, dof) * se) if dof > 0 else float("inf")
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-28 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    return SlopeFit(slope, intercept, (slope - half, slope + half), float(r2), n)


@dataclass
class RateTable:
    """Rows ``(N, stat, stderr, reps)`` with an optional log-log fit."""

    label: str
    N: list[int]
    stat: list[float]
    stderr: list[float]
    reps: list[int]
    fit: SlopeFit | None = None
    exact_zero: bool = False

    def fit_slope(self, min_points: int = 4, max_rel_stderr: float | None = None) -> SlopeFit | None:
        if all(s == 0 for s in self.stat):
            self.exact_zero = True
            self.fit = None
            return None
        if max_rel_stderr is not None:
            for n, s, e in zip(self.N, self.stat, self.stderr):
                if not e < max_rel_stderr * abs(s):
                    raise ExperimentError(f"under-powered cell N={n}: stderr {e:.3g} vs statistic {s:.3g}")
        self.fit = fit_loglog_slope(self.N, self.stat, self.stderr, min_points)
        return self.fit

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "stat", "stderr", "reps"])
        for row in zip(self.N, self.stat, self.stderr, self.reps):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), int(row[3])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_dict(self) -> dict:
        out = {"label": self.label, "rows": [list(r) for r in zip(self.N, self.stat, self.stderr, self.reps)],
               "exact_zero": self.exact_zero}
        if self.fit is not None:
            out["fit"] = asdict(self.fit)
        return out


@dataclass
class ExperimentResult:
    kind: str
    table: RateTable | None
    statistics: dict
    checks: dict
    extra_csv: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def report(self) -> str:
        lines = [f"experiment: {self.kind}"]
        if self.table is not None:
            lines.append(f"{'N':>6} {'stat':>14} {'stderr':>12} {'reps':>7}")
            for n, s, e, r in zip(self.table.N, self.table.stat, self.table.stderr, self.table.reps):
                lines.append(f"{n:>6d} {s:>14.6g} {e:>12.4g} {r:>7d}")
            if self.table.fit is not None:
                f = self.table.fit
                lines.append(f"slope {f.slope:.4f}  95% CI [{f.ci[0]:.4f}, {f.ci[1]:.4f}]  R^2 {f.r2:.4f}")
            elif self.table.exact_zero:
                lines.append("statistic identically zero; fit skipped")
        for k, v in self.statistics.items():
            if isinstance(v, (int, float)):
                lines.append(f"{k}: {v:.6g}")
        for k, ok in self.checks.items():
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {k}")
        return "\n".join(lines) + "\n"


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _grid(cfg: ExperimentConfig, spec) -> TimeGrid:
    return TimeGrid(spec.horizon, cfg.n_steps)


def _band(cfg, lo, hi):
    return cfg.get("slope_lo", lo), cfg.get("slope_hi", hi)


def _slope_check(table, lo, hi):
    if table.exact_zero:
        return True
    return table.fit is not None and lo <= table.fit.slope <= hi


# --- experiments ----------------------------------------------------------------------


def run_chaos_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """``E W2^2(mu^N_T, mubar^N_T)`` between the interacting cloud and its decoupled copies.

    ``variant = iid`` measures instead the decoupled cloud against the large
    reference cloud, i.e. the pure sampling error of i.i.d. particles.
    """
    spec = build_preset(cfg.preset, cfg.overrides)
    grid = _grid(cfg, spec)
    variant = cfg.get("variant", "coupled", str)
    if variant not in ("coupled", "iid"):
        raise ExperimentError(f"unknown chaos variant {variant!r}")
    ref_factor = cfg.get("ref_factor", 16, int)

    def cell(N):
        inter, dec = simulate_coupled_clouds(spec, N, grid, NoiseBundle(cfg.seed, cfg.M, N, grid, spec.dim), ref_factor)
        other = inter.final if variant == "coupled" else dec.extras["ref_final"]
        w = w2_squared_batch(dec.final[..., 0], other[..., 0])
        return float(w.mean()), float(w.std(ddof=1) / np.sqrt(cfg.M))

    res = _map(cell, cfg.N_list, threads)
    table = RateTable(f"chaos-{variant}", list(cfg.N_list), [r[0] for r in res], [r[1] for r in res],
                      [cfg.M] * len(res))
    table.fit_slope(cfg.get("min_points", 4, int), cfg.get("max_rel_stderr", 0.5))
    lo, hi = _band(cfg, -1.25, -0.75) if variant == "coupled" else _band(cfg, -1.3, -0.7)
    checks = {f"slope in [{lo}, {hi}]": _slope_check(table, lo, hi)}
    return ExperimentResult("chaos", table, {"variant": variant, "ref_factor": ref_factor}, checks)


def quenched_initial(spec: CoefficientSpec, N: int, seed: int) -> np.ndarray:
    """One fixed draw of ``N`` initial points from ``nu0`` (the points ``x`` of ``m^x``)."""
    return spec.initial_law.sample(stream(seed, ROLE_QUENCHED, N), (N,))


def _reducible(spec: CoefficientSpec) -> bool:
    if not spec.constant_vol or spec.dim != 1 or callable(spec.sigma):
        return False
    x = np.linspace(-3, 3, 7)[None, :, None]
    b = spec.b0(0.0, x, CloudSummary(np.full((1, 1, 1), 0.3), np.full((1, 1, 1), 1.0)))
    return bool(np.all(b == 0))


def run_value_rate_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Weak rate ``|V^N(0, x) - U(0, m^x)|`` with quenched initial points.

    ``V^N`` is the N-particle BSDE value and ``U(0, m^x)`` the mean-field BSDE
    value started from ``m^x`` with an inner cloud that is a multiple of
    ``x``.  Both share the common-noise paths, so the gap is the mean of the
    paired pathwise estimators.
    """
    spec = build_preset(cfg.preset, cfg.overrides)
    grid = _grid(cfg, spec)
    seeds = cfg.seed_list
    reducible = _reducible(spec)

    def cell(args):
        seed, N = args
        x = quenched_initial(spec, N, seed)
        sN = solve_particle_bsde(spec, N, cfg.M, grid, seed=seed, initial=x)
        n_in = N * int(np.ceil(cfg.N_inner / N))
        sM = solve_mf_bsde(spec, n_in, cfg.M, grid, seed=seed, initial=from_points(x))
        d = sN.zeta - sM.zeta
        U = value_at(solve_value(spec, from_points(x))) if reducible else float("nan")
        return {"seed": seed, "N": N, "gap": float(d.mean()), "gap_se": float(d.std(ddof=1) / np.sqrt(len(d))),
                "VN": sN.Y0, "U_bsde": sM.Y0, "U_pde": U}

    cells = _map(cell, [(s, N) for s in seeds for N in cfg.N_list], threads)
    by = {(c["seed"], c["N"]): c for c in cells}
    stat, se = [], []
    for N in cfg.N_list:
        g = np.array([by[s, N]["gap"] for s in seeds])
        e = np.array([by[s, N]["gap_se"] for s in seeds])
        stat.append(float(abs(g.mean())))
        se.append(float(np.sqrt(np.sum(e**2)) / len(seeds)))
    table = RateTable("value-rate", list(cfg.N_list), stat, se, [cfg.M * len(seeds)] * len(stat))
    table.fit_slope(cfg.get("min_points", 4, int), cfg.get("max_rel_stderr", 0.5))
    lo, hi = _band(cfg, -1.4, -0.6)
    n_lo, n_hi = cfg.N_list[0], cfg.N_list[-1]
    # an identically zero gap counts as non-increasing
    mono = [abs(by[s, n_hi]["gap"]) < abs(by[s, n_lo]["gap"]) or by[s, n_hi]["gap"] == by[s, n_lo]["gap"] == 0
            for s in seeds]
    need = int(np.ceil(cfg.get("monotone_fraction", 0.8) * len(seeds)))
    checks = {
        f"slope in [{lo}, {hi}]": _slope_check(table, lo, hi),
        f"gap(N={n_hi}) < gap(N={n_lo}) in >= {need} of {len(seeds)} seeds": sum(mono) >= need,
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "N", "gap", "gap_stderr", "VN", "U_bsde", "U_pde"])
    for c in cells:
        w.writerow([c["seed"], c["N"]] + [repr(float(c[k])) for k in ("gap", "gap_se", "VN", "U_bsde", "U_pde")])
    stats = {"monotone_seeds": int(sum(mono)), "n_seeds": len(seeds)}
    return ExperimentResult("value-rate", table, stats, checks, {"cells.csv": buf.getvalue()})


def run_stability_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Stability of the N-particle BSDE: ratio ``E sup|Y^N - Y|^2 / E W2^2(mu^N_T, mu_T)`` across ``N``.

    The main table holds the right-hand side ``E W2^2`` (expected slope -1).
    """
    spec = build_preset(cfg.preset, cfg.overrides)
    grid = _grid(cfg, spec)
    seeds = cfg.seed_list
    per_seed = _map(lambda s: stability_gap(spec, cfg.N_list, grid, cfg.M, cfg.N_inner, s), seeds, threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "N", "y_gap", "z_gap", "w2", "ratio", "y_gap_stderr", "w2_stderr"])
    spreads, exact_all = [], True
    for s, rows in zip(seeds, per_seed):
        for r in rows:
            w.writerow([s, r.N] + [repr(float(v)) for v in (r.y_gap, r.z_gap, r.w2, r.ratio, r.y_gap_se, r.w2_se)])
        exact_all &= all(r.exact for r in rows)
        ratios = np.array([r.ratio for r in rows if not r.exact])
        if len(ratios):
            spreads.append(float(ratios.max() / ratios.min()))
    w2 = np.array([[r.w2 for r in rows] for rows in per_seed])
    w2se = np.array([[r.w2_se for r in rows] for rows in per_seed])
    table = RateTable("stability-w2", list(cfg.N_list), list(w2.mean(axis=0)),
                      list(np.sqrt((w2se**2).sum(axis=0)) / len(seeds)), [cfg.M * len(seeds)] * len(cfg.N_list))
    table.fit_slope(cfg.get("min_points", 4, int))
    bound = cfg.get("ratio_bound", 10.0)
    lo, hi = _band(cfg, -1.3, -0.7)
    checks = {
        f"max/min ratio <= {bound} in every seed": exact_all or all(sp <= bound for sp in spreads),
        f"W2^2 slope in [{lo}, {hi}]": _slope_check(table, lo, hi),
    }
    stats = {"max_ratio_spread": max(spreads) if spreads else 0.0, "exact": exact_all}
    return ExperimentResult("stability", table, stats, checks, {"stability.csv": buf.getvalue()})


def run_crosscheck_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """PDE value ``U(0, nu0)`` against the mean-field BSDE ``Y0`` (and the Riccati value for LQ)."""
    spec = build_preset(cfg.preset, cfg.overrides)
    if not _reducible(spec):
        raise SpecError(f"preset {cfg.preset!r} does not satisfy the constant-volatility reduction (b = a)")
    grid = _grid(cfg, spec)
    nu0 = spec.initial_law.quadrature(cfg.get("quadrature_order", 8, int))
    hgrid = default_grid(spec, cfg.get("n_t", 400, int), cfg.get("n_x", 400, int))
    pde = value_at(solve_value(spec, nu0, hgrid))
    sol = solve_mf_bsde(spec, cfg.N_inner, cfg.M, grid, seed=cfg.seed)
    rel = abs(pde - sol.Y0) / abs(pde)
    tol = cfg.get("tolerance", 0.025)
    stats = {"pde_value": pde, "bsde_Y0": sol.Y0, "bsde_stderr": sol.Y0_stderr, "pde_vs_bsde_relerr": rel}
    checks = {f"pde_vs_bsde_relerr <= {tol}": rel <= tol}
    params = preset_params(cfg.preset, cfg.overrides)
    if isinstance(params, LqParams):
        ric = lq_value_oracle(params, 0.0, params.m0, params.v0)
        stats["riccati_value"] = ric
        stats["pde_vs_riccati_relerr"] = abs(pde - ric) / abs(ric)
        checks["pde_vs_riccati_relerr <= 0.005"] = stats["pde_vs_riccati_relerr"] <= 0.005
    return ExperimentResult("cross-check", None, stats, checks)


def run_partialobs_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Certainty-equivalence values ``V^N_P`` against the LQG oracle, plus a gain search."""
    params = preset_params(cfg.preset, cfg.overrides)
    if not isinstance(params, LqgParams):
        raise SpecError("partialobs needs the partial-obs-lqg preset")
    pspec = params.pspec()
    grid = TimeGrid(params.T, cfg.n_steps)
    oracle = lqg_oracle(params)
    policy = oracle.policy()
    ests = _map(lambda N: estimate_partial_value(pspec, policy, N, cfg.M, grid, cfg.seed), cfg.N_list, threads)
    table = RateTable("partialobs-value", list(cfg.N_list), [e.value for e in ests], [e.stderr for e in ests],
                      [cfg.M] * len(ests))
    tol = cfg.get("tolerance", 0.03)
    last = ests[-1]
    rel = abs(last.value - oracle.value) / abs(oracle.value)
    z = last.mean_weight
    z_mean, z_se = float(z.mean()), float(z.std(ddof=1) / np.sqrt(len(z)))

    gains = np.array(cfg.get("gains", list(np.arange(0.0, 3.01, 0.5)), list))
    search = optimize_parametric_policy(pspec, linear_filter_policy, gains, cfg.get("search_N", 64, int),
                                        cfg.get("search_M", 2000, int), grid, cfg.seed)
    cell = float(np.min(np.diff(np.sort(gains)))) if len(gains) > 1 else 0.0
    g_star = float(oracle.gain(0.0))
    g_hat = float(search.best_params[0])

    reduced = _h0_reduction_is_exact(params, grid, cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gain", "value", "stderr"])
    for g, v, e in zip(gains, search.values, search.stderrs):
        w.writerow([repr(float(g)), repr(float(v)), repr(float(e))])
    stats = {"oracle_value": oracle.value, "oracle_gain": g_star, "best_gain": g_hat, "best_value": search.best_value,
             "relerr_at_max_N": rel, "mean_weight": z_mean, "mean_weight_stderr": z_se}
    checks = {
        f"|V^N_P - V_P| / |V_P| <= {tol} at N={cfg.N_list[-1]}": rel <= tol,
        "E[Z_T] = 1 within 3 standard errors": abs(z_mean - 1.0) <= 3 * z_se,
        "recovered gain within one grid cell": abs(g_hat - g_star) <= cell + 1e-12,
        "h = 0 reduction bitwise equal": reduced,
    }
    return ExperimentResult("partialobs", table, stats, checks, {"policy_search.csv": buf.getvalue()})


def _h0_reduction_is_exact(params: LqgParams, grid: TimeGrid, seed: int, N: int = 16, M: int = 64) -> bool:
    from dataclasses import replace

    pspec = replace(params, eta=0.0).pspec()
    policy = linear_filter_policy(1.0)
    noise = NoiseBundle(seed, M, N, grid, 1)
    a = simulate_weighted_particles(pspec, policy, N, grid, noise, store_states=True)
    b = simulate_controlled_system(pspec.base, policy, N, grid, noise, store_states=True)
    return bool(np.array_equal(a.states, b.states))


def run_simulate(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Forward simulation under the Riccati feedback (LQ presets) or the zero control."""
    spec = build_preset(cfg.preset, cfg.overrides)
    if not isinstance(spec, CoefficientSpec):
        raise SpecError("simulate needs a fully observed preset")
    grid = _grid(cfg, spec)
    params = preset_params(cfg.preset, cfg.overrides)
    if cfg.preset == "lq":
        ric = solve_riccati(params)
        policy = EmpiricalFeedback(lambda t, s: ric.feedback(t, s.mean))
    else:
        policy = constant_policy(np.zeros(spec.dim))
    N = cfg.N_list[-1]
    traj = simulate_controlled_system(spec, policy, N, grid, NoiseBundle(cfg.seed, cfg.M, N, grid, spec.dim),
                                      chunk=cfg.get("chunk", 500, int))
    r = estimate_reward(spec, traj)
    se = float(r.std(ddof=1) / np.sqrt(len(r)))
    table = RateTable("reward", [N], [float(r.mean())], [se], [cfg.M])
    stats = {"reward": float(r.mean()), "reward_stderr": se}
    checks = {"finite reward": bool(np.all(np.isfinite(r)))}
    if cfg.preset == "lq":
        o = lq_value_oracle(params, 0.0, params.m0, params.v0)
        stats["riccati_value"] = o
        stats["relerr"] = abs(r.mean() - o) / abs(o)
    return ExperimentResult("simulate", table, stats, checks)


def run_bsde(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    spec = build_preset(cfg.preset, cfg.overrides)
    grid = _grid(cfg, spec)
    sol = solve_mf_bsde(spec, cfg.N_inner, cfg.M, grid, seed=cfg.seed)
    stats = {"Y0": sol.Y0, "Y0_stderr": sol.Y0_stderr}
    checks = {"finite Y0": bool(np.isfinite(sol.Y0))}
    params = preset_params(cfg.preset, cfg.overrides)
    if cfg.preset == "lq":
        o = lq_value_oracle(params, 0.0, params.m0, params.v0)
        stats["riccati_value"] = o
        stats["relerr"] = abs(sol.Y0 - o) / abs(o)
        checks["relerr <= 0.02"] = stats["relerr"] <= 0.02
    diag = io.StringIO()
    sol.diagnostics_csv(diag)
    return ExperimentResult("bsde", None, stats, checks, {"bsde.json": sol.to_json(), "diagnostics.csv": diag.getvalue()})


def run_hjb(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    spec = build_preset(cfg.preset, cfg.overrides)
    if not _reducible(spec):
        raise SpecError(f"preset {cfg.preset!r} does not satisfy the constant-volatility reduction (b = a)")
    nu0 = spec.initial_law.quadrature(cfg.get("quadrature_order", 8, int))
    hgrid = default_grid(spec, cfg.get("n_t", 400, int), cfg.get("n_x", 400, int))
    field_ = solve_value(spec, nu0, hgrid)
    v = value_at(field_)
    bi = boundary_influence(spec, nu0, hgrid)
    stats = {"value": v, "boundary_influence": bi}
    checks = {"boundary influence < 1e-3": bi < 1e-3}
    params = preset_params(cfg.preset, cfg.overrides)
    if isinstance(params, LqParams):
        o = lq_value_oracle(params, 0.0, params.m0, params.v0)
        stats["riccati_value"] = o
        stats["relerr"] = abs(v - o) / abs(o)
        checks["relerr <= 0.005"] = stats["relerr"] <= 0.005
    extra = {}
    if cfg.get("write_field", False, bool):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "U", "DxU", "DxxU"])
        for i, t in enumerate(hgrid.times):
            for j, x in enumerate(hgrid.x):
                w.writerow([repr(float(t)), repr(float(x))] +
                           [repr(float(a[i, j])) for a in (field_.U, field_.Ux, field_.Uxx)])
        extra["field.csv"] = buf.getvalue()
    return ExperimentResult("hjb", None, stats, checks, extra)


RUNNERS = {
    "chaos": run_chaos_experiment,
    "value-rate": run_value_rate_experiment,
    "stability": run_stability_experiment,
    "cross-check": run_crosscheck_experiment,
    "partialobs": run_partialobs_experiment,
    "simulate": run_simulate,
    "bsde": run_bsde,
    "hjb": run_hjb,
}


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg, threads)


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result.table is not None:
        result.table.to_csv(out / "results.csv")
    for name, text in result.extra_csv.items():
        (out / name).write_text(text)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": result.kind,
        "inputs": asdict(cfg),
        "seed": cfg.seed,
        "build": _build_id(),
        "statistics": result.statistics,
        "table": result.table.to_dict() if result.table is not None else None,
        "checks": result.checks,
        "passed": result.passed,
    }
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(result.report())
    return out


def run_config(path_or_cfg, seed: int | None = None, out: str | None = None, threads: int = 1) -> tuple[int, ExperimentResult]:
    """Load a config, run the experiment, write its artifacts; exit status 0 iff every check passed."""
    from .config import load_config

    cfg = path_or_cfg if isinstance(path_or_cfg, ExperimentConfig) else load_config(path_or_cfg)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    result = run_experiment(cfg, threads)
    target = out or cfg.out
    if target:
        write_outputs(cfg, result, target)
    return (0 if result.passed else 1), result
