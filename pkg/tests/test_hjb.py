from dataclasses import replace

import numpy as np
import pytest

from mfclab import functionals as fn
from mfclab.hjb import (
    HjbError,
    HjbGrid,
    MeasureDerivativeProbe,
    Scheme,
    boundary_influence,
    default_grid,
    dm_consistency_check,
    lift_rewards,
    nparticle_residual,
    solve_dm_pde,
    solve_dmm_pde,
    solve_hjb,
    solve_value,
    value_at,
)
from mfclab.measure import GaussianLaw, from_points
from mfclab.model import LqParams, SpecError, lq_value_oracle, solve_riccati
from mfclab.presets import build_preset

NU0 = from_points([[-0.5], [0.25], [1.5]], [1, 2, 1])
SMALL = HjbGrid(1.0, 100, 100, 6.0)


def lq(**kw):
    return LqParams(**kw).spec()


# --- lifting ----------------------------------------------------------------------


def test_lift_linear_F():
    spec = replace(lq(), F=fn.mean_coordinate())
    L = lift_rewards(spec, NU0, SMALL)
    np.testing.assert_allclose(L.F, np.broadcast_to(NU0.mean()[0] + SMALL.x, L.F.shape), atol=1e-12)
    np.testing.assert_allclose(L.DxF, 1.0, atol=1e-12)


def test_lift_second_moment():
    spec = replace(lq(sigma=0.8), F=fn.expectation(fn.power_feature(2)))
    L = lift_rewards(spec, NU0, SMALL)
    t = SMALL.times[:, None]
    exact = NU0.covariance()[0, 0] + (NU0.mean()[0] + SMALL.x) ** 2 + 0.64 * t
    np.testing.assert_allclose(L.F, exact, rtol=1e-8)


def test_lift_without_idiosyncratic_noise():
    spec = replace(lq(sigma=0.0, c=1.0, cap=None))
    L = lift_rewards(spec, NU0, SMALL)
    assert np.all(L.F == L.F[0])
    x = SMALL.x[17]
    assert L.F[0, 17] == pytest.approx(spec.F.of(NU0.shifted(x)), rel=1e-12)


def test_lift_requires_reducible_model():
    with pytest.raises(SpecError):
        lift_rewards(build_preset("tanh-drift") if False else replace(lq(), constant_vol=False), NU0, SMALL)
    with pytest.raises(HjbError):
        HjbGrid(1.0, 10, 11)


# --- value function ---------------------------------------------------------------


def heat_spec():
    # control set {0}: H0 = 0; F = 0 and g(mu) = <mu, x^2> on nu0 = delta_0 with sigma = 0
    return replace(lq(a_max=0.0, sigma=0.0, sigma0=0.9), F=fn.constant(), g=fn.expectation(fn.power_feature(2)))


def test_heat_equation_exact_with_quadratic_closure():
    spec = heat_spec()
    grid = HjbGrid(1.0, 400, 400, 6.0)
    f = solve_value(spec, from_points([[0.0]]), grid, Scheme(bc="quadratic"))
    exact = grid.x[None, :] ** 2 + 0.81 * (1.0 - grid.times[:, None])
    assert np.max(np.abs(f.U - exact)) <= 1e-3


def test_heat_equation_linear_closure_interior():
    spec = heat_spec()
    grid = HjbGrid(1.0, 400, 400, 6.0)
    f = solve_value(spec, from_points([[0.0]]), grid)
    exact = grid.x[None, :] ** 2 + 0.81 * (1.0 - grid.times[:, None])
    inner = np.abs(grid.x) <= 3.0
    assert np.max(np.abs(f.U - exact)[:, inner]) <= 1e-3


def lq_field_error(grid, scheme=None, p=LqParams()):
    nu0 = GaussianLaw.of([p.m0], [[p.v0]]).quadrature(8)
    f = solve_value(p.spec(), nu0, grid, scheme)
    P, q = solve_riccati(p).at(grid.times)
    exact = -P[:, None] * (p.m0 + grid.x[None, :] - p.theta) ** 2 - q[:, None]
    inner = np.abs(grid.x) <= 2.0
    return np.max(np.abs(f.U - exact)[:, inner]) / np.max(np.abs(exact[:, inner])), f


def test_lq_lifted_field_matches_riccati():
    err, f = lq_field_error(default_grid(lq(), 200, 200))
    assert err <= 5e-3
    p = LqParams()
    assert value_at(f) == pytest.approx(lq_value_oracle(p, 0.0, p.m0), rel=5e-3)


def test_refinement_reduces_error():
    g = default_grid(lq(), 50, 50)
    e1, _ = lq_field_error(g)
    e2, _ = lq_field_error(g.refined())
    assert e1 / e2 >= 3.0


def test_upwind_scheme_first_order_and_consistent():
    g = default_grid(lq(), 100, 100)
    e1, _ = lq_field_error(g, Scheme(theta=1.0, gradient="upwind"))
    e2, _ = lq_field_error(g.refined(), Scheme(theta=1.0, gradient="upwind"))
    assert e2 < e1 < 0.1


def test_value_at_terminal():
    p = LqParams(cap=None)
    nu0 = GaussianLaw.of([p.m0], [[p.v0]]).quadrature(8)
    f = solve_value(p.spec(), nu0, SMALL)
    assert value_at(f, 1.0) == f.lifted.G[SMALL.center]
    assert value_at(f, 1.0) == pytest.approx(-p.gamma * (p.m0 - p.theta) ** 2, rel=1e-10)
    with pytest.raises(HjbError):
        value_at(f, 1.5)


@pytest.mark.parametrize("scheme", [Scheme(), Scheme(theta=1.0, gradient="upwind")])
def test_comparison_principle(scheme):
    p = LqParams()
    nu0 = GaussianLaw.of([p.m0], [[p.v0]]).quadrature(8)
    L = lift_rewards(p.spec(), nu0, SMALL)
    base = solve_hjb(L, scheme)
    rng = np.random.default_rng(0)
    for _ in range(3):
        c, w, a = rng.uniform(-3, 3), rng.uniform(0.3, 1.5), rng.uniform(0.01, 1.0)
        bump = a * np.exp(-0.5 * ((SMALL.x - c) / w) ** 2)
        up = solve_hjb(replace(L, G=L.G + bump), scheme)
        # the extrapolating boundary rows are not monotone; the interior is
        inner = np.abs(SMALL.x) <= SMALL.R / 2
        assert np.all((up.U - base.U)[:, inner] >= -1e-12)
        assert np.min(up.U - base.U) >= -1e-5 * a


def test_boundary_influence_small():
    p = LqParams()
    nu0 = GaussianLaw.of([p.m0], [[p.v0]]).quadrature(8)
    assert boundary_influence(p.spec(), nu0, default_grid(p.spec(), 100, 200)) < 1e-3


def test_cfl_refinement():
    g = HjbGrid(1.0, 10, 200, 6.0)
    f = solve_value(lq(), NU0, g)
    assert f.info["substeps"] > 1
    with pytest.raises(HjbError):
        solve_value(lq(), NU0, g, Scheme(cfl="error"))


def test_field_csv(tmp_path):
    f = solve_value(lq(), NU0, HjbGrid(1.0, 4, 4, 2.0))
    f.to_csv(tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "t,x,U,DxU,DxxU" and len(rows) == 1 + 5 * 5


# --- measure derivatives ----------------------------------------------------------


def test_constant_rewards_have_zero_derivatives():
    spec = replace(lq(), F=fn.constant(2.0), g=fn.constant(-1.0))
    base = solve_value(spec, NU0, SMALL)
    u1 = solve_dm_pde(base, [0.0, 1.0])
    assert np.all(u1.V == 0.0)
    assert np.all(solve_dmm_pde(base, u1, u1).V == 0.0)


def test_linear_running_reward_dm():
    spec = replace(lq(), F=fn.mean_coordinate(), g=fn.constant())
    base = solve_value(spec, NU0, SMALL)
    u1 = solve_dm_pde(base, [-1.0, 0.0, 2.0])
    for i, t in enumerate(SMALL.times[::20]):
        np.testing.assert_allclose(u1.at_origin(20 * i), 1.0 - t, atol=1e-10)


def test_dm_matches_riccati_derivative():
    # D_m U(0, nu0; y) = -2 P(0) (m0 - theta) for every y
    p = LqParams()
    nu0 = GaussianLaw.of([p.m0], [[p.v0]]).quadrature(8)
    base = solve_value(p.spec(), nu0, default_grid(p.spec(), 200, 200))
    dm = solve_dm_pde(base, [-0.5, 1.0, 2.0]).at_origin()
    P0 = solve_riccati(p).at(0.0)[0]
    np.testing.assert_allclose(dm, -2 * P0 * (p.m0 - p.theta), rtol=0.05)
    # D2_mm U = -2 P(0)
    u1 = solve_dm_pde(base, [0.0, 1.0])
    dmm = solve_dmm_pde(base, u1, u1).at_origin()
    np.testing.assert_allclose(dmm, -2 * P0, rtol=0.05)


def test_dm_consistency_zero_eps():
    rep = dm_consistency_check(lq(), NU0, MeasureDerivativeProbe(eps=(0.0,)), SMALL)
    assert rep.differences[0] == 0.0 and rep.predicted_differences[0] == 0.0


def test_dm_consistency_single_atom():
    rep = dm_consistency_check(lq(), NU0, MeasureDerivativeProbe(atoms=(2,), eps=(0.1, 0.05)), SMALL)
    assert rep.best_rel_err <= 0.05
    assert rep.quotients[1] == pytest.approx(rep.predicted, rel=0.05)


def test_dmm_requires_paired_probes():
    base = solve_value(lq(), NU0, SMALL)
    with pytest.raises(HjbError):
        solve_dmm_pde(base, solve_dm_pde(base, [0.0]), solve_dm_pde(base, [0.0, 1.0]))


def test_nparticle_residual_vanishes_without_idiosyncratic_noise():
    r = nparticle_residual(lq(sigma=0.0), [0.0, 0.5, 1.0, 1.5], grid=SMALL)
    assert r.E_N == 0.0 and r.bound == 0.0


def test_nparticle_residual_bound():
    r = nparticle_residual(lq(), np.linspace(0, 2, 6), grid=SMALL)
    assert abs(r.E_N) <= r.bound + 1e-15 and r.N == 6
