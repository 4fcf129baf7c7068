from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from mfclab import functionals as fn
from mfclab.measure import GaussianLaw, from_points
from mfclab.model import LqParams, lq_value_oracle, solve_riccati
from mfclab.noise import ExplicitNoise, NoiseBundle, TimeGrid, stream
from mfclab.particle import (
    EmpiricalFeedback,
    SimulationError,
    constant_policy,
    estimate_reward,
    simulate_controlled_system,
    simulate_coupled_clouds,
    simulate_mkv_cloud,
)
from mfclab.presets import build_preset

GRID = TimeGrid(1.0, 20)


def zero_noise(noise, law):
    e = noise.materialize(law)
    return ExplicitNoise(e.grid, e.xi, np.zeros_like(e.dB), np.zeros_like(e.dW))


def test_time_grid():
    assert GRID.dt == 0.05 and GRID.times[-1] == 1.0 and len(GRID.times) == 21
    with pytest.raises(ValueError):
        TimeGrid(0.0, 3)


def test_streams_are_keyed():
    a = stream(1, 2, 3).standard_normal(4)
    assert np.array_equal(a, stream(1, 2, 3).standard_normal(4))
    assert not np.array_equal(a, stream(1, 2, 4).standard_normal(4))
    nb = NoiseBundle(5, 600, 3, GRID)
    assert np.array_equal(nb.subset(250, 600).common(2), nb.common(2)[250:])


def test_frozen_particles():
    spec = LqParams().spec()
    noise = zero_noise(NoiseBundle(0, 3, 5, GRID), spec.initial_law)
    tr = simulate_controlled_system(spec, constant_policy([0.0]), 5, GRID, noise, store_states=True)
    assert np.all(tr.states == noise.xi[:, :, None, :])


def test_deterministic_ode():
    spec = LqParams(sigma0=1.0).spec()  # b = a, noises switched off below
    noise = zero_noise(NoiseBundle(0, 3, 5, GRID), spec.initial_law)
    tr = simulate_controlled_system(spec, constant_policy([1.0]), 5, GRID, noise)
    np.testing.assert_allclose(tr.final, noise.xi + 1.0, rtol=0, atol=1e-12)


def test_gaussian_variance_exact_in_dt():
    p = LqParams(sigma=0.7, sigma0=0.5, v0=0.3, m0=1.0)
    spec = p.spec()
    M, N = 400, 50
    grid = TimeGrid(1.0, 4)  # coarse: b = 0 and constant vol make Euler exact in law
    tr = simulate_mkv_cloud(spec, N, grid, NoiseBundle(11, M, N, grid))
    y = np.mean((tr.final[..., 0] - p.m0) ** 2, axis=1)
    target = p.v0 + (p.sigma**2 + p.sigma0**2) * p.T
    assert abs(y.mean() - target) <= 3 * y.std(ddof=1) / np.sqrt(M)


def test_common_noise_translation():
    spec = replace(LqParams(sigma0=1.0).spec(), sigma=np.zeros((1, 1)))
    nb = NoiseBundle(2, 4, 6, GRID)
    tr = simulate_mkv_cloud(spec, 6, GRID, nb)
    xi = nb.initial(spec.initial_law)
    np.testing.assert_allclose(tr.final, xi + tr.B[:, -1][:, None, :], atol=1e-12)


def test_conditional_lln_and_coupling():
    p = LqParams(sigma=1.0, sigma0=1.0, v0=0.25)
    spec = p.spec()
    M, N = 500, 400
    a = simulate_mkv_cloud(spec, N, GRID, NoiseBundle(3, M, N, GRID))
    sd = np.sqrt((p.v0 + p.sigma**2 * p.T) / N)
    dev = (a.mean[:, -1, 0] - p.m0 - p.sigma0 * a.B[:, -1, 0]) / sd
    assert np.mean(np.abs(dev) <= 3) >= 0.99
    assert 0.85 < dev.std() < 1.15
    b = simulate_mkv_cloud(spec, N, GRID, NoiseBundle(3, M, N, GRID, w_seed=99))
    assert np.array_equal(a.B, b.B)
    diff = (a.mean[:, -1, 0] - b.mean[:, -1, 0]) / (np.sqrt(2) * sd)
    assert 0.85 < diff.std() < 1.15


def test_no_interaction_coupled_clouds_identical():
    spec = LqParams().spec()
    inter, dec = simulate_coupled_clouds(spec, 8, GRID, NoiseBundle(0, 5, 8, GRID))
    assert np.array_equal(inter.final, dec.final)


def test_chaos_trend_decreasing():
    spec = build_preset("tanh-drift")
    grid = TimeGrid(1.0, 25)
    w = []
    for N in (8, 32, 128):
        inter, dec = simulate_coupled_clouds(spec, N, grid, NoiseBundle(1, 200, N, grid))
        d = np.sort(inter.final[..., 0], axis=1) - np.sort(dec.final[..., 0], axis=1)
        w.append(np.mean(d**2))
    assert w[0] > w[1] > w[2] > 0


def test_reward_trivial_cases():
    spec = replace(LqParams(c=0.0, gamma=0.0).spec(), L0=lambda t, a: np.zeros(a.shape[:-1]))
    tr = simulate_mkv_cloud(spec, 7, GRID, NoiseBundle(0, 3, 7, GRID))
    assert np.all(estimate_reward(spec, tr) == 0.0)
    gm = replace(spec, g=fn.mean_coordinate())
    noise = zero_noise(NoiseBundle(0, 3, 7, GRID), spec.initial_law)
    tr = simulate_controlled_system(gm, constant_policy([0.0]), 7, GRID, noise)
    np.testing.assert_allclose(estimate_reward(gm, tr), noise.xi[..., 0].mean(axis=1), atol=1e-14)


@pytest.mark.slow
def test_riccati_feedback_reward_matches_oracle():
    p = LqParams()
    spec = p.spec()
    ric = solve_riccati(p)
    pol = EmpiricalFeedback(lambda t, s: ric.feedback(t, s.mean))
    grid = TimeGrid(1.0, 50)
    tr = simulate_controlled_system(spec, pol, 2000, grid, NoiseBundle(4, 10_000, 2000, grid), chunk=1000)
    r = estimate_reward(spec, tr)
    oracle = lq_value_oracle(p, 0.0, p.m0)
    assert abs(r.mean() - oracle) / abs(oracle) <= 0.02


def test_exchangeability():
    spec = build_preset("tanh-drift")
    e = NoiseBundle(6, 4, 9, GRID).materialize(spec.initial_law)
    perm = np.random.default_rng(0).permutation(9)
    a = simulate_mkv_cloud(spec, 9, GRID, e, store_states=True)
    b = simulate_mkv_cloud(spec, 9, GRID, e.permuted(perm), store_states=True)
    np.testing.assert_allclose(b.states, a.states[:, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.mean, a.mean, atol=1e-12)
    np.testing.assert_allclose(b.var, a.var, atol=1e-12)
    np.testing.assert_allclose(estimate_reward(spec, b), estimate_reward(spec, a), atol=1e-12)
    for i in (0, 7, 20):
        mu, nu = a.measure(i, 1), b.measure(i, 1)
        np.testing.assert_allclose(np.sort(mu.points[:, 0]), np.sort(nu.points[:, 0]), atol=1e-12)


def test_same_seed_determinism_across_chunks():
    spec = LqParams().spec()
    ric = solve_riccati(LqParams())
    pol = EmpiricalFeedback(lambda t, s: ric.feedback(t, s.mean))
    a = simulate_controlled_system(spec, pol, 12, GRID, NoiseBundle(9, 700, 12, GRID))
    b = simulate_controlled_system(spec, pol, 12, GRID, NoiseBundle(9, 700, 12, GRID), chunk=300)
    assert np.array_equal(a.final, b.final) and np.array_equal(a.controls, b.controls)


def test_control_shifts_only_the_mean():
    p = LqParams()
    spec = p.spec()
    ric = solve_riccati(p)
    pol = EmpiricalFeedback(lambda t, s: ric.feedback(t, s.mean))
    c = simulate_controlled_system(spec, pol, 30, GRID, NoiseBundle(1, 600, 30, GRID))
    u = simulate_mkv_cloud(spec, 30, GRID, NoiseBundle(1, 600, 30, GRID))
    np.testing.assert_allclose(c.var[:, -1], u.var[:, -1], rtol=1e-9)
    u2 = simulate_mkv_cloud(spec, 30, GRID, NoiseBundle(2, 600, 30, GRID))
    assert stats.ks_2samp(c.var[:, -1, 0], u2.var[:, -1, 0]).pvalue > 0.01


def test_errors_and_csv(tmp_path):
    spec = LqParams().spec()
    with pytest.raises(SimulationError):
        simulate_mkv_cloud(spec, 4, GRID, NoiseBundle(0, 2, 5, GRID))
    tr = simulate_mkv_cloud(spec, 2, TimeGrid(1.0, 2), NoiseBundle(0, 2, 2, TimeGrid(1.0, 2)), store_states=True)
    tr.to_csv(tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("replication,particle,time") and len(rows) == 1 + 2 * 2 * 3
    with pytest.raises(SimulationError):
        simulate_mkv_cloud(spec, 2, GRID, NoiseBundle(0, 2, 2, GRID)).measure(3)
    assert tr.measure(-1).size == 2


def test_initial_override_quenched():
    spec = LqParams().spec()
    x = np.linspace(-1, 1, 5)[:, None]
    tr = simulate_mkv_cloud(spec, 5, GRID, NoiseBundle(0, 3, 5, GRID), initial=x, store_states=True)
    assert np.all(tr.states[:, :, 0] == x)
    assert isinstance(spec.initial_law, GaussianLaw)
    assert from_points(x).size == 5
