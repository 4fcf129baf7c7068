import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfclab.measure import (
    GaussianLaw,
    MeasureError,
    convolve_gaussian,
    from_points,
    gaussian_measure,
    hermite_rule,
    moments,
    stratified_points,
    wasserstein2_assignment,
    wasserstein2_bruteforce,
    wasserstein2_sorted,
    wasserstein2_to_gaussian_1d,
    wasserstein_p_1d,
)

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def cloud(n_lo=1, n_hi=6, d=1):
    return st.integers(n_lo, n_hi).flatmap(lambda n: arrays(float, (n, d), elements=coords))


# --- construction -----------------------------------------------------------------


def test_singleton():
    mu = from_points([[0.0]])
    assert mu.size == 1 and mu.points[0, 0] == 0.0 and mu.weights[0] == 1.0


def test_weights_normalised():
    assert np.array_equal(from_points([[1], [2]], [2, 2]).weights, [0.5, 0.5])


def test_zero_weight_atom_kept():
    mu = from_points([[1], [2], [3]], [1, 0, 1])
    assert mu.size == 3 and np.array_equal(mu.weights, [0.5, 0.0, 0.5])


def test_equal_weights_exact():
    mu = from_points(np.arange(7.0))
    assert np.all(mu.weights == 1.0 / 7)


@pytest.mark.parametrize(
    "pts, w",
    [([], None), ([[np.nan]], None), ([[1.0], [2.0]], [1.0]), ([[1.0]], [-1.0]), ([[1.0], [2.0]], [0.0, 0.0])],
)
def test_invalid_clouds(pts, w):
    with pytest.raises(MeasureError):
        from_points(np.array(pts, dtype=float).reshape(-1, 1) if len(pts) else np.empty((0, 1)), w)


def test_measure_immutable():
    mu = from_points([[1.0], [2.0]])
    with pytest.raises(ValueError):
        mu.points[0, 0] = 5.0


def test_csv_roundtrip(tmp_path):
    mu = from_points(np.random.default_rng(0).normal(size=(5, 2)), [1, 2, 3, 4, 5])
    mu.to_csv(tmp_path / "c.csv")
    nu = mu.from_csv(tmp_path / "c.csv")
    assert np.array_equal(mu.points, nu.points)
    np.testing.assert_allclose(mu.weights, nu.weights, rtol=1e-15)


# --- moments ----------------------------------------------------------------------


def test_moments_examples():
    m = moments(from_points([[3.0]]), 2)
    assert m[0][0] == 3.0 and m[1][0, 0] == 9.0
    assert moments(from_points([[-1.0], [1.0]]), 1)[0][0] == 0.0
    m = moments(from_points([[0.0], [1.0], [2.0]]), 2)
    assert m[0][0] == pytest.approx(1.0) and m[1][0, 0] == pytest.approx(5 / 3)


def test_moments_order_checked():
    with pytest.raises(MeasureError):
        moments(from_points([[1.0]]), 0)


# --- Wasserstein ------------------------------------------------------------------


def test_w2_examples():
    assert wasserstein_p_1d(from_points([[0.0]]), from_points([[1.0]]), 2) == 1.0
    assert wasserstein_p_1d(from_points([[0.0], [2.0]]), from_points([[1.0], [3.0]]), 2) == pytest.approx(1.0)
    a = from_points([[0.0, 0.0], [1.0, 0.0]])
    b = from_points([[0.0, 0.0], [0.0, 1.0]])
    # both pairings cost (0 + 2) / 2 = (1 + 1) / 2 = 1
    assert wasserstein2_assignment(a, b) ** 2 == pytest.approx(1.0)
    assert wasserstein2_bruteforce(a, b) ** 2 == pytest.approx(1.0)
    assert wasserstein2_assignment(a, a) == 0.0


def test_assignment_matches_quantile_coupling():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a, b = from_points(rng.normal(size=16)), from_points(rng.normal(1, 2, size=16))
        assert abs(wasserstein2_assignment(a, b) - wasserstein_p_1d(a, b, 2)) < 1e-10


def test_unequal_weights_1d():
    # mass 1/2 at 0 must split between 0 and 1 in the target {0: 1/4, 1: 1/4, 2: 1/2}
    mu = from_points([[0.0], [2.0]])
    nu = from_points([[0.0], [1.0], [2.0]], [1, 1, 2])
    assert wasserstein_p_1d(mu, nu, 2) ** 2 == pytest.approx(0.25)
    assert wasserstein_p_1d(mu, nu, 1) == pytest.approx(0.25)


def test_assignment_guards():
    with pytest.raises(MeasureError):
        wasserstein2_assignment(from_points([[0.0]]), from_points([[0.0], [1.0]]))
    with pytest.raises(MeasureError):
        wasserstein2_assignment(from_points([[0.0], [1.0]], [1, 2]), from_points([[0.0], [1.0]]))
    with pytest.raises(MeasureError):
        wasserstein2_assignment(from_points(np.zeros(5)), from_points(np.zeros(5)), cap=4)
    with pytest.raises(MeasureError):
        wasserstein_p_1d(from_points([[0.0]]), from_points([[0.0]]), p=0.5)


@given(cloud(), cloud())
def test_w_p_metric_axioms_1d(x, y):
    mu, nu = from_points(x), from_points(y)
    for p in (1.0, 2.0, 3.0):
        d = wasserstein_p_1d(mu, nu, p)
        assert d >= 0
        assert wasserstein_p_1d(mu, mu, p) == 0.0
        assert d == pytest.approx(wasserstein_p_1d(nu, mu, p), rel=1e-12, abs=1e-12)


@given(cloud(), cloud(), cloud())
def test_w2_triangle_inequality(x, y, z):
    a, b, c = from_points(x), from_points(y), from_points(z)
    assert wasserstein_p_1d(a, c, 2) <= wasserstein_p_1d(a, b, 2) + wasserstein_p_1d(b, c, 2) + 1e-9


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(arrays(float, (n, 2), elements=coords),
                                                     arrays(float, (n, 2), elements=coords))))
def test_assignment_equals_bruteforce(pair):
    a, b = from_points(pair[0]), from_points(pair[1])
    assert wasserstein2_assignment(a, b) == pytest.approx(wasserstein2_bruteforce(a, b), rel=1e-12, abs=1e-12)


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(*(arrays(float, (n, 2), elements=coords) for _ in range(3)))))
def test_assignment_metric_axioms(trip):
    a, b, c = (from_points(t) for t in trip)
    ab = wasserstein2_assignment(a, b)
    assert ab == pytest.approx(wasserstein2_assignment(b, a), abs=1e-12)
    assert wasserstein2_assignment(a, a) == 0.0
    assert wasserstein2_assignment(a, c) <= ab + wasserstein2_assignment(b, c) + 1e-9


@given(st.integers(1, 6).flatmap(lambda n: arrays(float, (n, 1), elements=coords)))
def test_assignment_invariant_under_relabelling(x):
    mu = from_points(x)
    nu = from_points(x[::-1] + 1.0)
    # a translate is at distance |shift| whatever the atom order
    assert wasserstein2_assignment(mu, nu) == pytest.approx(1.0, abs=1e-9)
    assert wasserstein2_sorted(x[:, 0], x[::-1, 0]) == 0.0


def test_w2_to_gaussian_matches_quadrature():
    # closed-form blocks against a fine quantile-grid integral
    from scipy.special import ndtri

    x = np.random.default_rng(1).normal(0.3, 1.4, 9)
    u = (np.arange(200_000) + 0.5) / 200_000
    q = 0.5 + np.sqrt(2.0) * ndtri(u)
    ref = np.mean((np.sort(x)[np.minimum((u * 9).astype(int), 8)] - q) ** 2)
    assert wasserstein2_to_gaussian_1d(x, 0.5, 2.0) == pytest.approx(ref, rel=1e-4)


# --- quadrature and convolution ---------------------------------------------------


@pytest.mark.parametrize("order", [2, 5, 8])
def test_hermite_moments(order):
    z, w = hermite_rule(order)
    for k in range(2 * order):
        exact = 0.0 if k % 2 else float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0
        assert w @ z[:, 0] ** k == pytest.approx(exact, abs=1e-10 * max(1, exact))


def test_hermite_2d_covariance():
    mu = gaussian_measure([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]], order=6)
    np.testing.assert_allclose(mu.mean(), [1.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(mu.covariance(), [[2.0, 0.5], [0.5, 1.0]], atol=1e-12)


def test_gaussian_guards():
    with pytest.raises(MeasureError):
        gaussian_measure([0.0], [[-1.0]])
    with pytest.raises(MeasureError):
        GaussianLaw.of([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(MeasureError):
        hermite_rule(0)


def test_convolution_examples():
    nu0 = from_points([[0.0], [1.0], [3.0]], [1, 2, 1])
    shifted = convolve_gaussian(nu0, 2.0, 0.0).atoms()
    assert shifted.mean()[0] == pytest.approx(nu0.mean()[0] + 2.0)
    delta = convolve_gaussian(from_points([[0.0]]), 0.0, 0.7)
    assert delta.integrate(lambda y: y[:, 0] ** 2) == pytest.approx(0.7, rel=1e-12)
    conv = convolve_gaussian(nu0, 0.4, 1.3, order=8)
    var0 = nu0.covariance()[0, 0]
    exact = var0 + (nu0.mean()[0] + 0.4) ** 2 + 1.3
    assert conv.integrate(lambda y: y[:, 0] ** 2) == pytest.approx(exact, rel=1e-8)


def test_stratified_points_exact_moments():
    law = GaussianLaw.of([1.0], [[0.25]])
    x = stratified_points(law, 64)
    assert x.mean() == pytest.approx(1.0, abs=1e-12)
    assert x.var() == pytest.approx(0.25, rel=1e-12)
    emp = from_points([[0.0], [1.0]])
    assert np.array_equal(stratified_points(emp, 4)[:, 0], [0.0, 1.0, 0.0, 1.0])


def test_brute_force_small_enumeration():
    a = from_points([[0.0], [1.0], [5.0]])
    b = from_points([[4.0], [0.5], [1.0]])
    best = min(np.mean((a.points[:, 0] - b.points[list(p), 0]) ** 2) for p in itertools.permutations(range(3)))
    assert wasserstein2_bruteforce(a, b) ** 2 == pytest.approx(best)
