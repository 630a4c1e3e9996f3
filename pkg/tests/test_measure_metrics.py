import numpy as np
import pytest

from fklab.measure_metrics import (
    DiscreteMeasure,
    dual_lipschitz,
    kantorovich_theta,
    verify_metric_sandwich,
)


def dirac(x):
    return DiscreteMeasure.dirac(np.atleast_1d(x))


def random_measure(rng, m=5, d=2, scale=1.0):
    return DiscreteMeasure(rng.uniform(-scale, scale, size=(m, d)), rng.dirichlet(np.ones(m)))


def test_dual_lipschitz_identical_measures(rng):
    mu = random_measure(rng)
    assert dual_lipschitz(mu, mu) == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("x", [0.25, 1.0, 2.0, 7.5, 1e6])
def test_dual_lipschitz_dirac_closed_form(x):
    # optimum of min(2s, t x) under s + t = 1 is 2x / (x + 2)
    val = dual_lipschitz(dirac(0.0), dirac(x))
    assert val == pytest.approx(2 * x / (x + 2), abs=1e-9)


def test_dual_lipschitz_saturates_at_two():
    assert dual_lipschitz(dirac(0.0), dirac(1e9)) == pytest.approx(2.0, abs=1e-6)


def test_dual_lipschitz_symmetry(rng):
    a, b = random_measure(rng), random_measure(rng)
    assert dual_lipschitz(a, b) == pytest.approx(dual_lipschitz(b, a), abs=1e-10)


def test_kantorovich_dirac_pair_is_truncated_distance():
    assert kantorovich_theta(dirac(0.0), dirac(0.1), 4.0) == pytest.approx(0.4, abs=1e-10)
    assert kantorovich_theta(dirac(0.0), dirac(0.5), 4.0) == pytest.approx(1.0, abs=1e-10)


def test_kantorovich_two_atom_brute_force(rng):
    # one-parameter family of plans between two 2-atom measures on a line
    for _ in range(25):
        x = np.sort(rng.uniform(-1, 1, 2))
        y = np.sort(rng.uniform(-1, 1, 2))
        a = float(rng.uniform(0.05, 0.95))
        b = float(rng.uniform(0.05, 0.95))
        theta = float(rng.uniform(0.5, 5.0))
        mu1 = DiscreteMeasure(x[:, None], [a, 1 - a])
        mu2 = DiscreteMeasure(y[:, None], [b, 1 - b])
        cost = np.minimum(1.0, theta * np.abs(x[:, None] - y[None, :]))
        lo = max(0.0, a - (1 - b))
        hi = min(a, b)
        grid = np.linspace(lo, hi, 2001)
        vals = (
            grid * cost[0, 0]
            + (a - grid) * cost[0, 1]
            + (b - grid) * cost[1, 0]
            + (1 - a - b + grid) * cost[1, 1]
        )
        assert kantorovich_theta(mu1, mu2, theta) == pytest.approx(vals.min(), abs=1e-6)


def test_kantorovich_requires_probability(rng):
    bad = DiscreteMeasure(rng.normal(size=(3, 1)), [0.2, 0.2, 0.2])
    good = random_measure(rng, m=3, d=1)
    with pytest.raises(ValueError):
        kantorovich_theta(bad, good, 1.0)


def test_kantorovich_monotone_in_theta(rng):
    a, b = random_measure(rng), random_measure(rng)
    thetas = [0.25, 0.5, 1.0, 2.0, 4.0]
    vals = [kantorovich_theta(a, b, t) for t in thetas]
    assert all(v2 >= v1 - 1e-10 for v1, v2 in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)


def test_triangle_inequality_on_random_triples(rng):
    for _ in range(15):
        a, b, c = (random_measure(rng, m=4) for _ in range(3))
        for dist in (dual_lipschitz, lambda u, v: kantorovich_theta(u, v, 2.0)):
            dab, dbc, dac = dist(a, b), dist(b, c), dist(a, c)
            assert dac <= dab + dbc + 1e-9


def test_vanishes_only_on_equal_measures(rng):
    pts = rng.normal(size=(4, 2))
    w = rng.dirichlet(np.ones(4))
    a = DiscreteMeasure(pts, w)
    b = DiscreteMeasure(pts[::-1].copy(), w[::-1].copy())  # same measure, reordered
    assert dual_lipschitz(a, b) == pytest.approx(0.0, abs=1e-10)
    assert kantorovich_theta(a, b, 1.0) == pytest.approx(0.0, abs=1e-10)
    c = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)))
    assert dual_lipschitz(a, c) > 1e-4


def test_support_merge_dedupes():
    m = DiscreteMeasure(np.array([[0.0], [0.0], [1.0]]), [0.25, 0.25, 0.5])
    assert m.support.shape[0] == 2
    assert m.weights.sum() == pytest.approx(1.0)
    assert sorted(m.weights) == pytest.approx([0.5, 0.5])


def test_sandwich_identical_measures(rng):
    mu = random_measure(rng)
    rep = verify_metric_sandwich(mu, mu, theta=1.0, diam=4.0)
    assert rep.ok
    assert rep.kantorovich == pytest.approx(0.0, abs=1e-10)
    assert rep.dual_lip == pytest.approx(0.0, abs=1e-10)


def test_sandwich_dirac_pair_at_diameter():
    diam = 3.0
    rep = verify_metric_sandwich(dirac(0.0), dirac(diam), theta=1.0 / diam, diam=diam)
    assert rep.ok
    assert rep.kantorovich == pytest.approx(1.0, abs=1e-10)


def test_sandwich_random_pairs(rng):
    for _ in range(100):
        a, b = random_measure(rng, m=5), random_measure(rng, m=5)
        theta = float(rng.uniform(0.5, 4.0))
        rep = verify_metric_sandwich(a, b, theta=theta, diam=2 * np.sqrt(2) + 0.1)
        assert rep.ok


def test_sandwich_rejects_small_theta():
    with pytest.raises(ValueError):
        verify_metric_sandwich(dirac(0.0), dirac(1.0), theta=0.01, diam=2.0)
