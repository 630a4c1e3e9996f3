import numpy as np
import pytest

from fklab.dynamics_maps import BurgersMap, ToyDiagonalMap, l1_circle_metric


@pytest.fixture(scope="module")
def burgers():
    return BurgersMap(nu=1.0, modes=32, dt=1e-3)


def smooth_state(rng, dim, norm, decay=0.3):
    v = rng.normal(size=dim) * np.exp(-decay * np.arange(dim))
    return v * (norm / np.linalg.norm(v))


def test_zero_is_fixed_point(burgers):
    assert np.abs(burgers.apply(np.zeros(burgers.dim))).max() == 0.0


def test_parseval(burgers, rng):
    v = smooth_state(rng, burgers.dim, 0.7)
    phys = burgers.physical(v)
    G = phys.shape[-1]
    l2 = np.sqrt(2 * np.pi / G * (phys**2).sum())
    assert l2 == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_small_amplitude_heat_decay(burgers):
    # a single low mode at tiny amplitude follows the linear heat flow
    for a in (1e-3, 5e-4):
        u = np.zeros(burgers.dim)
        u[0] = a
        out = np.linalg.norm(burgers.apply(u))
        assert out == pytest.approx(a * np.exp(-burgers.nu), rel=0.05)


def test_energy_decay_and_poincare_bound(burgers, rng):
    for norm in (0.2, 0.6, 1.0):
        v = smooth_state(rng, burgers.dim, norm)
        w = burgers.apply(v)
        ratio = np.linalg.norm(w) / np.linalg.norm(v)
        # lowest-frequency convention: Poincare constant one on the circle
        assert ratio <= np.exp(-burgers.nu) + 1e-10
        assert ratio > 0


def test_energy_strictly_decreasing_along_flow(rng):
    bm = BurgersMap(nu=0.3, modes=24, dt=2e-3)
    v = smooth_state(rng, bm.dim, 1.0)
    norms = [np.linalg.norm(v)]
    for _ in range(4):
        v = bm.apply(v)
        norms.append(np.linalg.norm(v))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_spectral_convergence_under_mode_doubling(rng):
    b1 = BurgersMap(nu=0.5, modes=32, dt=1e-3)
    b2 = BurgersMap(nu=0.5, modes=64, dt=1e-3)
    v = smooth_state(rng, b1.dim, 0.5, decay=0.4)
    v2 = np.zeros(b2.dim)
    v2[: b1.dim] = v
    o1 = b1.apply(v)
    o2 = b2.apply(v2)
    diff = np.sqrt(np.linalg.norm(o2[: b1.dim] - o1) ** 2 + np.linalg.norm(o2[b1.dim :]) ** 2)
    assert diff < 1e-6


def test_time_step_order_two(rng):
    # Richardson slopes against a fine reference; ETDRK2 is second order
    ref = BurgersMap(nu=0.3, modes=24, dt=1.25e-4)
    v = smooth_state(rng, ref.dim, 0.8)
    target = ref.apply(v)
    errs = []
    dts = [2e-3, 1e-3, 5e-4]
    for dt in dts:
        errs.append(np.linalg.norm(BurgersMap(nu=0.3, modes=24, dt=dt).apply(v) - target))
    slopes = np.diff(np.log(errs)) / np.diff(np.log(dts))
    assert np.all(np.abs(slopes - 2.0) < 0.2)


def test_l1_subcontraction_sampled(burgers, rng):
    n = 300
    base = rng.normal(size=(n, burgers.dim)) * np.exp(-0.25 * np.arange(burgers.dim))
    base *= 0.6 * rng.random((n, 1)) / np.maximum(np.linalg.norm(base, axis=1, keepdims=True), 1e-12)
    other = base + 0.2 * rng.normal(size=base.shape) * np.exp(-0.25 * np.arange(burgers.dim))
    metric = l1_circle_metric(burgers)
    num = metric(burgers.apply_batch(base), burgers.apply_batch(other))
    den = metric(base, other)
    assert np.all(num <= (1 + 1e-6) * den)


def test_burgers_blowup_detection():
    bm = BurgersMap(nu=1e-4, modes=16, dt=0.25)
    huge = np.full(bm.dim, 2e3)
    with pytest.raises(FloatingPointError):
        bm.apply(huge)


def test_toy_map_zero_and_linearity(rng):
    toy = ToyDiagonalMap.geometric(5, base=0.7, ratio=0.8)
    assert np.all(toy.apply(np.zeros(5)) == 0)
    u = rng.normal(size=5)
    # q = 0: exactly diagonal
    assert np.allclose(toy.apply(u), toy.factors * u)
    n = 3
    for k in range(1, 4):
        v = u.copy()
        for _ in range(k):
            v = toy.apply(v)
        assert np.linalg.norm(v) <= toy.factors[0] ** k * np.linalg.norm(u) + 1e-12


def test_toy_map_tail_projection_constant(rng):
    toy = ToyDiagonalMap.geometric(6, base=0.9, ratio=0.75)
    u = rng.normal(size=6)
    for N in (1, 3, 5):
        e = np.zeros(6)
        e[N] = 1.0
        diff = toy.apply(u + 1e-4 * e) - toy.apply(u)
        assert np.linalg.norm(diff[N:]) / 1e-4 == pytest.approx(toy.factors[N], rel=1e-9)


def test_toy_map_quadratic_coupling_smooth(rng):
    toy = ToyDiagonalMap.geometric(4, base=0.6, ratio=0.8, q=0.2, cutoff_radius=2.0)
    u = rng.normal(size=4) * 0.5
    out = toy.apply(u)
    assert np.all(np.isfinite(out))
    # reproducibility of the nonlinear branch
    assert np.array_equal(out, toy.apply(u))


def test_toy_map_rejects_bad_factors():
    with pytest.raises(ValueError):
        ToyDiagonalMap(factors=np.array([0.5, 0.7]))
    with pytest.raises(ValueError):
        ToyDiagonalMap(factors=np.array([0.5, -0.1]))
