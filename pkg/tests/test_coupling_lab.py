import numpy as np
import pytest
from scipy import stats

from fklab import coupling_lab as cl
from fklab import rds_core as rc
from fklab.dynamics_maps import ToyDiagonalMap


@pytest.fixture(scope="module")
def law():
    return rc.KickLaw.from_decay(6, b0=0.4, s=1.0)


@pytest.fixture(scope="module")
def model(law):
    toy = ToyDiagonalMap.geometric(6, base=0.7, ratio=0.8)
    return rc.RDSModel(map=toy, kicks=law, rho=1.0, contraction_factor=0.7)


def test_tv_quadrature_matches_closed_form(law):
    # symmetric unimodal density: overlap = 2 (1 - CDF(s/2)) for 0 <= s <= 2
    for s in (0.0, 0.2, 0.7, 1.4, 1.999, 2.5):
        quad_tv = cl.tv_shifted(law.density, s)
        closed = 1.0 if s > 2 else 1 - 2 * (1 - law.density.cdf(s / 2))
        assert quad_tv == pytest.approx(closed, abs=1e-10)


def test_tv_symmetry(law):
    for s in (0.3, 1.1):
        assert cl.tv_shifted(law.density, s) == pytest.approx(
            cl.tv_shifted(law.density, -s), abs=1e-10
        )


def test_maximal_coupling_identical_laws(law):
    rng = rc.rng_stream(0, 0)
    for _ in range(100):
        xi, xip, coupled = cl.maximal_coupling_1d(law.density, 0.0, 0.5, rng)
        assert coupled
        assert 0.5 * xi == pytest.approx(0.0 + 0.5 * xip, abs=1e-15)


def test_maximal_coupling_disjoint_supports(law):
    rng = rc.rng_stream(1, 0)
    for _ in range(100):
        xi, xip, coupled = cl.maximal_coupling_1d(law.density, 1.3, 0.5, rng)
        assert not coupled
        assert abs(xi) <= 1 and abs(xip) <= 1


def test_coupling_probability_matches_tv_oracle(law):
    rng = rc.rng_stream(2, 0)
    n = 400_000
    delta, b = 0.23, 0.4
    x1, x2, coupled = cl._coupled_coordinates(
        law.density, np.full(n, delta), np.zeros(n), b, rng
    )
    p_true = 1 - cl.tv_shifted(law.density, delta / b)
    sigma = np.sqrt(p_true * (1 - p_true) / n)
    z = (coupled.mean() - p_true) / sigma
    assert abs(z) < 3
    # never statistically above the optimum
    assert coupled.mean() <= p_true + 3 * sigma


def test_coupled_marginals_ks(law):
    rng = rc.rng_stream(3, 0)
    n = 400_000
    delta, b = 0.31, 0.4
    x1, x2, _ = cl._coupled_coordinates(law.density, np.full(n, delta), np.zeros(n), b, rng)
    assert stats.kstest((x1 - delta) / b, law.density.cdf).pvalue > 1e-3
    assert stats.kstest(x2 / b, law.density.cdf).pvalue > 1e-3


def test_coupled_step_identical_states(model):
    rng = rc.rng_stream(4, 0)
    u = np.full(6, 0.2)
    u1, u1p, coupled, kick, kickp = cl.coupled_step(model, 3, u, u.copy(), rng)
    assert coupled.all()
    assert np.array_equal(u1, u1p)
    assert np.array_equal(kick, kickp)


def test_coupled_step_zero_map_always_couples(law):
    tiny = ToyDiagonalMap(factors=np.full(6, 1e-300))
    model0 = rc.RDSModel(map=tiny, kicks=law, rho=1.0)
    rng = rc.rng_stream(5, 0)
    for _ in range(50):
        u1, u1p, coupled, _, _ = cl.coupled_step(model0, 4, np.full(6, 0.5), np.full(6, -0.5), rng)
        assert coupled.all()
        assert np.array_equal(u1[:4], u1p[:4])


def test_property_b_bitwise_along_runs(model):
    for i in range(10):
        v = np.full(6, 0.2) + 0.01 * i
        run = cl.coupled_trajectories(model, 3, v, v + 1e-3, K=12, seed=6, stream=i)
        assert run.tail_kicks_equal
        # agreement flags imply bitwise equality of the coupled block
        for k in range(12):
            agree = run.coupled[k]
            s1 = run.states[k + 1, 0, :3][agree]
            s2 = run.states[k + 1, 1, :3][agree]
            assert np.array_equal(s1, s2)


def test_decoupling_probability_linear_in_distance(model, law):
    # P(decouple in one step) <= C_N ||u - u'||, with the quadrature constant
    rng = rc.rng_stream(7, 0)
    N = 3
    C_N = cl.decoupling_constant(law, N)
    n = 200_000
    dist = 1e-3
    u = np.tile(np.full(6, 0.1), (n, 1))
    d = rng.normal(size=6)
    d /= np.linalg.norm(d)
    up = u + dist * d
    S1 = model.map.apply_batch(u)
    S2 = model.map.apply_batch(up)
    x1, x2, coupled = cl._coupled_coordinates(law.density, S1[:, :N], S2[:, :N], law.b[:N], rng)
    p_dec = 1 - coupled.all(axis=1).mean()
    assert p_dec <= C_N * dist
    # per-coordinate exact oracle (independent couplings)
    tvs = [cl.tv_shifted(law.density, abs(S1[0, j] - S2[0, j]) / law.b[j]) for j in range(N)]
    p_exact = 1 - np.prod([1 - t for t in tvs])
    sigma = np.sqrt(p_exact * (1 - p_exact) / n)
    assert abs(p_dec - p_exact) < 3 * sigma


def test_diagonal_map_never_decouples_after_agreement(model, law):
    # exactly diagonal map: once the leading block agrees, the shift stays
    # zero and the maximal coupling succeeds forever
    N = 3
    n_pairs = 20_000
    rng = rc.rng_stream(8, 0)
    base = rng.uniform(-0.2, 0.2, size=(n_pairs, 6))
    runs_alive = base + 0.05 * rng.normal(size=(n_pairs, 6))
    first_disagree = _decoupling_cascade(model, law, N, base, runs_alive, r_max=4, rng=rng)
    counts = np.array([(first_disagree == r).sum() for r in range(1, 5)])
    assert counts[0] > 0
    assert np.all(counts[1:] == 0)


def _decoupling_cascade(model, law, N, u, up, r_max, rng):
    n_pairs = u.shape[0]
    first_disagree = np.zeros(n_pairs, dtype=int)
    u, up = u.copy(), up.copy()
    alive = np.ones(n_pairs, dtype=bool)
    for r in range(1, r_max + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        S1 = model.map.apply_batch(u[idx])
        S2 = model.map.apply_batch(up[idx])
        x1, x2, coupled = cl._coupled_coordinates(
            law.density, S1[:, :N], S2[:, :N], law.b[:N], rng
        )
        ok = coupled.all(axis=1)
        u[idx] = S1
        up[idx] = S2
        u[idx, :N] = x1
        up[idx, :N] = x2
        shared = rc.sample_kicks(law, rng, idx.size)[:, N:]
        u[idx, N:] += shared
        up[idx, N:] += shared
        first_disagree[idx[~ok]] = r
        alive[idx[~ok]] = False
    return first_disagree


def test_decoupling_log_tail_slope(law):
    # with a genuine tail-to-head coupling the first-disagreement law decays
    # at least at the empirical smoothing rate
    toy = ToyDiagonalMap.geometric(6, base=0.7, ratio=0.8, q=0.35, cutoff_radius=1.5)
    model = rc.RDSModel(map=toy, kicks=law, rho=1.0)
    plan = rc.SamplePlan(radii=(0.5,), r=0.3, projection_dims=(3,), seed=2)
    gamma_N = rc.verify_map_conditions(model, plan)["smoothing"]["gamma_N"][3]
    N = 3
    n_pairs = 400_000
    rng = rc.rng_stream(9, 0)
    base = rng.uniform(-0.2, 0.2, size=(n_pairs, 6))
    up = base + 0.02 * rng.normal(size=(n_pairs, 6))
    first_disagree = _decoupling_cascade(model, law, N, base, up, r_max=4, rng=rng)
    counts = np.array([(first_disagree == r).sum() for r in range(1, 5)])
    probs = counts / n_pairs
    keep = probs > 1e-5
    rs = np.arange(1, 5)[keep]
    assert keep.sum() >= 3
    slope = np.polyfit(rs, np.log(probs[keep]), 1)[0]
    assert slope <= np.log(gamma_N) + 0.3


def test_squeezing_toy_exact_alignment(model):
    # difference along mode N+1 survives coupling untouched and contracts at
    # exactly gamma_{N+1} per step
    N = 3
    gamma_N = model.map.factors[N]
    v = np.full(6, 0.1)
    e = np.zeros(6)
    e[N] = 1e-6
    pairs = np.stack([np.tile(v, (64, 1)), np.tile(v + e, (64, 1))], axis=1)
    rep = cl.squeezing_check(model, N, pairs, r_max=4, gamma_N=gamma_N, seed=9)
    assert rep.verdict == "pass"
    for r, ratios in rep.ratios.items():
        if len(ratios):
            assert ratios.max() == pytest.approx(1.0, abs=1e-6)


def test_squeezing_random_pairs(model):
    rng = rc.rng_stream(10, 0)
    base = rng.uniform(-0.3, 0.3, size=(300, 6))
    pairs = np.stack([base, base + 1e-3 * rng.normal(size=base.shape)], axis=1)
    rep = cl.squeezing_check(model, 3, pairs, r_max=6, gamma_N=model.map.factors[3], seed=11)
    assert rep.verdict == "pass"
    assert all(rep.occurrences[r] > 0 for r in range(1, 7))


def test_squeezing_degenerate_pairs_skipped(model):
    v = np.full(6, 0.2)
    pairs = np.stack([np.tile(v, (5, 1)), np.tile(v, (5, 1))], axis=1)
    rep = cl.squeezing_check(model, 3, pairs, r_max=3, gamma_N=model.map.factors[3], seed=12)
    assert rep.verdict == "inconclusive"


def test_feller_bound_check_trivial_cases(model):
    from fklab import feynman_kac as fk

    V0 = fk.PotentialFn.zero()
    ones = (lambda U: np.ones(U.shape[0]), 1.0, 0.0)
    pairs = np.stack([np.full((2, 6), 0.2), np.full((2, 6), 0.2)], axis=1)
    sup_mass = np.ones(3)
    rep = cl.feller_bound_check(model, V0, [ones], pairs, k_max=3, c=0.5, sup_mass=sup_mass, n_traj=500, seed=13)
    # f = 1 under V = 0: both sides conserve mass, C = 0 suffices
    assert rep.C == 0.0
    assert not rep.growing
