"""Per-coordinate maximal coupling of kicked trajectories.

Two copies of the system are driven so that their first N kicked
coordinates coincide as often as possible (each coordinate by a maximal
coupling of the two shifted kick laws) while the remaining coordinates
share literally the same kick draws.  On the all-agree event the pair
difference lives in the tail modes and contracts at the smoothing rate of
the map; the total-variation overlap computed by quadrature serves as the
exact oracle for every coupling probability.

The couplings are sampled in state space: on the agreement event both
components are assigned the same float, so agreement is bitwise and the
tail-kick identity holds exactly by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .rds_core import rng_stream

__all__ = [
    "tv_shifted",
    "tv_lipschitz",
    "decoupling_constant",
    "maximal_coupling_1d",
    "coupled_step",
    "coupled_trajectories",
    "squeezing_check",
    "feller_bound_check",
    "CoupledRun",
]


def tv_shifted(density, s, tol=1e-12):
    """Total variation distance between the density and its shift by s,
    1 - integral of the pointwise minimum (adaptive quadrature)."""
    lo, hi = density.support
    s = float(s)
    a, b = max(lo, lo + s), min(hi, hi + s)
    if a >= b:
        return 1.0
    pts = [x for x in (s / 2.0,) if a < x < b]
    overlap, _ = integrate.quad(
        lambda x: min(density.pdf(x), density.pdf(x - s)),
        a,
        b,
        points=pts or None,
        epsabs=tol,
        limit=200,
    )
    return float(min(1.0, max(0.0, 1.0 - overlap)))


def tv_lipschitz(density, n_grid=400):
    """Largest slope of s -> TV(p, p(. - s)), estimated on a fine grid."""
    lo, hi = density.support
    ss = np.linspace(0, hi - lo, n_grid)
    tv = np.array([tv_shifted(density, s) for s in ss])
    return float(np.max(np.diff(tv) / np.diff(ss)))


def decoupling_constant(law, N):
    """Union-bound constant: P(some coupled coordinate disagrees) is at most
    (sum over j <= N of Lip(TV)/b_j) times the state distance."""
    lip = tv_lipschitz(law.density)
    return float(lip * (1.0 / law.b[:N]).sum())


def maximal_coupling_1d(density, delta, b, rng):
    """Maximal coupling of b xi and delta + b xi' for xi, xi' ~ density.

    Returns (xi, xi_prime, coupled); the probability of the complement of
    ``coupled`` equals the total variation distance between the two laws.
    """
    if b <= 0:
        raise ValueError("b must be positive")
    s = float(delta) / b
    xi = float(density.sample(rng, 1)[0])
    # accept the common part: density of the shifted law at b xi
    if rng.random() * density.pdf(xi) <= density.pdf(xi - s):
        return xi, xi - s, True
    # residual of the shifted law, by rejection
    while True:
        y = float(density.sample(rng, 1)[0])
        if rng.random() * density.pdf(y) > density.pdf(y + s):
            return xi, y, False


def _residual_inverse(density, s, u, iters=60):
    """Exact samples from the residual density (p(x) - p(x - s))_+ / TV by
    inverting its CDF t -> (P(t) - P(t - s)) / TV with bisection.

    The residual CDF is monotone on (-support, s/2) for s > 0; negative
    shifts go through the mirror symmetry of the density.  Rejection from p
    would need O(1/TV) proposals per sample, which is hopeless for the tiny
    shifts produced by nearby pair states.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    sign = np.where(s >= 0, 1.0, -1.0)
    sa = np.abs(s)
    lo_sup, hi_sup = density.support
    tv = density.cdf(sa / 2.0) - density.cdf(sa / 2.0 - sa)
    target = u * tv
    lo = np.full(s.shape, float(lo_sup))
    hi = np.minimum(sa / 2.0, float(hi_sup))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = density.cdf(mid) - density.cdf(mid - sa)
        high = val > target
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
    return sign * 0.5 * (lo + hi)


def _coupled_coordinates(density, m1, m2, b, rng):
    """Vectorized maximal coupling of the state laws m1 + b xi, m2 + b xi.

    On the coupled event both outputs are the identical float; otherwise the
    two sides get independent samples of the respective residual laws.
    Returns (x1, x2, coupled).
    """
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    b = np.broadcast_to(np.asarray(b, dtype=float), m1.shape)
    s = (m1 - m2) / b
    xi = density.sample(rng, m1.shape)
    accept = rng.uniform(0.0, 1.0, m1.shape) * density.pdf(xi) <= density.pdf(xi + s)
    x1 = m1 + b * xi
    x2 = np.where(accept, x1, 0.0)
    need = ~accept
    if need.any():
        y = _residual_inverse(density, s[need], rng.random(int(need.sum())))
        x2[need] = m2[need] + b[need] * y
    return x1, x2, accept


def coupled_step(model, N, u, u_prime, rng):
    """One step of the coupled pair.

    Coordinates j <= N: per-coordinate maximal coupling of the shifted kick
    laws.  Coordinates j > N (within the kick range): identical draws, so
    the tail kicks agree bitwise.  Returns
    (u1, u1_prime, coupled_mask, kick, kick_prime).
    """
    U = np.vstack([u, u_prime])
    S = model.map.apply_batch(U)
    law = model.kicks
    N = int(min(N, law.dim))
    x1, x2, coupled = _coupled_coordinates(
        law.density, S[0, :N], S[1, :N], law.b[:N], rng
    )
    v1, v2 = S[0].copy(), S[1].copy()
    v1[:N], v2[:N] = x1, x2
    kick = np.zeros(law.dim)
    kick_prime = np.zeros(law.dim)
    kick[:N] = x1 - S[0, :N]
    kick_prime[:N] = x2 - S[1, :N]
    if law.dim > N:
        shared = law.b[N:] * law.density.sample(rng, law.dim - N)
        v1[N : law.dim] += shared
        v2[N : law.dim] += shared
        kick[N:] = shared
        kick_prime[N:] = shared
    return v1, v2, coupled, kick, kick_prime


@dataclass
class CoupledRun:
    """Coupled pair trajectories with per-step agreement bookkeeping.

    ``kicks`` stores the drawn kick vectors of both components; the tail
    block (coordinates beyond N) holds the identical floats for both, which
    is the bitwise form of the shared-tail-noise property.
    """

    states: np.ndarray  # (K+1, 2, dim)
    kicks: np.ndarray  # (K, 2, kick_dim)
    coupled: np.ndarray  # (K, N) agreement flags for the coupled block
    N: int
    seed: int
    stream: int

    @property
    def tail_kicks_equal(self):
        return bool(np.array_equal(self.kicks[:, 0, self.N :], self.kicks[:, 1, self.N :]))

    @property
    def agree_steps(self):
        """Number of leading steps with full agreement on the coupled block."""
        full = self.coupled.all(axis=1)
        out = 0
        for flag in full:
            if not flag:
                break
            out += 1
        return out


def coupled_trajectories(model, N, v, v_prime, K, seed=0, stream=0):
    """Run the coupled pair for K steps."""
    rng = rng_stream(seed, stream)
    dim = model.dim
    law = model.kicks
    N = int(min(N, law.dim))
    states = np.empty((K + 1, 2, dim))
    states[0, 0] = v
    states[0, 1] = v_prime
    kicks = np.empty((K, 2, law.dim))
    flags = np.empty((K, N), dtype=bool)
    u, up = np.asarray(v, dtype=float), np.asarray(v_prime, dtype=float)
    for k in range(K):
        u, up, coupled, kick, kick_prime = coupled_step(model, N, u, up, rng)
        states[k + 1, 0] = u
        states[k + 1, 1] = up
        kicks[k, 0] = kick
        kicks[k, 1] = kick_prime
        flags[k] = coupled
    return CoupledRun(states=states, kicks=kicks, coupled=flags, N=N, seed=seed, stream=stream)


@dataclass
class SqueezingReport:
    ratios: dict
    occurrences: dict
    gamma_N: float
    verdict: str


def squeezing_check(model, N, pairs, r_max, gamma_N, seed=0, tol=1e-2):
    """On the all-agree event through step r, the pair distance must obey
    ||u_r - u'_r|| <= (1 + tol) gamma_N^r ||u_0 - u'_0||.

    ``pairs`` is an (n, 2, dim) array of initial pairs, advanced as one
    batch; ``gamma_N`` is the empirical smoothing constant from the
    map-condition check.  Pairs whose agreement event never occurs make the
    report inconclusive at that r.
    """
    pairs = np.asarray(pairs, dtype=float)
    law = model.kicks
    N = int(min(N, law.dim))
    u = pairs[:, 0, :].copy()
    up = pairs[:, 1, :].copy()
    base = np.linalg.norm(u - up, axis=1)
    alive = base > 0  # degenerate pairs skipped
    rng = rng_stream(seed, 0)
    ratios = {}
    occurrences = {}
    for r in range(1, r_max + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            ratios[r] = np.empty(0)
            occurrences[r] = 0
            continue
        S = model.map.apply_batch(np.vstack([u[idx], up[idx]]))
        S1, S2 = S[: idx.size], S[idx.size :]
        x1, x2, coupled = _coupled_coordinates(
            law.density, S1[:, :N], S2[:, :N], np.broadcast_to(law.b[:N], (idx.size, N)), rng
        )
        u[idx], up[idx] = S1, S2
        u[idx, :N], up[idx, :N] = x1, x2
        if law.dim > N:
            shared = law.b[N:] * law.density.sample(rng, (idx.size, law.dim - N))
            u[idx, N : law.dim] += shared
            up[idx, N : law.dim] += shared
        agreed = coupled.all(axis=1)
        alive[idx[~agreed]] = False
        keep = idx[agreed]
        d = np.linalg.norm(u[keep] - up[keep], axis=1)
        ratios[r] = d / (gamma_N**r * base[keep])
        occurrences[r] = int(keep.size)
    worst = max((v.max() for v in ratios.values() if v.size), default=None)
    if worst is None:
        verdict = "inconclusive"
    else:
        verdict = "pass" if worst <= 1.0 + tol else "fail"
    return SqueezingReport(ratios=ratios, occurrences=occurrences, gamma_N=gamma_N, verdict=verdict)


@dataclass
class FellerCheckReport:
    C: float
    per_k_C: np.ndarray
    growing: bool
    inconclusive: list


def feller_bound_check(model, V, f_list, pairs, k_max, c, sup_mass, n_traj=4000, seed=0):
    """Smallest empirical constant C making the refined Feller bound hold
    over the sampled functions, pairs, and horizons.

    ``sup_mass[k-1]`` must estimate the sup over the attainable cloud of
    the weighted total mass at horizon k.  Cells whose Monte Carlo noise
    exceeds the bound's slack are recorded as inconclusive.
    """
    from .feynman_kac import mc_semigroup

    pairs = np.asarray(pairs, dtype=float)
    per_k = np.zeros(k_max)
    inconclusive = []
    for fi, (f, sup_f, lip_f) in enumerate(f_list):
        for pi, (v, vp) in enumerate(pairs):
            dist = np.linalg.norm(v - vp)
            if dist == 0:
                continue
            for k in range(1, k_max + 1):
                e1, s1, _ = mc_semigroup(model, V, f, v, k, n_traj, seed=seed + 7919 * fi + 31 * pi)
                e2, s2, _ = mc_semigroup(
                    model, V, f, vp, k, n_traj, seed=seed + 7919 * fi + 31 * pi + 1
                )
                lhs = abs(e1 - e2)
                noise = 3 * np.hypot(s1, s2)
                denom = sup_mass[k - 1] * dist
                need = (lhs / denom - (c**k) * lip_f) / max(sup_f, 1e-300)
                if lhs < noise and need > per_k[k - 1]:
                    inconclusive.append({"f": fi, "pair": pi, "k": k})
                    continue
                per_k[k - 1] = max(per_k[k - 1], need)
    per_k = np.maximum(per_k, 0.0)
    C = float(per_k.max())
    tail = per_k[k_max // 2 :]
    growing = bool(tail.size >= 2 and np.all(np.diff(tail) > 1e-12))
    return FellerCheckReport(C=C, per_k_C=per_k, growing=growing, inconclusive=inconclusive)
