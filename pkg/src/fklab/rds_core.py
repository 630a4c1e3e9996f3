"""Kick-forced random dynamical system: noise, trajectories, statistics.

The state recursion is ``u_k = S(u_{k-1}) + eta_k`` where ``S`` is a
deterministic time-one map (see :mod:`fklab.dynamics_maps`) and the kick
``eta`` has independent coordinates ``b_j xi_j`` with a common compactly
supported density.  Counter-based Philox streams keyed by
``(master seed, stream id)`` make every trajectory bitwise reproducible and
independent of how callers parallelize.

A finite Markov chain on embedded points is provided as a second model type
so the Monte Carlo estimators can be cross-checked against the exact
finite-state computations of :mod:`fklab.kernel_lab`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree

__all__ = [
    "QuarticBumpDensity",
    "KickLaw",
    "RDSModel",
    "FiniteChainModel",
    "Trajectory",
    "rng_stream",
    "sample_kick",
    "sample_kicks",
    "simulate",
    "simulate_ensemble",
    "attainability_cloud",
    "attainability_hausdorff",
    "hausdorff_distance",
    "hitting_time_stats",
    "attraction_counter",
    "verify_map_conditions",
    "SamplePlan",
]


def rng_stream(seed, stream=0):
    """Philox generator keyed by (seed, stream); streams never collide."""
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64(stream & (2**64 - 1))])
    return np.random.Generator(np.random.Philox(key=key))


class QuarticBumpDensity:
    """p(x) = (15/16)(1 - x^2)^2 on [-1, 1].

    Continuously differentiable, positive at the origin, supported in the
    unit interval; sampled by rejection from the uniform envelope with
    acceptance 8/15 per proposal round.
    """

    name = "quartic_bump"
    support = (-1.0, 1.0)

    @staticmethod
    def pdf(x):
        x = np.asarray(x, dtype=float)
        inside = np.abs(x) <= 1.0
        return np.where(inside, 15.0 / 16.0 * (1.0 - x**2) ** 2, 0.0)

    @staticmethod
    def cdf(x):
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        return 15.0 / 16.0 * (x - 2.0 * x**3 / 3.0 + x**5 / 5.0) + 0.5

    @staticmethod
    def sample(rng, size):
        total = int(np.prod(size))
        out = np.empty(total)
        need = np.ones(total, dtype=bool)
        while need.any():
            k = int(need.sum())
            x = rng.uniform(-1.0, 1.0, k)
            u = rng.uniform(0.0, 1.0, k)
            ok = u <= (1.0 - x**2) ** 2
            idx = np.flatnonzero(need)[ok]
            out[idx] = x[ok]
            need[idx] = False
        return out.reshape(size)


DENSITIES = {QuarticBumpDensity.name: QuarticBumpDensity}


@dataclass(frozen=True)
class KickLaw:
    """Coordinate kick law: eta_j = b_j xi_j with xi_j i.i.d. ~ density.

    ``b0`` and ``s`` record the decay profile when built from
    ``from_decay`` (b_j = b0 j^-s, square-summable for s > 1/2).
    """

    dim: int
    b: np.ndarray
    density_kind: str = "quartic_bump"
    b0: float | None = None
    s: float | None = None

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        object.__setattr__(self, "b", b)
        if b.shape != (self.dim,):
            raise ValueError("b must have length dim")
        if np.any(b <= 0):
            raise ValueError("all b_j must be positive")
        if self.density_kind not in DENSITIES:
            raise ValueError(f"unknown density {self.density_kind}")
        if self.s is not None and self.s <= 0.5:
            raise ValueError("decay exponent must exceed 1/2 for square-summability")

    @classmethod
    def from_decay(cls, dim, b0=0.3, s=1.0):
        j = np.arange(1, dim + 1, dtype=float)
        return cls(dim=dim, b=b0 * j ** (-s), b0=b0, s=s)

    @property
    def density(self):
        return DENSITIES[self.density_kind]

    @property
    def radius(self):
        """Norm bound sqrt(sum b_j^2) valid for every sample."""
        return float(np.sqrt((self.b**2).sum()))

    def validate_density(self, tol=1e-10):
        """Quadrature check of the density contract (mass one, positive at 0,
        support in [-1, 1])."""
        p = self.density
        mass, err = integrate.quad(p.pdf, -1.0, 1.0, epsabs=1e-13)
        assert abs(mass - 1.0) <= tol, f"density mass {mass} off by more than {tol}"
        assert p.pdf(0.0) > 0
        assert p.pdf(1.5) == 0 and p.pdf(-1.5) == 0
        return mass, err


def sample_kick(law: KickLaw, rng):
    """One kick vector; coordinate-wise |eta_j| <= b_j always."""
    return law.b * law.density.sample(rng, law.dim)


def sample_kicks(law: KickLaw, rng, n):
    """(n, dim) batch of kicks from a single stream."""
    xi = law.density.sample(rng, (n, law.dim))
    return xi * law.b[None, :]


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (K+1, dim)
    seed: int
    stream: int

    def __len__(self):
        return self.states.shape[0]


@dataclass(frozen=True)
class RDSModel:
    """Kick-forced model u_k = S(u_{k-1}) + eta_k.

    ``map`` must provide ``apply(u)`` and ``apply_batch(U)``; the kick acts
    on the first ``kicks.dim`` coordinates.  ``rho`` is the absorbing radius
    from the dissipativity condition; ``contraction_factor`` may record an
    empirical Lipschitz bound < 1 used to justify settling shortcuts.
    """

    map: object
    kicks: KickLaw
    rho: float
    contraction_factor: float | None = None

    def __post_init__(self):
        if self.kicks.dim > self.dim:
            raise ValueError("kick dimension exceeds state dimension")
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def dim(self):
        return self.map.dim

    def step(self, u, rng):
        v = self.map.apply(u)
        v[: self.kicks.dim] += sample_kick(self.kicks, rng)
        return v

    def step_many(self, U, rngs):
        """One step of an ensemble; ``rngs`` is one generator per row (the
        per-trajectory stream contract) or a single shared generator."""
        V = self.map.apply_batch(U)
        if isinstance(rngs, np.random.Generator):
            V[:, : self.kicks.dim] += sample_kicks(self.kicks, rngs, U.shape[0])
        else:
            for i, rng in enumerate(rngs):
                V[i, : self.kicks.dim] += sample_kick(self.kicks, rng)
        return V


@dataclass(frozen=True)
class FiniteChainModel:
    """Markov chain on n embedded points with row-stochastic matrix P.

    States travel as coordinate vectors so every downstream statistic
    (occupation measures, potentials, metrics) treats both model types
    uniformly; indices are recovered by nearest-point lookup.
    """

    points: np.ndarray
    P: np.ndarray
    _tree: cKDTree = field(repr=False, compare=False, default=None)
    _cum: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        P = np.asarray(self.P, dtype=float)
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("chain rows must sum to one")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "_tree", cKDTree(pts))
        object.__setattr__(self, "_cum", np.cumsum(P, axis=1))

    @classmethod
    def from_kernel(cls, kernel):
        return cls(points=kernel.points, P=kernel.P)

    @property
    def dim(self):
        return self.points.shape[1]

    def index_of(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        _, idx = self._tree.query(U)
        return idx

    def step_indices(self, idx, rng):
        u = rng.random(idx.shape[0])
        cum = self._cum[idx]
        nxt = (u[:, None] > cum).sum(axis=1)
        return np.minimum(nxt, self.P.shape[0] - 1)

    def step(self, u, rng):
        i = self.index_of(u[None, :])[0]
        j = self.step_indices(np.array([i]), rng)[0]
        return self.points[j].copy()

    def step_many(self, U, rngs):
        idx = self.index_of(U)
        if isinstance(rngs, np.random.Generator):
            nxt = self.step_indices(idx, rngs)
        else:
            nxt = np.array([self.step_indices(idx[i : i + 1], rng)[0] for i, rng in enumerate(rngs)])
        return self.points[nxt].copy()


def simulate(model, u0, K, seed, stream=0):
    """Trajectory of length K from u0, bitwise-deterministic per
    (model, seed, stream, u0)."""
    u0 = np.asarray(u0, dtype=float)
    if not np.all(np.isfinite(u0)):
        raise ValueError("u0 must be finite")
    rng = rng_stream(seed, stream)
    states = np.empty((K + 1, u0.shape[0]))
    states[0] = u0
    u = u0.copy()
    for k in range(1, K + 1):
        u = model.step(u, rng)
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) > 1e8:
            raise FloatingPointError(f"state blew up at step {k}")
        states[k] = u
    return Trajectory(states=states, seed=seed, stream=stream)


def simulate_ensemble(model, U0, K, seed, streams=None, shared=False, keep="all"):
    """Ensemble simulation with batched map application.

    With ``shared=False`` each trajectory i consumes its own Philox stream
    ``streams[i]`` and reproduces :func:`simulate` bitwise.  ``shared=True``
    draws all kicks from the single stream (seed, 0); this is faster and
    still deterministic per seed, and is what the plain Monte Carlo
    statistics use.  ``keep`` is "all" (full paths) or "last".
    """
    U = np.atleast_2d(np.asarray(U0, dtype=float)).copy()
    n = U.shape[0]
    if shared:
        rngs = rng_stream(seed, 0)
    else:
        if streams is None:
            streams = np.arange(n)
        rngs = [rng_stream(seed, int(s)) for s in streams]
    if keep == "all":
        out = np.empty((K + 1, n, U.shape[1]))
        out[0] = U
    for k in range(1, K + 1):
        U = model.step_many(U, rngs)
        if keep == "all":
            out[k] = U
    return out if keep == "all" else U


def hausdorff_distance(X, Y):
    """Symmetric Hausdorff distance between two point clouds."""
    tx, ty = cKDTree(X), cKDTree(Y)
    d_xy = tx.query(Y)[0].max()
    d_yx = ty.query(X)[0].max()
    return float(max(d_xy, d_yx))


def _kick_mesh(law, rng, n):
    """Mesh of the kick support (uniform over the product of [-b_j, b_j]),
    always containing the zero kick."""
    mesh = rng.uniform(-1.0, 1.0, size=(n, law.dim)) * law.b[None, :]
    mesh[0] = 0.0
    return mesh


def attainability_cloud(model, B, k, seed=0, kicks_per_point=8, max_points=10_000):
    """Monte Carlo outer approximation of the k-step attainability set from
    the sample cloud ``B``: push forward through S and add meshed kicks,
    subsampling to ``max_points`` per stage."""
    cloud = np.atleast_2d(np.asarray(B, dtype=float))
    if cloud.size == 0:
        raise ValueError("B must be a nonempty sample")
    rng = rng_stream(seed, 987)
    for _ in range(int(k)):
        img = model.map.apply_batch(cloud)
        kicks = _kick_mesh(model.kicks, rng, kicks_per_point)
        new = np.repeat(img, kicks_per_point, axis=0)
        tiled = np.tile(kicks, (img.shape[0], 1))
        new[:, : model.kicks.dim] += tiled
        if new.shape[0] > max_points:
            sel = rng.choice(new.shape[0], size=max_points, replace=False)
            new = new[sel]
        cloud = new
    return cloud


def attainability_hausdorff(model, R, eps_grid, k, n_samples=400, seed=0):
    """d_H between attainability clouds from B_R and B_{R+eps} over a
    decreasing eps grid (empirical check of the Hausdorff continuity)."""
    rng = rng_stream(seed, 55)
    dim = model.dim

    def ball_sample(radius, n):
        x = rng.normal(size=(n, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        r = radius * rng.random(n) ** (1.0 / dim)
        return x * r[:, None]

    base_pts = ball_sample(R, n_samples)
    base = attainability_cloud(model, base_pts, k, seed=seed)
    gaps = []
    for eps in sorted(eps_grid, reverse=True):
        pts = np.vstack([base_pts, ball_sample(R + eps, n_samples)])
        enlarged = attainability_cloud(model, pts, k, seed=seed)
        gaps.append((float(eps), hausdorff_distance(enlarged, base)))
    return gaps


@dataclass
class HittingReport:
    taus: dict
    delta: float
    censored_fraction: float
    horizon: int


def hitting_time_stats(model, u0s, eps, n_traj=1000, horizon=1000, seed=0, target=2.0):
    """First hitting times of the ball B_eps around the origin and the
    largest exponent with empirical exp-moment below ``target``.

    Censored trajectories (no hit within the horizon) are excluded from the
    moment and reported as a fraction; the returned delta is then a bound
    for the observed part only.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    taus = {}
    censored = 0
    total = 0
    for m, u0 in enumerate(np.atleast_2d(np.asarray(u0s, dtype=float))):
        rng = rng_stream(seed, m)
        U = np.tile(u0, (n_traj, 1))
        alive = np.ones(n_traj, dtype=bool)
        tau = np.full(n_traj, horizon + 1, dtype=int)
        hit0 = np.linalg.norm(U, axis=1) <= eps
        tau[hit0] = 0
        alive[hit0] = False
        k = 0
        while alive.any() and k < horizon:
            k += 1
            idx = np.flatnonzero(alive)
            U[idx] = model.step_many(U[idx], rng)
            hit = np.linalg.norm(U[idx], axis=1) <= eps
            tau[idx[hit]] = k
            alive[idx[hit]] = False
        taus[tuple(np.round(u0, 12))] = tau
        censored += int((tau > horizon).sum())
        total += n_traj

    def exp_moment(delta):
        worst = 0.0
        for tau in taus.values():
            obs = tau[tau <= horizon]
            if obs.size == 0:
                return np.inf
            worst = max(worst, float(np.exp(delta * obs).mean()))
        return worst

    lo, hi = 0.0, 1.0
    while exp_moment(hi) <= target and hi < 50:
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if exp_moment(mid) <= target:
            lo = mid
        else:
            hi = mid
    return HittingReport(
        taus=taus, delta=lo, censored_fraction=censored / total, horizon=horizon
    )


@dataclass
class AttractionReport:
    counts: np.ndarray
    Lambda: float
    delta: float
    alpha_moment: float
    censored_fraction: float
    resolution: float


def attraction_counter(
    model,
    cloud,
    eps,
    u0s,
    n_traj=1000,
    horizon=400,
    seed=0,
    settle_steps=25,
    settle_frac=0.75,
):
    """Counts N = #{m >= 1 : u_m farther than eps from the attractor cloud}
    per trajectory, with a log-tail fit P(N >= m) <= Lambda exp(-delta m).

    ``eps`` must exceed the cloud resolution (max nearest-neighbor spacing).
    A trajectory stops consuming steps once it has stayed within
    ``settle_frac * eps`` of the cloud for ``settle_steps`` consecutive
    steps, but only when that is provably final: the map must record a
    contraction factor ``cf < 1`` and the settled distance must satisfy
    settle_frac * cf + resolution / eps <= 0.95, so the next cloud distance
    stays below eps forever (cloud points are attainable, hence the true
    attractor distance is at most the cloud distance).
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    tree = cKDTree(cloud)
    spacing = tree.query(cloud, k=2)[0][:, 1].max()
    if eps < spacing:
        raise ValueError(f"eps={eps} below cloud resolution {spacing:.3g}")
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    reps = int(np.ceil(n_traj / u0s.shape[0]))
    U = np.repeat(u0s, reps, axis=0)[:n_traj].copy()
    n = U.shape[0]
    rng = rng_stream(seed, 0)
    counts = np.zeros(n, dtype=int)
    settled = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    cf = model.contraction_factor
    can_settle = cf is not None and cf < 1 and settle_frac * cf + spacing / eps <= 0.95
    for _ in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        U[idx] = model.step_many(U[idx], rng)
        dist = tree.query(U[idx])[0]
        counts[idx] += dist > eps
        if can_settle:
            inside = dist <= settle_frac * eps
            settled[idx] = np.where(inside, settled[idx] + 1, 0)
            active[idx[settled[idx] >= settle_steps]] = False
    censored = float(active.sum()) / n

    ms = np.arange(1, counts.max() + 1) if counts.max() > 0 else np.array([1])
    tail = np.array([(counts >= m).mean() for m in ms])
    keep = tail > 0
    if keep.sum() >= 2:
        slope, intercept = np.polyfit(ms[keep], np.log(tail[keep]), 1)
        delta = -float(slope)
        Lambda = float(np.exp(intercept))
    else:
        # mass concentrated at N = 0: any positive rate certifies the tail
        delta, Lambda = np.inf, 1.0
    alpha = delta / 2 if np.isfinite(delta) else 1.0
    alpha_moment = float(np.exp(np.minimum(alpha * counts, 700)).mean())
    return AttractionReport(
        counts=counts,
        Lambda=Lambda,
        delta=delta,
        alpha_moment=alpha_moment,
        censored_fraction=censored,
        resolution=float(spacing),
    )


@dataclass
class SamplePlan:
    """Sampling plan for the map-condition checks."""

    radii: tuple = (1.0, 2.0)
    r: float = 0.5
    n_samples: int = 200
    n_iter: int = 12
    projection_dims: tuple = (1, 2, 4, 8)
    n_pairs: int = 500
    d_prime: object = None  # metric for the subcontraction check
    pair_cloud: np.ndarray | None = None
    seed: int = 0


def verify_map_conditions(model, plan: SamplePlan):
    """Empirical check of dissipativity, smoothing, and subcontraction.

    Returns a dict with, per radius, the iterated decay profile and the
    first iterate count n0 from which the empirical factor stays below one;
    the per-N smoothing constants gamma_N with a monotone-decay verdict; and
    the worst subcontraction ratio over sampled pairs when a metric is
    supplied.
    """
    rng = rng_stream(plan.seed, 77)
    dim = model.dim
    report = {}

    # (A) dissipativity of iterated S
    diss = {}
    for R in plan.radii:
        x = rng.normal(size=(plan.n_samples, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        U = x * (R * rng.random(plan.n_samples) ** (1.0 / dim))[:, None]
        denom = np.maximum(np.linalg.norm(U, axis=1), plan.r)
        a_seq = []
        W = U.copy()
        for _ in range(plan.n_iter):
            W = model.map.apply_batch(W)
            a_seq.append(float((np.linalg.norm(W, axis=1) / denom).max()))
        a_seq = np.array(a_seq)
        rest = np.array([a_seq[i:].max() for i in range(len(a_seq))])
        below = np.flatnonzero(rest < 1.0)
        n0 = int(below[0] + 1) if below.size else None
        diss[R] = {
            "a_sequence": a_seq,
            "n0": n0,
            "a": float(rest[below[0]]) if below.size else None,
        }
    report["dissipativity"] = diss

    # (C) smoothing: gamma_N = worst tail-projection expansion over pairs.
    # Random pairs alone miss the extremal directions, so coordinate-aligned
    # probes (difference delta e_j at several base points) are included; on
    # the diagonal toy these attain the exact constant gamma_{N+1}.
    R = max(plan.radii)
    U1 = rng.uniform(-1, 1, size=(plan.n_pairs, dim))
    U2 = U1 + 1e-3 * rng.normal(size=(plan.n_pairs, dim))
    U1 *= R / np.maximum(np.linalg.norm(U1, axis=1, keepdims=True), R)
    U2 *= R / np.maximum(np.linalg.norm(U2, axis=1, keepdims=True), R)
    n_base = 8
    base_pts = rng.uniform(-1, 1, size=(n_base, dim))
    base_pts *= R / np.maximum(np.linalg.norm(base_pts, axis=1, keepdims=True), R)
    probes = np.repeat(base_pts, dim, axis=0)
    shifted = probes + 1e-4 * np.eye(dim)[np.tile(np.arange(dim), n_base)]
    U1 = np.vstack([U1, probes])
    U2 = np.vstack([U2, shifted])
    S1 = model.map.apply_batch(U1)
    S2 = model.map.apply_batch(U2)
    base = np.linalg.norm(U1 - U2, axis=1)
    ok = base > 0
    gammas = {}
    for N in plan.projection_dims:
        if N >= dim:
            continue
        tail = np.linalg.norm((S1 - S2)[:, N:], axis=1)
        gammas[N] = float((tail[ok] / base[ok]).max())
    ns = sorted(gammas)
    report["smoothing"] = {
        "gamma_N": gammas,
        "monotone_decay": all(
            gammas[a] >= gammas[b] - 1e-12 for a, b in zip(ns, ns[1:])
        ),
    }

    # (E) subcontraction in the auxiliary metric on an attainable cloud
    if plan.d_prime is not None:
        cloud = plan.pair_cloud
        if cloud is None:
            cloud = attainability_cloud(
                model, np.zeros((1, dim)), k=20, seed=plan.seed, max_points=2000
            )
        n = cloud.shape[0]
        i = rng.integers(0, n, size=plan.n_pairs)
        j = rng.integers(0, n, size=plan.n_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
        Su = model.map.apply_batch(cloud[i])
        Sv = model.map.apply_batch(cloud[j])
        num = plan.d_prime(Su, Sv)
        den = plan.d_prime(cloud[i], cloud[j])
        pos = den > 0
        ratio = float((num[pos] / den[pos]).max())
        report["subcontraction"] = {
            "max_ratio": ratio,
            "pass": ratio <= 1.0 + 1e-9,
            "n_pairs": int(pos.sum()),
        }
    return report
