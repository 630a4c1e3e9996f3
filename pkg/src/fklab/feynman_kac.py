"""Monte Carlo and particle estimation of the weighted (Feynman-Kac)
semigroup on simulated models.

Estimators work in log space throughout: a trajectory's weight after k
steps is exp(sum of potential values along the path), and only ratios or
log-slopes of such quantities are ever reported.  The growth rate of the
total mass gives the pressure, its slope-normalized limit the eigenvalue,
the resampled particle cloud the eigenmeasure, and mass estimates started
from query points the eigenfunction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .rds_core import rng_stream

__all__ = [
    "PotentialFn",
    "WeightedEnsemble",
    "xi_weight",
    "mc_semigroup",
    "particle_fk",
    "h_estimate",
    "pressure_estimate",
    "pressure_curve",
    "met_convergence_mc",
    "EnsembleCollapse",
]


class EnsembleCollapse(RuntimeError):
    """Particle weights degenerated; use more particles or a potential with
    smaller oscillation."""


@dataclass(frozen=True)
class PotentialFn:
    """Potential V with recorded Lipschitz/oscillation bounds.

    ``fn`` maps an (n, dim) batch to (n,) values.  The bounds are contracts
    used by diagnostics, not enforced pointwise.  For chain potentials the
    per-state value table is kept in ``chain_values`` so chain ensembles can
    run in index space.
    """

    fn: object
    lip: float
    osc: float
    tag: str = ""
    chain_values: np.ndarray | None = None

    def __call__(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        out = np.asarray(self.fn(U), dtype=float)
        if np.any(np.isnan(out)):
            raise ValueError("potential produced NaN")
        return out

    def shifted(self, c):
        return PotentialFn(
            fn=lambda U: self.fn(U) + c, lip=self.lip, osc=self.osc, tag=f"{self.tag}+{c:g}"
        )

    def scaled(self, a):
        return PotentialFn(
            fn=lambda U: a * self.fn(U),
            lip=abs(a) * self.lip,
            osc=abs(a) * self.osc,
            tag=f"{a:g}*{self.tag}",
        )

    @classmethod
    def zero(cls):
        return cls(fn=lambda U: np.zeros(U.shape[0]), lip=0.0, osc=0.0, tag="zero")

    @classmethod
    def from_chain(cls, chain, values):
        """Potential given by a value per chain state."""
        values = np.asarray(values, dtype=float)
        d = np.linalg.norm(chain.points[:, None, :] - chain.points[None, :, :], axis=-1)
        diff = np.abs(values[:, None] - values[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            lip = float(np.where(d > 0, diff / d, 0.0).max())
        return cls(
            fn=lambda U: values[chain.index_of(U)],
            lip=lip,
            osc=float(values.max() - values.min()),
            tag="chain",
            chain_values=values,
        )

    @classmethod
    def coordinate(cls, i, scale=1.0, center=0.0, clip=None):
        """Rescaled i-th coordinate, optionally clipped to keep it bounded."""

        def fn(U):
            x = scale * (U[:, i] - center)
            return np.clip(x, -clip, clip) if clip is not None else x

        osc = 2 * clip * abs(scale) if clip is not None else np.inf
        return cls(fn=fn, lip=abs(scale), osc=osc, tag=f"coord{i}")

    @classmethod
    def wall(cls, cloud, delta, eps):
        """Vanishes on the attractor cloud, equals delta outside its
        eps-neighborhood: V(u) = delta min(1, dist(u, cloud)/eps)."""
        tree = cKDTree(np.atleast_2d(np.asarray(cloud, dtype=float)))

        def fn(U):
            return delta * np.minimum(1.0, tree.query(U)[0] / eps)

        return cls(fn=fn, lip=delta / eps, osc=delta, tag="vanishes-on-attractor")


def xi_weight(trajectory, V, k, f):
    """Path weight f(u_k) exp(sum_{n=1..k} V(u_n)), assembled in log space."""
    states = trajectory.states
    if states.shape[0] < k + 1:
        raise ValueError("trajectory shorter than k")
    logw = float(V(states[1 : k + 1]).sum()) if k > 0 else 0.0
    fval = float(np.asarray(f(states[k : k + 1])).ravel()[0])
    if np.isnan(fval) or np.isnan(logw):
        raise ValueError("NaN in potential or observable")
    return fval * np.exp(logw)


def _signed_mean(logw, fvals):
    """Mean of f * exp(logw) with a common factored exponent; returns
    (mean, stderr)."""
    shift = logw.max()
    w = np.exp(logw - shift) * fvals
    mean = w.mean()
    stderr = w.std(ddof=1) / np.sqrt(w.size)
    return float(np.exp(shift) * mean), float(np.exp(shift) * stderr)


def mc_semigroup(model, V, f, u0, k, n_traj, seed=0, stderr_cap=None):
    """Plain Monte Carlo estimate of the weighted average
    E[f(u_k) exp(sum V(u_n))] from u0; returns (estimate, stderr).

    A relative stderr above ``stderr_cap`` is flagged in the returned
    tuple's third slot, never fatal.
    """
    if n_traj < 2:
        raise ValueError("need at least two trajectories")
    rng = rng_stream(seed, 0)
    U = np.tile(np.asarray(u0, dtype=float), (n_traj, 1))
    logw = np.zeros(n_traj)
    for _ in range(int(k)):
        U = model.step_many(U, rng)
        logw += V(U)
    fvals = np.asarray(f(U), dtype=float)
    est, err = _signed_mean(logw, fvals)
    flagged = bool(stderr_cap is not None and abs(est) > 0 and err / abs(est) > stderr_cap)
    return est, err, flagged


@dataclass
class WeightedEnsemble:
    """Particle system state plus normalization bookkeeping.

    ``lognorm`` accumulates the log of every normalization divided out at
    resampling times, so ``lognorm + logmeanexp(logweights)`` always equals
    the running log estimate of the unnormalized total mass.
    """

    particles: np.ndarray
    logweights: np.ndarray
    k: int
    lognorm: float
    ess: float
    history: list = field(default_factory=list)

    @property
    def log_mass(self):
        return self.lognorm + _logmeanexp(self.logweights)


def _logmeanexp(x):
    m = x.max()
    return float(m + np.log(np.mean(np.exp(x - m))))


def _ess(logw):
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return float(1.0 / np.sum(w**2))


@dataclass
class FKResult:
    lam: float
    lam_stderr: float
    log_mass_series: np.ndarray
    mu_cloud: np.ndarray
    ensemble: WeightedEnsemble


def particle_fk(model, V, init, k, n_particles=1000, ess_threshold=0.5, seed=0):
    """Sequential importance sampling with multinomial resampling.

    Returns an :class:`FKResult` with the eigenvalue estimate (slope of the
    log-mass series over its last half), the terminal equal-weight particle
    cloud as the eigenmeasure estimate, and the full ensemble.
    """
    if n_particles < 100:
        raise ValueError("need at least 100 particles")
    if not 0 < ess_threshold < 1:
        raise ValueError("ess_threshold must be in (0, 1)")
    rng = rng_stream(seed, 0)
    init = np.atleast_2d(np.asarray(init, dtype=float))
    if init.shape[0] == 1:
        X = np.tile(init[0], (n_particles, 1))
    else:
        X = init[rng.integers(0, init.shape[0], n_particles)].copy()
    ens = WeightedEnsemble(
        particles=X, logweights=np.zeros(n_particles), k=0, lognorm=0.0, ess=float(n_particles)
    )
    series = np.empty(k)
    collapses = 0
    for step in range(1, k + 1):
        ens.particles = model.step_many(ens.particles, rng)
        ens.logweights = ens.logweights + V(ens.particles)
        ens.k = step
        ens.ess = _ess(ens.logweights)
        series[step - 1] = ens.log_mass
        resampled = False
        if ens.ess < ess_threshold * n_particles:
            if ens.ess <= 1.5:
                collapses += 1
                if collapses >= 3:
                    raise EnsembleCollapse(
                        "effective sample size collapsed repeatedly; increase "
                        "n_particles or reduce the potential's oscillation"
                    )
            ens.lognorm += _logmeanexp(ens.logweights)
            w = np.exp(ens.logweights - ens.logweights.max())
            w /= w.sum()
            idx = rng.choice(n_particles, size=n_particles, p=w)
            ens.particles = ens.particles[idx].copy()
            ens.logweights = np.zeros(n_particles)
            resampled = True
        ens.history.append((step, ens.ess, resampled))

    lam, lam_err = _slope_fit(series)
    # terminal equal-weight cloud
    w = np.exp(ens.logweights - ens.logweights.max())
    w /= w.sum()
    idx = rng.choice(n_particles, size=n_particles, p=w)
    mu_cloud = ens.particles[idx].copy()
    return FKResult(
        lam=float(np.exp(lam)),
        lam_stderr=float(lam_err * np.exp(lam)),
        log_mass_series=series,
        mu_cloud=mu_cloud,
        ensemble=ens,
    )


def _slope_fit(series, tail=0.5, n_blocks=8):
    """Drift of a cumulative log-mass series over its tail.

    The series behaves like a random walk with drift, so the efficient
    estimator is the increment mean (endpoint difference over the window);
    the stderr comes from batch means of the increments, which absorbs
    their autocorrelation.
    """
    series = np.asarray(series, dtype=float)
    k = len(series)
    start = int(k * (1 - tail)) - 1
    ys = series[max(start, 0) :]
    if ys.size < 4:
        raise ValueError("series too short for a slope fit")
    inc = np.diff(ys)
    slope = float(inc.mean())
    b = min(n_blocks, inc.size // 2)
    if b >= 2:
        blocks = np.array_split(inc, b)
        means = np.array([blk.mean() for blk in blocks])
        stderr = float(means.std(ddof=1) / np.sqrt(b))
    else:
        stderr = float(inc.std(ddof=1) / np.sqrt(inc.size))
    return slope, stderr


def h_estimate(model, V, u0, k, lam, n_traj=2000, seed=0):
    """Eigenfunction value at u0: lam^-k times the Monte Carlo mass
    estimate, one dedicated ensemble per query point (no interpolation)."""
    est, err, _ = mc_semigroup(
        model, V, lambda U: np.ones(U.shape[0]), u0, k, n_traj, seed=seed
    )
    scale = float(lam) ** (-k)
    return scale * est, scale * err


@dataclass
class PressureFit:
    Q: float
    stderr: float
    series: np.ndarray
    curvature: float
    accepted: bool
    diagnostics: dict = field(default_factory=dict)


def pressure_estimate(
    model,
    V,
    u0,
    k_max=60,
    n_traj=4000,
    seed=0,
    curvature_tol=0.02,
    comparability_points=None,
):
    """Pressure (exponential growth rate of the total weighted mass) from
    the tail slope of the log-mass series started at u0.

    The fit is rejected (``accepted=False``) when the tail's quadratic
    curvature exceeds ``curvature_tol`` per step, signalling that the
    asymptotic regime was not reached.  Optional ``comparability_points``
    (a cloud of attainable states) adds the sup-ratio diagnostic comparing
    mass norms over the start set and over the cloud.
    """
    if k_max < 20:
        raise ValueError("k_max must be at least 20 for a tail fit")
    res = particle_fk(model, V, u0, k_max, n_particles=max(100, n_traj), seed=seed)
    series = res.log_mass_series
    slope, err = _slope_fit(series)
    half = series[len(series) // 2 :]
    xs = np.arange(half.size, dtype=float)
    quad = np.polyfit(xs, half, 2)[0]
    accepted = abs(quad) <= curvature_tol
    diag = {}
    if comparability_points is not None:
        # mass-norm comparability over the attainable cloud, plus the spread
        # of the growth rate across start points (it should not depend on u0)
        pts = np.atleast_2d(np.asarray(comparability_points))
        ks = max(20, k_max // 2)
        sup_B = res.log_mass_series[min(ks, k_max) - 1]
        sups, slopes = [], []
        for i, p in enumerate(pts[:8]):
            r = particle_fk(model, V, p, ks, n_particles=max(100, n_traj // 4), seed=seed + 101 + i)
            sups.append(r.log_mass_series[-1])
            slopes.append(_slope_fit(r.log_mass_series)[0])
        diag["comparability_log_ratio"] = float(max(sups) - sup_B)
        diag["Q_by_start"] = slopes
        diag["Q_start_spread"] = float(max(slopes) - min(slopes)) if slopes else 0.0
    return PressureFit(
        Q=float(slope),
        stderr=float(err),
        series=series,
        curvature=float(quad),
        accepted=bool(accepted),
        diagnostics=diag,
    )


@dataclass
class PressureCurve:
    alphas: np.ndarray
    Q: np.ndarray
    stderr: np.ndarray
    sigma_V: float
    sigma_V_stderr: float
    convex: bool
    mean_shift: float


def pressure_curve(
    model,
    V,
    alphas,
    u0,
    k_max=60,
    n_traj=4000,
    seed=0,
    recenter=True,
    recenter_k=10_000,
    recenter_traj=64,
):
    """Pressure along alpha -> Q(alpha V) with the CLT variance read off the
    second difference at the origin.

    The potential is recentred so its mean under the (V = 0) stationary
    occupation vanishes; the curve then has zero slope at 0 and its second
    difference estimates the CLT variance of the running average of V.
    """
    alphas = np.asarray(sorted(set(float(a) for a in alphas) | {0.0}))
    shift = 0.0
    if recenter:
        rng = rng_stream(seed, 1)
        U = np.tile(np.asarray(u0, dtype=float), (recenter_traj, 1))
        acc, cnt = 0.0, 0
        burn = min(200, recenter_k // 10)
        for step in range(recenter_k // recenter_traj):
            U = model.step_many(U, rng)
            if step >= burn // recenter_traj:
                acc += float(V(U).sum())
                cnt += U.shape[0]
        shift = acc / max(cnt, 1)
    Vc = V.shifted(-shift) if shift != 0.0 else V

    Qs, errs = [], []
    for i, a in enumerate(alphas):
        if a == 0.0:
            Qs.append(0.0)
            errs.append(0.0)
            continue
        fit = pressure_estimate(model, Vc.scaled(a), u0, k_max, n_traj, seed=seed + 17 * i)
        Qs.append(fit.Q)
        errs.append(fit.stderr)
    Qs = np.asarray(Qs)
    errs = np.asarray(errs)

    i0 = int(np.flatnonzero(alphas == 0.0)[0])
    if i0 == 0 or i0 == len(alphas) - 1:
        raise ValueError("alpha grid must straddle zero")
    da = min(alphas[i0 + 1] - alphas[i0], alphas[i0] - alphas[i0 - 1])
    sigma = (Qs[i0 + 1] - 2 * Qs[i0] + Qs[i0 - 1]) / da**2
    sigma_err = np.sqrt(errs[i0 + 1] ** 2 + errs[i0 - 1] ** 2) / da**2
    second = np.diff(Qs, 2)
    tol = 3 * np.sqrt(errs[:-2] ** 2 + 4 * errs[1:-1] ** 2 + errs[2:] ** 2) + 1e-9
    convex = bool(np.all(second >= -tol))
    return PressureCurve(
        alphas=alphas,
        Q=Qs,
        stderr=errs,
        sigma_V=float(sigma),
        sigma_V_stderr=float(sigma_err),
        convex=convex,
        mean_shift=float(shift),
    )


@dataclass
class MetConvergenceReport:
    residuals: dict
    stderrs: dict
    gamma: float | None
    verdict: str


def met_convergence_mc(model, V, lam, h_at, mu_cloud, f_list, u0s, k_max, n_traj=4000, seed=0):
    """Residual decay |lam^-k P_k f(u) - <f, mu> h(u)| from Monte Carlo.

    ``h_at`` maps each start point (by row index) to its eigenfunction
    estimate; ``mu_cloud`` is an equal-weight eigenmeasure cloud.  Rates are
    fitted only on residuals statistically resolvable above their Monte
    Carlo noise; otherwise the verdict is "inconclusive" rather than a
    fabricated rate.
    """
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    residuals = {}
    stderrs = {}
    for fi, f in enumerate(f_list):
        mu_f = float(np.mean(f(mu_cloud)))
        for ui, u0 in enumerate(u0s):
            rng = rng_stream(seed, 1000 + 31 * fi + ui)
            U = np.tile(u0, (n_traj, 1))
            logw = np.zeros(n_traj)
            res_k = np.empty(k_max)
            err_k = np.empty(k_max)
            target = mu_f * h_at[ui]
            for k in range(1, k_max + 1):
                U = model.step_many(U, rng)
                logw += V(U)
                est, err = _signed_mean(logw, np.asarray(f(U), dtype=float))
                scale = float(lam) ** (-k)
                res_k[k - 1] = abs(scale * est - target)
                err_k[k - 1] = scale * err
            residuals[(fi, ui)] = res_k
            stderrs[(fi, ui)] = err_k
    # pool the resolvable late-window part of every residual sequence (the
    # early steps mix transient modes and would bias the rate)
    ks_all, logs_all = [], []
    for key, res_k in residuals.items():
        kk = np.arange(1, k_max + 1)
        resolvable = (res_k > 3 * stderrs[key]) & (kk > k_max // 2)
        ks = kk[resolvable]
        if ks.size >= 3:
            ks_all.append(ks)
            logs_all.append(np.log(res_k[resolvable]))
    if not ks_all:
        return MetConvergenceReport(residuals, stderrs, None, "inconclusive")
    ks = np.concatenate(ks_all)
    ls = np.concatenate(logs_all)
    if np.unique(ks).size < 3:
        return MetConvergenceReport(residuals, stderrs, None, "inconclusive")
    slope = np.polyfit(ks, ls, 1)[0]
    gamma = -float(slope)
    verdict = "decaying" if gamma > 0 else "not-decaying"
    return MetConvergenceReport(residuals, stderrs, gamma, verdict)
