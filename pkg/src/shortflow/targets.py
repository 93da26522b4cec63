"""Target energies, the annealed density path, and ground-truth samplers.

Each target is an :class:`Energy` bundling the unnormalized log density,
its analytic score, and (where available) an exact sampler. Targets are
vectorized over a leading batch axis: ``log_unnorm`` maps ``(..., dim)``
to ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "Energy",
    "AnnealedPath",
    "GaussShiftFixture",
    "gaussian_base",
    "gauss_shift",
    "gmm40",
    "mw32",
    "dw4",
    "lj13",
    "make_target",
    "make_path",
    "reference_samples",
    "GMM40_MODE_SEED",
]

# Mode locations of the 40-component mixture are frozen by this seed so that
# every run scores against the same landscape.
GMM40_MODE_SEED = 7


@dataclass
class Energy:
    """An unnormalized density exp(log_unnorm) on R^dim."""

    name: str
    dim: int
    log_unnorm: Callable[[np.ndarray], np.ndarray]
    grad_log_unnorm: Callable[[np.ndarray], np.ndarray]
    sample_exact: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None
    coord_scale: float = 1.0
    n_particles: Optional[int] = None
    spatial_dim: Optional[int] = None

    def potential(self, x: np.ndarray) -> np.ndarray:
        return -self.log_unnorm(x)


@dataclass
class AnnealedPath:
    """Geometric interpolation target^t * base^(1-t) between two energies."""

    base: Energy
    target: Energy

    def __post_init__(self):
        if self.base.dim != self.target.dim:
            raise ValueError("base and target dimensions differ")

    @property
    def dim(self) -> int:
        return self.target.dim

    def _check_t(self, t: float) -> float:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        return t

    def log_tilde(self, t: float, x: np.ndarray) -> np.ndarray:
        t = self._check_t(t)
        if t == 0.0:
            return self.base.log_unnorm(x)
        if t == 1.0:
            return self.target.log_unnorm(x)
        return t * self.target.log_unnorm(x) + (1.0 - t) * self.base.log_unnorm(x)

    def dt_log_tilde(self, x: np.ndarray) -> np.ndarray:
        """Time derivative of log_tilde; independent of t for this path."""
        out = self.target.log_unnorm(x) - self.base.log_unnorm(x)
        if not np.all(np.isfinite(out)):
            raise ArithmeticError("non-finite energy in dt_log_tilde")
        return out

    def grad_log_tilde(self, t: float, x: np.ndarray) -> np.ndarray:
        t = self._check_t(t)
        if t == 0.0:
            return self.base.grad_log_unnorm(x)
        if t == 1.0:
            return self.target.grad_log_unnorm(x)
        return t * self.target.grad_log_unnorm(x) + (1.0 - t) * self.base.grad_log_unnorm(x)


def gaussian_base(dim: int, variance: float) -> Energy:
    """Normalized isotropic N(0, variance*I), the path's starting density."""
    var = float(variance)
    const = -0.5 * dim * np.log(2.0 * np.pi * var)

    def log_unnorm(x):
        x = np.asarray(x, dtype=np.float64)
        return const - 0.5 * np.sum(x * x, axis=-1) / var

    def grad(x):
        return -np.asarray(x, dtype=np.float64) / var

    def sample(n, rng):
        return rng.normal(size=(n, dim)) * np.sqrt(var)

    return Energy(
        name=f"gauss{dim}",
        dim=dim,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        sample_exact=sample,
        coord_scale=np.sqrt(var),
    )


# ---------------------------------------------------------------------------
# Gaussian shift fixture: base N(0, I), target N(mu, I). Everything about
# this pair is analytic, which makes it the oracle for the SMC estimators:
# p_t = N(t*mu, I) and d/dt log Z_t = (t - 1/2) ||mu||^2.
# ---------------------------------------------------------------------------


class _ConstantVelocityModel:
    """Model stub whose velocity field is a constant vector."""

    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=np.float64)

    def forward(self, x, t, d, params=None):
        return x * 0.0 + self.vec


@dataclass
class GaussShiftFixture:
    mu: np.ndarray
    path: AnnealedPath

    def dtlogz(self, t: float) -> float:
        return (float(t) - 0.5) * float(np.dot(self.mu, self.mu))

    def pt_mean(self, t: float) -> np.ndarray:
        return float(t) * self.mu

    def sample_pt(self, t: float, n: int, rng) -> np.ndarray:
        return rng.normal(size=(n, self.mu.size)) + self.pt_mean(t)

    def exact_velocity(self) -> _ConstantVelocityModel:
        return _ConstantVelocityModel(self.mu)

    def scaled_velocity(self, scale: float) -> _ConstantVelocityModel:
        return _ConstantVelocityModel(scale * self.mu)

    def zero_velocity(self) -> _ConstantVelocityModel:
        return _ConstantVelocityModel(np.zeros_like(self.mu))


def gauss_shift(dim: int = 2, shift_norm: float = 4.0) -> GaussShiftFixture:
    mu = np.full(dim, shift_norm / np.sqrt(dim))
    base = gaussian_base(dim, 1.0)
    const = -0.5 * dim * np.log(2.0 * np.pi)

    def log_unnorm(x):
        x = np.asarray(x, dtype=np.float64)
        diff = x - mu
        return const - 0.5 * np.sum(diff * diff, axis=-1)

    def grad(x):
        return mu - np.asarray(x, dtype=np.float64)

    def sample(n, rng):
        return rng.normal(size=(n, dim)) + mu

    target = Energy(
        name="gauss-shift",
        dim=dim,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        sample_exact=sample,
        coord_scale=max(shift_norm, 1.0),
    )
    return GaussShiftFixture(mu=mu, path=AnnealedPath(base=base, target=target))


# ---------------------------------------------------------------------------
# 40-component planar Gaussian mixture
# ---------------------------------------------------------------------------


def gmm40_means() -> np.ndarray:
    rng = np.random.default_rng(GMM40_MODE_SEED)
    return rng.uniform(-40.0, 40.0, size=(40, 2))


def gmm40() -> Energy:
    means = gmm40_means()
    var = 40.0
    # per-component normalized log density + log(1/40) mixture weight
    const = -np.log(2.0 * np.pi * var) - np.log(40.0)

    def log_unnorm(x):
        x = np.asarray(x, dtype=np.float64)
        d2 = np.sum((x[..., None, :] - means) ** 2, axis=-1)  # (..., 40)
        return logsumexp(const - 0.5 * d2 / var, axis=-1)

    def grad(x):
        x = np.asarray(x, dtype=np.float64)
        diff = means - x[..., None, :]  # (..., 40, 2)
        logits = -0.5 * np.sum(diff * diff, axis=-1) / var
        logits -= logsumexp(logits, axis=-1, keepdims=True)
        w = np.exp(logits)
        return np.sum(w[..., None] * diff, axis=-2) / var

    def sample(n, rng):
        return gmm40_sample_with_labels(n, rng)[0]

    return Energy(
        name="gmm40",
        dim=2,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        sample_exact=sample,
        coord_scale=40.0,
    )


def gmm40_sample_with_labels(n, rng):
    """Exact mixture draws plus the component index of each draw."""
    means = gmm40_means()
    comp = rng.integers(0, 40, size=n)
    return means[comp] + rng.normal(size=(n, 2)) * np.sqrt(40.0), comp


# ---------------------------------------------------------------------------
# 32-dimensional stack of 16 independent planar double wells
# ---------------------------------------------------------------------------

N_WELLS = 16


def _well_log_density(x1):
    return -(x1 ** 4) + 6.0 * x1 ** 2 + 0.5 * x1


def mw32() -> Energy:
    def log_unnorm(x):
        x = np.asarray(x, dtype=np.float64)
        x1 = x[..., 0::2]
        x2 = x[..., 1::2]
        return np.sum(_well_log_density(x1) - 0.5 * x2 ** 2, axis=-1)

    def grad(x):
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        x1 = x[..., 0::2]
        g[..., 0::2] = -4.0 * x1 ** 3 + 12.0 * x1 + 0.5
        g[..., 1::2] = -x[..., 1::2]
        return g

    return Energy(
        name="mw32",
        dim=2 * N_WELLS,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        sample_exact=_mw32_sample,
        coord_scale=2.5,
    )


def _mw_envelope():
    """Gaussian-mixture envelope for the x1 marginal: one component per
    well (width from the local log-density curvature) plus a broad cover
    for the inter-well valley and the tails."""
    grid = np.linspace(-4.0, 4.0, 4001)
    f = _well_log_density(grid)
    ref = f.max()
    dens = np.exp(f - ref)
    left = grid[grid < 0][np.argmax(dens[grid < 0])]
    right = grid[grid > 0][np.argmax(dens[grid > 0])]
    curv = lambda m: abs(-12.0 * m ** 2 + 12.0)
    sig = 1.3 / np.sqrt(min(curv(left), curv(right)))
    mass_left = dens[grid < 0].sum()
    w_left = mass_left / dens.sum()
    centers = np.array([left, right, 0.0])
    sigmas = np.array([sig, sig, 2.5])
    weights = np.array([0.85 * w_left, 0.85 * (1.0 - w_left), 0.15])
    env = _env_density(grid, centers, sigmas, weights)
    c = 1.05 * np.max(dens / env)
    return centers, sigmas, weights, c, ref


def _env_density(x, centers, sigmas, weights):
    z = (np.asarray(x)[..., None] - centers) / sigmas
    return np.sum(
        weights * np.exp(-0.5 * z * z) / (sigmas * np.sqrt(2 * np.pi)), axis=-1
    )


_MW_ENV = None


def _mw32_sample(n, rng):
    global _MW_ENV
    if _MW_ENV is None:
        _MW_ENV = _mw_envelope()
    out = np.empty((n, 2 * N_WELLS))
    for w in range(N_WELLS):
        out[:, 2 * w] = _sample_well_x1(n, rng, *_MW_ENV)
        out[:, 2 * w + 1] = rng.normal(size=n)
    return out


def _sample_well_x1(n, rng, centers, sigmas, weights, c, ref):
    samples = np.empty(n)
    filled = 0
    attempts = 0
    total = 0
    while filled < n:
        m = max(2 * (n - filled), 64)
        comp = rng.choice(centers.size, size=m, p=weights)
        x = centers[comp] + sigmas[comp] * rng.normal(size=m)
        env = _env_density(x, centers, sigmas, weights)
        logf = _well_log_density(x) - ref
        accept = np.log(rng.uniform(size=m)) < logf - np.log(c * env)
        acc = x[accept]
        take = min(acc.size, n - filled)
        samples[filled : filled + take] = acc[:take]
        filled += take
        attempts += 1
        total += m
        if attempts > 50 and filled / max(total, 1) < 1e-4:
            raise RuntimeError(
                f"rejection acceptance rate collapsed: {filled}/{total} accepted"
            )
    return samples


# ---------------------------------------------------------------------------
# interacting particle systems
# ---------------------------------------------------------------------------


def _pair_indices(n):
    i, j = np.triu_indices(n, k=1)
    return i, j


def dw4(d0: float = 4.0, a: float = 0.0, b: float = -4.0, c: float = 0.9,
        tau: float = 1.0) -> Energy:
    """Four 2-D particles with a pairwise double-well interaction (d=8).

    Unordered pairs i<j, prefactor 1/(2*tau). Default d0=4 follows the
    dataset convention commonly used for this system.
    """
    n, s = 4, 2
    pi, pj = _pair_indices(n)

    def _dists(x):
        conf = x.reshape(x.shape[:-1] + (n, s))
        diff = conf[..., pi, :] - conf[..., pj, :]
        return np.linalg.norm(diff, axis=-1), diff, conf

    def energy(x):
        x = np.asarray(x, dtype=np.float64)
        d, _, _ = _dists(x)
        u = d - d0
        return np.sum(a * u + b * u ** 2 + c * u ** 4, axis=-1) / (2.0 * tau)

    def log_unnorm(x):
        return -energy(x)

    def grad(x):
        x = np.asarray(x, dtype=np.float64)
        d, diff, conf = _dists(x)
        u = d - d0
        dv = (a + 2.0 * b * u + 4.0 * c * u ** 3) / (2.0 * tau)  # dE/dd per pair
        pair_force = (dv / d)[..., None] * diff  # dE/dx_i for pair (i, j)
        g = np.zeros_like(conf)
        np.add.at(g, (..., pi, slice(None)), pair_force)
        np.add.at(g, (..., pj, slice(None)), -pair_force)
        return -g.reshape(x.shape)

    return Energy(
        name="dw4",
        dim=n * s,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        coord_scale=3.0,
        n_particles=n,
        spatial_dim=s,
    )


LJ_R_MIN = 0.8


def _lj_pair(d, eps=1.0, sig=1.0):
    r6 = (sig / d) ** 6
    return eps * (r6 * r6 - 2.0 * r6)


def _lj_pair_deriv(d, eps=1.0, sig=1.0):
    r6 = (sig / d) ** 6
    return eps * 12.0 / d * (r6 - r6 * r6)


def _lj_pair_curv(d, eps=1.0, sig=1.0):
    r6 = (sig / d) ** 6
    return eps / (d * d) * (156.0 * r6 * r6 - 84.0 * r6)


def lj13(smoothed: bool = True) -> Energy:
    """Thirteen 3-D particles: pairwise 12-6 interaction plus a harmonic
    tether to the center of mass (d=39).

    With ``smoothed``, distances below r_min=0.8 use the second-order
    Taylor expansion of the pair potential about r_min (value, slope,
    curvature matched), which keeps training energies finite. Evaluation
    uses the raw potential (``smoothed=False``).
    """
    n, s = 13, 3
    pi, pj = _pair_indices(n)
    v0 = _lj_pair(LJ_R_MIN)
    v1 = _lj_pair_deriv(LJ_R_MIN)
    v2 = _lj_pair_curv(LJ_R_MIN)

    def pair_pot(d):
        if not smoothed:
            return _lj_pair(d)
        u = d - LJ_R_MIN
        return np.where(d < LJ_R_MIN, v0 + v1 * u + 0.5 * v2 * u * u, _lj_pair(np.maximum(d, LJ_R_MIN)))

    def pair_dpot(d):
        if not smoothed:
            return _lj_pair_deriv(d)
        u = d - LJ_R_MIN
        return np.where(d < LJ_R_MIN, v1 + v2 * u, _lj_pair_deriv(np.maximum(d, LJ_R_MIN)))

    def _conf(x):
        x = np.asarray(x, dtype=np.float64)
        conf = x.reshape(x.shape[:-1] + (n, s))
        diff = conf[..., pi, :] - conf[..., pj, :]
        return conf, diff, np.linalg.norm(diff, axis=-1)

    def energy(x):
        conf, _, d = _conf(x)
        if not smoothed and np.any(d == 0.0):
            return np.where(
                np.any(d == 0.0, axis=-1),
                np.inf,
                np.sum(pair_pot(np.where(d == 0.0, 1.0, d)), axis=-1),
            ) + _harmonic(conf)
        com = conf.mean(axis=-2, keepdims=True)
        harm = 0.5 * np.sum((conf - com) ** 2, axis=(-2, -1))
        return np.sum(pair_pot(d), axis=-1) + harm

    def _harmonic(conf):
        com = conf.mean(axis=-2, keepdims=True)
        return 0.5 * np.sum((conf - com) ** 2, axis=(-2, -1))

    def log_unnorm(x):
        return -energy(x)

    def grad(x):
        conf, diff, d = _conf(x)
        if not smoothed and np.any(d == 0.0):
            raise ValueError("coincident particles: raw pair potential is singular")
        dv = pair_dpot(d)
        pair_force = (dv / d)[..., None] * diff
        g = np.zeros_like(conf)
        np.add.at(g, (..., pi, slice(None)), pair_force)
        np.add.at(g, (..., pj, slice(None)), -pair_force)
        com = conf.mean(axis=-2, keepdims=True)
        g = g + (conf - com)
        return -g.reshape(np.asarray(x).shape)

    return Energy(
        name="lj13",
        dim=n * s,
        log_unnorm=log_unnorm,
        grad_log_unnorm=grad,
        coord_scale=1.5,
        n_particles=n,
        spatial_dim=s,
    )


# ---------------------------------------------------------------------------
# task registry
# ---------------------------------------------------------------------------

BASE_VARIANCE = {
    "gmm40": 25.0,
    "mw32": 2.0,
    "dw4": 2.0,
    "lj13": 2.0,
    "gauss-shift": 1.0,
}

_TASKS = ("gauss-shift", "gmm40", "mw32", "dw4", "lj13")


def make_target(task: str, training: bool = False) -> Energy:
    """Target energy for a named task; LJ uses the smoothed pair potential
    only when ``training``."""
    if task == "gauss-shift":
        return gauss_shift().path.target
    if task == "gmm40":
        return gmm40()
    if task == "mw32":
        return mw32()
    if task == "dw4":
        return dw4()
    if task == "lj13":
        return lj13(smoothed=training)
    raise ValueError(f"unknown task '{task}'; valid: {', '.join(_TASKS)}")


def make_path(task: str, training: bool = False) -> AnnealedPath:
    if task == "gauss-shift":
        return gauss_shift().path
    target = make_target(task, training=training)
    return AnnealedPath(base=gaussian_base(target.dim, BASE_VARIANCE[task]), target=target)


# ---------------------------------------------------------------------------
# reference sample generation
# ---------------------------------------------------------------------------


def reference_samples(target: Energy, n: int, rng, **chain_opts):
    """Approximately independent draws from ``target`` plus generator metadata.

    gmm40 and the Gaussian fixture sample exactly; mw32 uses per-well
    rejection; the particle systems run long Hamiltonian chains with
    recorded burn-in and thinning (center of mass recentered, which the
    translation-invariant energies do not see).
    """
    if target.sample_exact is not None:
        return target.sample_exact(n, rng), {"method": "exact", "n": n}
    if target.n_particles is None:
        raise ValueError(f"no reference sampler for target '{target.name}'")
    defaults = {
        "dw4": dict(n_chains=32, burn_in=600, thin=10, leapfrog=20, step_size=0.15),
        "lj13": dict(n_chains=32, burn_in=800, thin=10, leapfrog=25, step_size=0.02),
    }[target.name]
    defaults.update(chain_opts)
    samples = _hmc_reference(target, n, rng, **defaults)
    meta = {"method": "hmc", "n": n, **defaults}
    return samples, meta


def _hmc_reference(target, n, rng, n_chains, burn_in, thin, leapfrog, step_size):
    from .mcmc import HmcConfig, hmc

    npart, sdim = target.n_particles, target.spatial_dim
    x = _init_particles(target, n_chains, rng)
    cfg = HmcConfig(n_hmc_steps=1, n_leapfrog=leapfrog, step_size=step_size)
    per_chain = int(np.ceil(n / n_chains))
    kept = []
    total_steps = burn_in + per_chain * thin
    for step in range(total_steps):
        x = hmc(x, target.log_unnorm, target.grad_log_unnorm, cfg, rng)
        x = _recenter(x, npart, sdim)
        if step >= burn_in and (step - burn_in) % thin == 0:
            kept.append(x.copy())
    out = np.concatenate(kept, axis=0)
    return out[:n]


def _recenter(x, npart, sdim):
    conf = x.reshape(x.shape[0], npart, sdim)
    conf = conf - conf.mean(axis=1, keepdims=True)
    return conf.reshape(x.shape)


def _init_particles(target, n_chains, rng):
    if target.name == "lj13":
        # icosahedron plus center, near the minimum-energy cluster
        phi = (1.0 + np.sqrt(5.0)) / 2.0
        verts = []
        for s1 in (-1, 1):
            for s2 in (-1, 1):
                verts.append([0.0, s1, s2 * phi])
                verts.append([s1, s2 * phi, 0.0])
                verts.append([s2 * phi, 0.0, s1])
        verts = np.unique(np.round(np.asarray(verts), 12), axis=0)
        verts = verts / np.linalg.norm(verts[0])  # circumradius 1
        conf = np.concatenate([np.zeros((1, 3)), verts], axis=0) * 1.09
        base = conf.reshape(-1)
        x = np.tile(base, (n_chains, 1))
        return x + 0.05 * rng.normal(size=x.shape)
    # dw4: ring of radius d0/sqrt(2) puts neighbors near the inner well
    d0 = 4.0
    ang = np.linspace(0.0, 2.0 * np.pi, 4, endpoint=False)
    conf = d0 / np.sqrt(2.0) * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    x = np.tile(conf.reshape(-1), (n_chains, 1))
    return x + 0.2 * rng.normal(size=x.shape)
