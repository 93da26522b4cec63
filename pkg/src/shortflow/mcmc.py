"""Hamiltonian refinement kernel, velocity move, ESS, and resampling.

All kernels are vectorized over a batch of particles ``(K, dim)`` and pure
given their RNG, so per-particle work can run under any parallel schedule
without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "HmcConfig",
    "velocity_move",
    "leapfrog",
    "hmc",
    "ess",
    "systematic_resample",
    "normalized_weights",
    "HMC_DEFAULTS",
]

# per-task kernel settings: (n_hmc_steps, n_leapfrog, step_size)
HMC_DEFAULTS = {
    "gmm40": (3, 5, 0.1),
    "mw32": (6, 10, 0.1),
    "dw4": (10, 10, 0.01),
    "lj13": (10, 10, 0.01),
    "gauss-shift": (3, 5, 0.5),
}


@dataclass
class HmcConfig:
    n_hmc_steps: int = 3
    n_leapfrog: int = 5
    step_size: float = 0.1

    def __post_init__(self):
        # n_hmc_steps may be 0: the estimator benchmark includes a
        # no-refinement arm (velocity move + reweighting only).
        if self.n_hmc_steps < 0 or self.n_leapfrog <= 0 or self.step_size < 0:
            raise ValueError(f"invalid HMC configuration: {self}")

    @classmethod
    def for_task(cls, task: str) -> "HmcConfig":
        n, l, s = HMC_DEFAULTS[task]
        return cls(n_hmc_steps=n, n_leapfrog=l, step_size=s)


def velocity_move(x, v, gamma, dt):
    """Deterministic drift x + gamma * v * dt."""
    return np.asarray(x, dtype=np.float64) + gamma * np.asarray(v, dtype=np.float64) * dt


def leapfrog(x, p, grad_log_target, n_steps, step_size):
    """Symplectic integrator for H = -log_target + |p|^2 / 2."""
    x = x.copy()
    p = p.copy()
    g = _safe_grad(grad_log_target, x)
    p = p + 0.5 * step_size * g
    for i in range(n_steps):
        x = x + step_size * p
        g = _safe_grad(grad_log_target, x)
        if i < n_steps - 1:
            p = p + step_size * g
    p = p + 0.5 * step_size * g
    return x, p


def _safe_grad(grad_log_target, x):
    g = np.asarray(grad_log_target(x), dtype=np.float64)
    bad = ~np.all(np.isfinite(g), axis=-1)
    if np.any(bad):
        # poison the offending rows so their proposals are rejected
        g = g.copy()
        g[bad] = 0.0
    return g


def hmc(x0, log_target, grad_log_target, cfg: HmcConfig, rng, stats=None):
    """Metropolis-adjusted leapfrog chains targeting exp(log_target).

    ``x0`` is (K, dim); each of ``cfg.n_hmc_steps`` rounds draws fresh
    standard-normal momenta, integrates ``cfg.n_leapfrog`` steps, and
    accepts per particle. Rows whose gradient or energy turns non-finite
    are rejected for that round (counted in ``stats`` when provided).
    """
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    logp = np.asarray(log_target(x), dtype=np.float64)
    n_accept = 0
    n_reject_nonfinite = 0
    total = 0
    for _ in range(cfg.n_hmc_steps):
        p = rng.normal(size=x.shape)
        x_new, p_new = leapfrog(x, p, grad_log_target, cfg.n_leapfrog, cfg.step_size)
        logp_new = np.asarray(log_target(x_new), dtype=np.float64)
        with np.errstate(invalid="ignore"):
            log_alpha = (
                logp_new
                - logp
                - 0.5 * np.sum(p_new * p_new, axis=-1)
                + 0.5 * np.sum(p * p, axis=-1)
            )
        bad = ~np.isfinite(logp_new)
        log_alpha = np.where(bad, -np.inf, log_alpha)
        accept = np.log(rng.uniform(size=x.shape[0])) < log_alpha
        x[accept] = x_new[accept]
        logp[accept] = logp_new[accept]
        n_accept += int(accept.sum())
        n_reject_nonfinite += int(bad.sum())
        total += x.shape[0]
    if stats is not None:
        stats["accept_rate"] = n_accept / max(total, 1)
        stats["nonfinite_rejections"] = n_reject_nonfinite
    return x if np.asarray(x0).ndim > 1 else x[0]


def normalized_weights(log_weights):
    lw = np.asarray(log_weights, dtype=np.float64)
    return np.exp(lw - logsumexp(lw))


def ess(weights):
    """Effective sample size 1 / sum(w^2) of normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("negative weight")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum():.12f}, expected 1")
    return 1.0 / np.sum(w * w)


def systematic_resample(weights, K, rng):
    """Ancestor indices from one uniform offset and stratified positions.

    Offspring counts land in {floor(K*w), ceil(K*w)} for every particle.
    """
    w = np.asarray(weights, dtype=np.float64)
    positions = (rng.uniform() + np.arange(K)) / K
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard against rounding
    return np.searchsorted(cum, positions, side="right").clip(0, w.size - 1)
