"""Training loop: SMC-generated data, residual + consistency loss, AdamW.

One epoch jitters the time schedule, runs the velocity-driven SMC sweep
with the current (frozen) model, and then walks the per-time ensembles:
for each time it caches the control-variate estimate of the log-partition
derivative, builds a perturbed training batch, and takes one optimizer
step on

    mean_b [ delta^2 + lambda * || s(x, d) - s_target ||^2 ]

where delta is the pointwise continuity residual of the d=0 velocity slice
and s_target is the two-sub-step self-distillation target with a random
split fraction, both under stopped gradients. An optional second step per
time resamples the batch proportionally to the per-point squared residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as adx
from .mcmc import HmcConfig
from .net import ShortcutModel
from .smc import ParticleEnsemble, Schedule, dtlogz_stein, vd_smc, xi
from .targets import AnnealedPath

__all__ = [
    "RunConfig",
    "TrainBatch",
    "AdamWState",
    "residual_values",
    "shortcut_target",
    "loss",
    "loss_and_grad",
    "make_qt",
    "optimizer_step",
    "train_epoch",
    "train_loop",
]


@dataclass
class RunConfig:
    task: str = "gauss-shift"
    seed: int = 0
    epochs: int = 100
    k_particles: int = 128
    m_steps: int = 16
    steps_per_epoch: Optional[int] = None  # None: one step per schedule time
    consistency_weight: float = 1.0  # lambda
    learning_rate: float = 1.0e-4
    weight_decay: float = 1.0e-6
    grad_clip: float = 1.0
    perturbation_scale: Optional[float] = None  # None: 0.1 * coord scale
    rar_resample: bool = False
    midpoint_split: bool = False  # fixed alpha = 1/2 instead of uniform
    ess_min: float = 0.5
    gamma: float = 1.0
    hidden: int = 128
    n_layers: int = 4
    checkpoint_every: int = 50
    early_stop_patience: Optional[int] = None  # epochs without MA-20 improvement

    def __post_init__(self):
        if self.consistency_weight < 0:
            raise ValueError("consistency weight must be >= 0")
        for name in ("epochs", "k_particles", "m_steps", "hidden", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainBatch:
    t: float
    points: np.ndarray
    weights: np.ndarray
    c_t: float
    rar_points: Optional[np.ndarray] = None


def residual_values(path: AnnealedPath, t: float, x: np.ndarray, model,
                    c_t: float) -> np.ndarray:
    """Continuity residual delta per point, frozen parameters.

    delta = (dt log_tilde - c_t) + v . grad log_tilde + div v, with v the
    d=0 slice of the model.
    """
    return xi(path, t, x, model) - c_t


def shortcut_target(model: ShortcutModel, x: np.ndarray, t: float, d, alpha):
    """Two-sub-step self-distillation target, all under frozen parameters.

    alpha * s(x, t, alpha*d) + (1-alpha) * s(x', t+alpha*d, (1-alpha)*d)
    with x' = x + s(x, t, alpha*d) * alpha * d.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (B,)).copy()
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,)).copy()
    d1 = alpha * d
    s1 = np.asarray(model.forward(x, t, d1))
    x_mid = x + s1 * d1[:, None]
    s2 = np.asarray(model.forward(x_mid, t + d1, (1.0 - alpha) * d))
    return alpha[:, None] * s1 + (1.0 - alpha)[:, None] * s2


def _draw_d_alpha(t: float, B: int, rng, midpoint: bool):
    d = rng.uniform(0.0, 1.0, size=B)
    d = np.minimum(d, 1.0 - t)  # keep t + d inside the path
    alpha = np.full(B, 0.5) if midpoint else rng.uniform(0.0, 1.0, size=B)
    return d, alpha


def _loss_parts(batch: TrainBatch, model: ShortcutModel, lam: float, rng,
                path: AnnealedPath, params, tape, midpoint: bool):
    """Build residual and consistency nodes on ``tape``; returns Vars."""
    x = batch.points
    B = x.shape[0]
    t = batch.t
    score = path.grad_log_tilde(t, x)
    dt_vals = path.dt_log_tilde(x)

    vel, div = adx.velocity_and_divergence(
        lambda xd: model.forward(xd, t, 0.0, params=params), x, tape=tape
    )
    transport = (vel * tape.constant(score)).sum(axis=1)
    delta = tape.constant(dt_vals - batch.c_t) + transport + div
    residual_term = (delta * delta).sum() / B

    if lam == 0.0:
        return residual_term, None

    d, alpha = _draw_d_alpha(t, B, rng, midpoint)
    target = shortcut_target(model, x, t, d, alpha)  # frozen branch
    live = model.forward(x, t, d, params=params)
    diff = live - tape.constant(target)
    consistency_term = (diff * diff).sum() / B
    return residual_term, consistency_term


def loss_and_grad(batch: TrainBatch, model: ShortcutModel, lam: float, rng,
                  path: AnnealedPath, midpoint: bool = False):
    """Total loss, its (residual, consistency) decomposition, and gradients."""
    parts = {}

    def f(params):
        res, cons = _loss_parts(
            batch, model, lam, rng, path, params,
            next(iter(params.values())).tape, midpoint=midpoint,
        )
        parts["residual"] = float(res.val)
        parts["consistency"] = 0.0 if cons is None else float(cons.val)
        return res if cons is None else res + lam * cons

    value, grads = adx.value_and_grad(f, model.params)
    return value, parts, grads


def loss(batch: TrainBatch, model: ShortcutModel, lam: float, rng,
         path: AnnealedPath) -> float:
    """Loss value only (same construction as the training step)."""
    value, _, _ = loss_and_grad(batch, model, lam, rng, path)
    return value


def make_qt(ensemble: ParticleEnsemble, perturbation_scale: float,
            rar_resample: bool, model, rng, *, path: AnnealedPath = None,
            c_t: float = None) -> TrainBatch:
    """Training batch at the ensemble's time: particles plus isotropic noise.

    With ``rar_resample`` the batch also carries a second point set,
    resampled from the batch in proportion to the per-point squared
    residual (categorical, with replacement), for an extra update step.
    ``c_t`` is computed here from the ensemble when not supplied.
    """
    pts = ensemble.positions + perturbation_scale * rng.normal(
        size=ensemble.positions.shape
    )
    if c_t is None:
        if path is None:
            raise ValueError("need path to compute c_t")
        c_t = dtlogz_stein(ensemble, path, model)
    batch = TrainBatch(
        t=ensemble.t, points=pts, weights=ensemble.weights, c_t=float(c_t)
    )
    if rar_resample:
        if path is None:
            raise ValueError("need path for residual-based resampling")
        delta = residual_values(path, ensemble.t, pts, model, c_t)
        probs = delta * delta
        total = probs.sum()
        if total <= 0 or not np.isfinite(total):
            probs = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            probs = probs / total
        idx = rng.choice(pts.shape[0], size=pts.shape[0], p=probs)
        batch.rar_points = pts[idx]
    return batch


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamWState,
                   learning_rate: float, weight_decay: float,
                   grad_clip: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1.0e-8) -> AdamWState:
    """Decoupled-weight-decay adaptive moment update, in place.

    The gradient is globally l2-clipped *before* entering the moments.
    """
    gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = 1.0 if gnorm <= grad_clip or gnorm == 0.0 else grad_clip / gnorm
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        g = g * scale
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[k] = params[k] - learning_rate * update - learning_rate * weight_decay * params[k]
    return state


def perturbation_for(cfg: RunConfig, path: AnnealedPath) -> float:
    if cfg.perturbation_scale is not None:
        return cfg.perturbation_scale
    return 0.1 * path.target.coord_scale


def train_epoch(model: ShortcutModel, path: AnnealedPath, cfg: RunConfig,
                rng, *, opt_state: AdamWState, hmc_cfg: HmcConfig,
                schedule: Schedule):
    """One epoch; mutates model parameters and optimizer state in place.

    Returns a stats dict: losses and their decomposition, per-time c_t,
    the ESS trace, and the resample count.
    """
    jittered = schedule.jitter(rng)
    ensembles = vd_smc(
        model, path, cfg.k_particles, jittered, hmc_cfg,
        ess_min=cfg.ess_min, gamma=cfg.gamma, rng=rng,
    )
    sigma = perturbation_for(cfg, path)
    if cfg.steps_per_epoch is not None and cfg.steps_per_epoch < len(ensembles):
        pick = rng.choice(len(ensembles), size=cfg.steps_per_epoch, replace=False)
        ensembles = [ensembles[i] for i in sorted(pick)]

    losses, res_parts, cons_parts, cts = [], [], [], []
    for ens in ensembles:
        batch = make_qt(
            ens, sigma, cfg.rar_resample, model, rng, path=path
        )
        cts.append((ens.t, batch.c_t))
        for pts in ([batch.points] if batch.rar_points is None
                    else [batch.points, batch.rar_points]):
            step_batch = TrainBatch(
                t=batch.t, points=pts, weights=batch.weights, c_t=batch.c_t
            )
            value, parts, grads = _loss_step(step_batch, model, cfg, rng, path)
            opt_state = optimizer_step(
                model.params, grads, opt_state,
                cfg.learning_rate, cfg.weight_decay, cfg.grad_clip,
            )
            losses.append(value)
            res_parts.append(parts["residual"])
            cons_parts.append(parts["consistency"])
    return {
        "loss": float(np.mean(losses)),
        "residual": float(np.mean(res_parts)),
        "consistency": float(np.mean(cons_parts)),
        "c_t": cts,
        "ess": [float(e.ess) for e in ensembles],
        "resampled": int(sum(e.resampled for e in ensembles)),
    }


def _loss_step(batch, model, cfg, rng, path):
    return loss_and_grad(
        batch, model, cfg.consistency_weight, rng, path,
        midpoint=cfg.midpoint_split,
    )


def train_loop(model: ShortcutModel, path: AnnealedPath, cfg: RunConfig, rng,
               *, hmc_cfg: HmcConfig, on_epoch=None, start_epoch: int = 0):
    """Run epochs ``start_epoch..cfg.epochs`` with per-epoch RNG streams.

    Streams are spawned by epoch index from the master generator, so a
    resumed run replays the identical per-epoch randomness. ``on_epoch
    (epoch_index, stats)`` fires after each epoch (logging, checkpointing).
    Early stopping, when enabled, watches a 20-epoch moving average of the
    total loss.
    """
    schedule = Schedule.uniform(cfg.m_steps)
    opt_state = AdamWState()
    history = []
    best_ma = np.inf
    stale = 0
    seq = rng.spawn(cfg.epochs) if hasattr(rng, "spawn") else None
    for epoch in range(start_epoch, cfg.epochs):
        epoch_rng = seq[epoch] if seq is not None else rng
        stats = train_epoch(
            model, path, cfg, epoch_rng,
            opt_state=opt_state, hmc_cfg=hmc_cfg, schedule=schedule,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
        if cfg.early_stop_patience is not None and len(history) >= 20:
            ma = float(np.mean([h["loss"] for h in history[-20:]]))
            if ma < best_ma - 1e-12:
                best_ma = ma
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return history
