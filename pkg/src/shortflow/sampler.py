"""Few-step generation: Euler stepping of the shortcut model.

``sample`` draws from the base density and takes M uniform steps of size
1/M, querying the model's average-velocity head at interval d = 1/M (or
its d = 0 slice for a plain fine-step flow integration). Times are formed
as m/M each step, so the terminal time is exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as adx

__all__ = ["SampleRun", "sample", "log_density_diagnostic"]


@dataclass
class SampleRun:
    M: int
    n: int
    samples: np.ndarray
    trajectory: Optional[np.ndarray] = None  # (M+1, n, dim) when recorded
    times: Optional[np.ndarray] = None


def sample(model, p0_sampler, M: int, n: int, rng, record: bool = False,
           shortcut: bool = True) -> SampleRun:
    """Generate ``n`` samples with an ``M``-step budget.

    ``p0_sampler(n, rng)`` draws the starting points. With ``shortcut`` the
    model is queried at interval d = 1/M (the average-velocity jump); with
    ``shortcut=False`` it integrates the instantaneous d = 0 field, which
    is the trajectory mode the density diagnostic expects.
    """
    if M < 1:
        raise ValueError("need at least one step")
    x = np.asarray(p0_sampler(n, rng), dtype=np.float64)
    d = 1.0 / M
    traj = [x.copy()] if record else None
    times = [0.0]
    for m in range(M):
        t = m / M
        v = np.asarray(model.forward(x, t, d if shortcut else 0.0))
        x = x + v * d
        if not np.all(np.isfinite(x)):
            raise ArithmeticError(f"non-finite state after step {m}")
        if record:
            traj.append(x.copy())
        times.append((m + 1) / M)
    return SampleRun(
        M=M,
        n=n,
        samples=x,
        trajectory=np.asarray(traj) if record else None,
        times=np.asarray(times) if record else None,
    )


def log_density_diagnostic(model, run: SampleRun, log_p0) -> np.ndarray:
    """Per-sample terminal log density estimate along a recorded flow.

    Integrates the divergence of the d = 0 velocity slice along the stored
    trajectory (Euler quadrature):  log p1(x1) ~= log p0(x0) - sum div * dt.
    This is a diagnostic: it is only exact in the fine-step limit of the
    instantaneous field, not for finite shortcut jumps.
    """
    if run.trajectory is None:
        raise ValueError("run has no recorded trajectory")
    traj = run.trajectory
    times = run.times
    out = np.asarray(log_p0(traj[0]), dtype=np.float64).copy()
    for m in range(len(times) - 1):
        dt = times[m + 1] - times[m]
        div = adx.divergence(
            lambda xd, t=times[m]: model.forward(xd, t, 0.0), traj[m]
        )
        out -= div * dt
    return out
