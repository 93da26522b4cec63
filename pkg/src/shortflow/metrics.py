"""Sample-quality metrics: empirical Wasserstein-2 and histogram TV.

``w2_1d`` is the exact 1-D optimal transport cost between equal-size
empirical measures (sorted pairing). ``w2_nd`` solves the assignment
problem exactly on the squared-distance cost. ``tv_hist`` bins both sets
on a common grid (1-D or 2-D) and reports half the L1 difference of the
bin probabilities, flagging the degenerate no-shared-support case.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "w2_1d",
    "w2_nd",
    "tv_hist",
    "TVResult",
    "interatomic",
    "MetricsReport",
    "compute_report",
]


def w2_1d(a, b) -> float:
    """Exact 1-D W2 between equal-size empirical measures."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size != b.size:
        raise ValueError(f"sample sizes differ ({a.size} vs {b.size}); "
                         "resample to equal length first")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_nd(a, b) -> float:
    """Exact W2 between equal-size point sets via optimal assignment."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] > 2000:
        raise ValueError("assignment solver capped at 2000 points")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


@dataclass
class TVResult:
    value: float
    disjoint: bool

    def __float__(self):
        return self.value


def _common_range(a, b, expand=0.01):
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo - expand * span, hi + expand * span


def tv_hist(a, b, bins: int = 200, hist_range=None) -> TVResult:
    """Histogram total variation on a shared grid (dim <= 2).

    The grid covers the union of both sample sets (1% expanded) unless
    ``hist_range`` is given as (lo, hi) arrays. When no bin is occupied by
    both sets the distributions are flagged disjoint (TV is then 1 by
    construction and carries no information).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    dim = a.shape[1]
    if dim > 2:
        raise ValueError("histogram TV supports at most 2 dimensions")
    if hist_range is None:
        lo, hi = _common_range(a, b)
    else:
        lo, hi = (np.asarray(r, dtype=np.float64).reshape(dim) for r in hist_range)
    edges = [np.linspace(lo[i], hi[i], bins + 1) for i in range(dim)]
    ha, _ = np.histogramdd(a, bins=edges)
    hb, _ = np.histogramdd(b, bins=edges)
    pa = ha / a.shape[0]
    pb = hb / b.shape[0]
    tv = 0.5 * float(np.abs(pa - pb).sum())
    disjoint = not np.any((ha > 0) & (hb > 0))
    return TVResult(value=tv, disjoint=disjoint)


def marginal_tv(a, b, bins: int = 200) -> TVResult:
    """Mean of per-dimension 1-D histogram TVs (the data-space TV report)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    parts = [tv_hist(a[:, i], b[:, i], bins=bins) for i in range(a.shape[1])]
    return TVResult(
        value=float(np.mean([p.value for p in parts])),
        disjoint=all(p.disjoint for p in parts),
    )


def interatomic(configs, n_particles: int, spatial_dim: int) -> np.ndarray:
    """All pairwise inter-particle distances, pooled over configurations."""
    x = np.asarray(configs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != n_particles * spatial_dim:
        raise ValueError(
            f"configuration width {x.shape[1]} != "
            f"{n_particles} particles x {spatial_dim} dims"
        )
    conf = x.reshape(-1, n_particles, spatial_dim)
    i, j = np.triu_indices(n_particles, k=1)
    d = np.linalg.norm(conf[:, i, :] - conf[:, j, :], axis=-1)
    return d.ravel()


@dataclass
class MetricsReport:
    task: str
    n_used: int
    bins: int = 200
    e_w2: Optional[float] = None
    e_tv: Optional[float] = None
    e_tv_disjoint: bool = False
    x_tv: Optional[float] = None
    x_tv_disjoint: bool = False
    x_w2: Optional[float] = None
    d_tv: Optional[float] = None
    d_tv_disjoint: bool = False

    def to_dict(self):
        return asdict(self)

    def csv_row(self):
        """Table-style row; disjoint-support TVs are starred."""

        def cell(v, disjoint=False):
            if v is None:
                return ""
            return f"{v:.6g}*" if disjoint else f"{v:.6g}"

        return [
            self.task,
            str(self.n_used),
            cell(self.e_w2),
            cell(self.e_tv, self.e_tv_disjoint),
            cell(self.x_tv, self.x_tv_disjoint),
            cell(self.x_w2),
            cell(self.d_tv, self.d_tv_disjoint),
        ]

    @staticmethod
    def csv_header():
        return ["task", "n_used", "e_w2", "e_tv", "x_tv", "x_w2", "d_tv"]


# which metrics each task reports
_TASK_METRICS = {
    "gmm40": ("e_w2", "x_tv"),
    "mw32": ("e_tv", "x_w2"),
    "dw4": ("e_w2", "e_tv", "d_tv"),
    "lj13": ("e_w2", "e_tv", "d_tv"),
    "gauss-shift": ("e_w2", "x_tv"),
}


def compute_report(task: str, samples, reference, energy, n: int = 1000,
                   bins: int = 200, rng=None) -> MetricsReport:
    """Evaluate generated samples against a reference set.

    Both sets are truncated (or subsampled with ``rng``) to ``n`` points.
    Energy metrics always use the supplied energy (for particle systems
    this should be the raw, unsmoothed potential).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if samples.shape[1] != reference.shape[1]:
        raise ValueError(
            f"dimension mismatch: samples {samples.shape[1]} vs "
            f"reference {reference.shape[1]}"
        )
    n = min(n, samples.shape[0], reference.shape[0])

    def cut(x):
        if x.shape[0] == n:
            return x
        if rng is None:
            return x[:n]
        return x[rng.choice(x.shape[0], size=n, replace=False)]

    s = cut(samples)
    r = cut(reference)
    wanted = _TASK_METRICS.get(task, ("e_w2",))
    rep = MetricsReport(task=task, n_used=n, bins=bins)
    es = energy.potential(s)
    er = energy.potential(r)
    if "e_w2" in wanted:
        rep.e_w2 = w2_1d(es, er)
    if "e_tv" in wanted:
        tv = tv_hist(es, er, bins=bins)
        rep.e_tv, rep.e_tv_disjoint = tv.value, tv.disjoint
    if "x_tv" in wanted:
        tv = marginal_tv(s, r, bins=bins)
        rep.x_tv, rep.x_tv_disjoint = tv.value, tv.disjoint
    if "x_w2" in wanted:
        rep.x_w2 = w2_nd(s, r)
    if "d_tv" in wanted:
        ds = interatomic(s, energy.n_particles, energy.spatial_dim)
        dr = interatomic(r, energy.n_particles, energy.spatial_dim)
        tv = tv_hist(ds, dr, bins=bins)
        rep.d_tv, rep.d_tv_disjoint = tv.value, tv.disjoint
    return rep
