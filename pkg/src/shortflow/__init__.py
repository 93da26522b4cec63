"""shortflow: a velocity-field neural sampler for unnormalized densities.

Train a network whose d=0 slice is a velocity field transporting a simple
base density to a target along a geometric annealing path, with training
data and log-partition-derivative estimates produced by a velocity-driven
sequential Monte Carlo sweep; an interval-consistency term lets the same
network jump the path in a handful of steps at generation time.
"""

from . import autodiff, metrics, mcmc, net, sampler, smc, targets, train
from .mcmc import HmcConfig, ess, hmc, systematic_resample, velocity_move
from .metrics import MetricsReport, interatomic, tv_hist, w2_1d, w2_nd
from .net import Architecture, ShortcutModel, init, load_checkpoint, save_checkpoint
from .sampler import SampleRun, log_density_diagnostic, sample
from .smc import (
    ParticleEnsemble,
    Schedule,
    beta_star,
    dtlogz_is,
    dtlogz_naive,
    dtlogz_stein,
    vd_smc,
    xi,
)
from .targets import AnnealedPath, Energy, gauss_shift, gmm40, mw32, dw4, lj13
from .train import RunConfig, TrainBatch, make_qt, optimizer_step, train_epoch

__version__ = "0.1.0"
