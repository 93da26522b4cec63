"""The shortcut velocity model: an MLP over (x, enc(t), enc(d)).

``forward(x, t, d)`` predicts the average velocity for jumping a time
interval of length ``d`` starting at ``t``; the ``d = 0`` slice is the
instantaneous velocity field, and there is exactly one code path for both
(no division by d anywhere). The same forward runs on plain arrays (fast
path, frozen parameters) or on autodiff Vars/Duals (training path) --
parameters and inputs may independently be either kind.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as adx

__all__ = ["Architecture", "ShortcutModel", "init", "time_encoding",
           "save_checkpoint", "load_checkpoint", "checkpoint_hash",
           "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"NFS2"
CHECKPOINT_VERSION = 1


@dataclass
class Architecture:
    dim: int
    hidden: int = 128
    n_layers: int = 4
    n_freqs: int = 64
    max_freq: float = 1.0e4
    output_scale: float = 1.0
    pairwise: bool = False
    n_particles: Optional[int] = None
    spatial_dim: Optional[int] = None

    @property
    def n_pairs(self) -> int:
        if not self.pairwise:
            return 0
        return self.n_particles * (self.n_particles - 1) // 2

    @property
    def in_features(self) -> int:
        return self.dim + self.n_pairs + 2 * (2 * self.n_freqs)

    def param_count(self) -> int:
        n = 0
        f_in = self.in_features
        for _ in range(self.n_layers):
            n += f_in * self.hidden + self.hidden  # linear
            n += 2 * self.hidden  # affine norm
            f_in = self.hidden
        n += self.hidden * self.dim + self.dim  # output layer
        return n


def _freqs(arch: Architecture) -> np.ndarray:
    # geometric ladder of angular frequencies from 1 to max_freq
    return np.exp(np.linspace(0.0, np.log(arch.max_freq), arch.n_freqs))


def time_encoding(value, arch: Architecture, batch: int) -> np.ndarray:
    """Interleaved (sin, cos) features of a scalar or per-row time value.

    At value 0 the pattern is (0, 1, 0, 1, ...).
    """
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(batch, float(v))
    ang = v[:, None] * _freqs(arch)[None, :]
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(batch, 2 * arch.n_freqs)


def _pairwise_features(x, arch: Architecture):
    """Pairwise inter-particle distances, differentiable through x."""
    n, s = arch.n_particles, arch.spatial_dim
    pi, pj = np.triu_indices(n, k=1)
    cols_i = (pi[:, None] * s + np.arange(s)).ravel()
    cols_j = (pj[:, None] * s + np.arange(s)).ravel()
    a = x[:, cols_i]
    b = x[:, cols_j]
    diff = a - b
    sq = adx.reshape(diff * diff, (-1, len(pi), s))
    # small floor keeps the sqrt differentiable if particles ever coincide
    return (adx.asum(sq, axis=2) + 1e-12) ** 0.5


@dataclass
class ShortcutModel:
    arch: Architecture
    params: dict

    def forward(self, x, t, d, params=None):
        """Average-velocity prediction s(x, t, d) with output dim = dim.

        ``x``: (B, dim) array, Var, or Dual (a single (dim,) array is
        promoted). ``t``/``d``: scalars or per-row arrays in [0, 1] with
        t + d <= 1 (small slack for roundoff).
        """
        p = self.params if params is None else params
        squeeze = isinstance(x, np.ndarray) and x.ndim == 1
        if squeeze:
            x = x[None, :]
        B = x.shape[0]
        _check_times(t, d)
        feats = [x]
        if self.arch.pairwise:
            feats.append(_pairwise_features(x, self.arch))
        feats.append(time_encoding(t, self.arch, B))
        feats.append(time_encoding(d, self.arch, B))
        h = adx.concat(feats, axis=1)
        for i in range(self.arch.n_layers):
            h = h @ p[f"W{i}"] + p[f"b{i}"]
            _check_finite(h, i)
            h = _layer_norm(h, p[f"g{i}"], p[f"c{i}"])
            h = adx.swish(h)
        out = (h @ p["W_out"] + p["b_out"]) * self.arch.output_scale
        _check_finite(out, self.arch.n_layers)
        return out[0] if squeeze else out

    def velocity(self, x, t, params=None):
        """The d -> 0 slice; the single code path shared with forward."""
        return self.forward(x, t, 0.0, params=params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _check_times(t, d):
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(t < -1e-12) or np.any(t > 1.0 + 1e-9):
        raise ValueError(f"time t outside [0, 1]: {t}")
    if np.any(d < -1e-12) or np.any(d > 1.0 + 1e-9):
        raise ValueError(f"interval d outside [0, 1]: {d}")
    if np.any(t + d > 1.0 + 1e-9):
        raise ValueError("t + d exceeds 1")


def _check_finite(h, layer):
    val = h.val if isinstance(h, (adx.Var, adx.Dual)) else h
    if not np.all(np.isfinite(val)):
        raise adx.NonFiniteError(f"non-finite activation in layer {layer}")


def _layer_norm(h, gain, bias, eps=1e-6):
    mu = adx.amean(h, axis=1, keepdims=True)
    cen = h - mu
    var = adx.amean(cen * cen, axis=1, keepdims=True)
    return cen * (var + eps) ** -0.5 * gain + bias


def init(arch: Architecture, rng) -> ShortcutModel:
    """Fan-in-scaled random weights; the output layer starts at zero so the
    initial velocity field is identically zero."""
    params = {}
    f_in = arch.in_features
    for i in range(arch.n_layers):
        params[f"W{i}"] = rng.normal(size=(f_in, arch.hidden)) / np.sqrt(f_in)
        params[f"b{i}"] = np.zeros(arch.hidden)
        params[f"g{i}"] = np.ones(arch.hidden)
        params[f"c{i}"] = np.zeros(arch.hidden)
        f_in = arch.hidden
    params["W_out"] = np.zeros((arch.hidden, arch.dim))
    params["b_out"] = np.zeros(arch.dim)
    return ShortcutModel(arch=arch, params=params)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, arch JSON, raw little-endian f64
# parameter block (fixed key order), training-state JSON
# ---------------------------------------------------------------------------


def _param_order(arch: Architecture):
    keys = []
    for i in range(arch.n_layers):
        keys += [f"W{i}", f"b{i}", f"g{i}", f"c{i}"]
    keys += ["W_out", "b_out"]
    return keys


def flatten_params(model: ShortcutModel) -> np.ndarray:
    return np.concatenate(
        [model.params[k].ravel() for k in _param_order(model.arch)]
    )


def unflatten_params(arch: Architecture, flat: np.ndarray) -> dict:
    params = {}
    o = 0
    f_in = arch.in_features
    for i in range(arch.n_layers):
        shapes = {
            f"W{i}": (f_in, arch.hidden),
            f"b{i}": (arch.hidden,),
            f"g{i}": (arch.hidden,),
            f"c{i}": (arch.hidden,),
        }
        for k, sh in shapes.items():
            sz = int(np.prod(sh))
            params[k] = flat[o : o + sz].reshape(sh).copy()
            o += sz
        f_in = arch.hidden
    for k, sh in {"W_out": (arch.hidden, arch.dim), "b_out": (arch.dim,)}.items():
        sz = int(np.prod(sh))
        params[k] = flat[o : o + sz].reshape(sh).copy()
        o += sz
    if o != flat.size:
        raise ValueError(f"parameter block size {flat.size} != expected {o}")
    return params


def save_checkpoint(path, model: ShortcutModel, train_state: dict | None = None):
    flat = flatten_params(model)
    arch_json = json.dumps(asdict(model.arch), sort_keys=True).encode()
    meta_json = json.dumps(train_state or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)


def load_checkpoint(path):
    """Returns (model, train_state)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(
                f"bad checkpoint magic {magic!r}; expected {CHECKPOINT_MAGIC!r}"
            )
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (alen,) = struct.unpack("<I", fh.read(4))
        arch = Architecture(**json.loads(fh.read(alen).decode()))
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode())
    if flat.size != arch.param_count():
        raise ValueError(
            f"parameter count {flat.size} does not match architecture "
            f"({arch.param_count()})"
        )
    return ShortcutModel(arch=arch, params=unflatten_params(arch, flat)), meta


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
