"""Gaussian MLP policy and value function with hand-rolled backprop.

Fixed architecture: obs -> 64 -> 64 -> 64 -> out, tanh hidden units, linear
output, state-independent diagonal log-std.  Observations are normalized by
a running mean/variance whose snapshot is frozen inside the parameter struct,
so a checkpoint reproduces its outputs bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.7
HIDDEN = (64, 64, 64)
_MAGIC = b"GFPK1"
_LOG_2PI = math.log(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


@dataclass
class MLPParams:
    layers: List[Tuple[np.ndarray, np.ndarray]]    # (W: in x out, b: out)

    def copy(self) -> "MLPParams":
        return MLPParams([(W.copy(), b.copy()) for W, b in self.layers])


@dataclass
class PolicyParams:
    pi: MLPParams
    log_std: np.ndarray
    vf: MLPParams
    obs_mean: np.ndarray
    obs_var: np.ndarray
    obs_count: float = 0.0

    @property
    def obs_dim(self) -> int:
        return self.pi.layers[0][0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.pi.layers[-1][0].shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.pi.copy(), self.log_std.copy(), self.vf.copy(),
                            self.obs_mean.copy(), self.obs_var.copy(),
                            self.obs_count)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
                gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * np.ascontiguousarray(q[:n_in, :n_out])


def _init_mlp(rng, dims, out_gain):
    layers = []
    for i in range(len(dims) - 1):
        gain = out_gain if i == len(dims) - 2 else 1.0
        W = _orthogonal(rng, dims[i], dims[i + 1], gain)
        layers.append((W, np.zeros(dims[i + 1])))
    return MLPParams(layers)


def init_params(obs_dim: int, act_dim: int, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    # full-scale output head: a near-zero head starts inside the
    # mirror-symmetric subspace, leaving the symmetry loss no headroom
    pi = _init_mlp(rng, (obs_dim,) + HIDDEN + (act_dim,), 1.0)
    vf = _init_mlp(rng, (obs_dim,) + HIDDEN + (1,), 1.0)
    return PolicyParams(pi=pi, log_std=np.full(act_dim, LOG_STD_INIT),
                        vf=vf, obs_mean=np.zeros(obs_dim),
                        obs_var=np.ones(obs_dim), obs_count=0.0)


# -- normalization -------------------------------------------------------------


class RunningStat:
    """Streaming mean/variance, merged batch-at-a-time (Chan's update)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0

    def update(self, batch: np.ndarray):
        batch = np.atleast_2d(batch)
        n = batch.shape[0]
        if n == 0:
            return
        bmean = batch.mean(axis=0)
        bvar = batch.var(axis=0)
        if self.count == 0.0:
            self.mean, self.var, self.count = bmean, bvar, float(n)
            return
        tot = self.count + n
        delta = bmean - self.mean
        m_a = self.var * self.count
        m_b = bvar * n
        self.var = (m_a + m_b + delta * delta * self.count * n / tot) / tot
        self.mean = self.mean + delta * n / tot
        self.count = tot

    def freeze_into(self, params: PolicyParams):
        params.obs_mean = self.mean.copy()
        params.obs_var = self.var.copy()
        params.obs_count = self.count

    @classmethod
    def from_params(cls, params: PolicyParams) -> "RunningStat":
        rs = cls(params.obs_mean.shape[0])
        rs.mean = params.obs_mean.copy()
        rs.var = params.obs_var.copy()
        rs.count = params.obs_count
        return rs


def normalize_obs(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs)
    if obs.shape[-1] != params.obs_mean.shape[0]:
        raise ShapeMismatch(f"obs width {obs.shape[-1]} != {params.obs_mean.shape[0]}")
    return (obs - params.obs_mean) / np.sqrt(params.obs_var + 1e-8)


# -- forward / backward --------------------------------------------------------


def mlp_forward(p: MLPParams, X: np.ndarray):
    h = np.atleast_2d(X)
    acts = [h]
    n = len(p.layers)
    for i, (W, b) in enumerate(p.layers):
        if h.shape[1] != W.shape[0]:
            raise ShapeMismatch(f"layer {i}: input width {h.shape[1]} != {W.shape[0]}")
        z = h @ W + b
        h = z if i == n - 1 else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(p: MLPParams, acts, dY: np.ndarray):
    """Gradients of sum(dY * Y) w.r.t. layers and input."""
    dY = np.atleast_2d(dY)
    if dY.shape != acts[-1].shape:
        raise ShapeMismatch(f"upstream shape {dY.shape} != output {acts[-1].shape}")
    grads = [None] * len(p.layers)
    d = dY
    for i in range(len(p.layers) - 1, -1, -1):
        W, _ = p.layers[i]
        if i != len(p.layers) - 1:
            d = d * (1.0 - acts[i + 1] ** 2)    # through tanh
        gW = acts[i].T @ d
        gb = d.sum(axis=0)
        grads[i] = (gW, gb)
        d = d @ W.T
    return grads, d


def mean_action(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    single = np.ndim(obs) == 1
    out, _ = mlp_forward(params.pi, normalize_obs(params, obs))
    return out[0] if single else out


def value(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    single = np.ndim(obs) == 1
    out, _ = mlp_forward(params.vf, normalize_obs(params, obs))
    return float(out[0, 0]) if single else out[:, 0]


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray,
                      a: np.ndarray) -> np.ndarray:
    z = (a - mean) / np.exp(log_std)
    return -0.5 * ((z * z).sum(axis=-1)
                   + 2.0 * log_std.sum()
                   + log_std.shape[-1] * _LOG_2PI)


def gaussian_log_prob_grads(mean: np.ndarray, log_std: np.ndarray,
                            a: np.ndarray):
    """d log N(a; mean, exp(log_std)) w.r.t. mean and log_std.

    Returns (dmean, dlog_std) per sample; at a = mean the log_std gradient
    is exactly -1 in every dimension.
    """
    std = np.exp(log_std)
    z = (a - mean) / std
    return z / std, z * z - 1.0


def sample_action(params: PolicyParams, obs: np.ndarray,
                  rng: np.random.Generator):
    mu = mean_action(params, obs)
    std = np.exp(params.log_std)
    a = mu + std * rng.standard_normal(mu.shape)
    return a, gaussian_log_prob(mu, params.log_std, a)


def clamp_log_std(params: PolicyParams):
    np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX, out=params.log_std)


# -- flat parameter vector for the optimizer ------------------------------------


def _mlp_arrays(p: MLPParams):
    for W, b in p.layers:
        yield W
        yield b


def trainable_arrays(params: PolicyParams):
    """Optimizer-visible arrays in a fixed order (normalization excluded)."""
    yield from _mlp_arrays(params.pi)
    yield params.log_std
    yield from _mlp_arrays(params.vf)


def flatten(params: PolicyParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in trainable_arrays(params)])


def unflatten_into(params: PolicyParams, vec: np.ndarray):
    i = 0
    for a in trainable_arrays(params):
        if vec.size - i < a.size:
            raise ShapeMismatch(f"flat vector too short at offset {i}")
        a[...] = vec[i:i + a.size].reshape(a.shape)
        i += a.size
    if i != vec.size:
        raise ShapeMismatch(f"flat vector size {vec.size}, expected {i}")


def zero_grads_like(params: PolicyParams) -> List[np.ndarray]:
    return [np.zeros_like(a) for a in trainable_arrays(params)]


# -- checkpoint ------------------------------------------------------------------


def _all_arrays(params: PolicyParams):
    yield from trainable_arrays(params)
    yield params.obs_mean
    yield params.obs_var


def save_params(params: PolicyParams, path: str):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", params.obs_dim, params.act_dim,
                            len(list(_all_arrays(params)))))
        f.write(struct.pack("<d", params.obs_count))
        for a in _all_arrays(params):
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path: str) -> PolicyParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != _MAGIC:
        raise ValueError("not a policy checkpoint (bad magic)")
    off = 5
    obs_dim, act_dim, n_arrays = struct.unpack_from("<III", data, off)
    off += 12
    (obs_count,) = struct.unpack_from("<d", data, off)
    off += 8
    arrays = []
    for _ in range(n_arrays):
        (nd,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        size = int(np.prod(shape)) if nd else 1
        a = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        arrays.append(a.astype(np.float64))
        off += 8 * size
    params = init_params(obs_dim, act_dim)
    flat_arrays = list(trainable_arrays(params))
    if len(arrays) != len(flat_arrays) + 2:
        raise ValueError("checkpoint array count mismatch")
    for dst, src in zip(flat_arrays, arrays):
        if dst.shape != src.shape:
            raise ShapeMismatch(f"checkpoint shape {src.shape} != {dst.shape}")
        dst[...] = src
    params.obs_mean = arrays[-2]
    params.obs_var = arrays[-1]
    params.obs_count = obs_count
    return params
