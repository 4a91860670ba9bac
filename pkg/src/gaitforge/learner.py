"""Clipped-surrogate policy optimization with a mirror symmetry penalty.

One training iteration collects a fixed budget of environment steps across
workers, estimates advantages with GAE, then runs several epochs of
minibatched Adam on

    L = L_surrogate + w_sym * L_sym + value_coeff * L_value

where L_sym penalizes the squared mismatch between the policy mean and the
mirrored mean of the mirrored observation.  The symmetry term lives in the
optimizer objective only; it never touches rewards.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import policy as policy_mod
from .assistant import Lesson, LessonRange
from .charmodel import CharacterModel, mirror_observation
from .env import EnvConfig, LocomotionEnv, RewardConfig
from .policy import (
    PolicyParams,
    clamp_log_std,
    flatten,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    mlp_backward,
    mlp_forward,
    normalize_obs,
    sample_action,
    unflatten_into,
)


class EmptyBatch(ValueError):
    """Raised when an operation needs at least one rollout step."""


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    lr_decay_iters: int = 1500      # linear anneal anchor, not the run length
    epochs: int = 10
    minibatch: int = 4096
    w_sym: float = 4.0
    value_coeff: float = 0.5
    batch_steps: int = 20000
    workers: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not self.clip_eps > 0.0:
            raise ValueError("clip_eps must be positive")
        if self.w_sym < 0.0:
            raise ValueError("w_sym must be nonnegative")
        if self.lr <= 0.0 or self.lr_decay_iters < 1:
            raise ValueError("bad learning-rate schedule")
        if min(self.epochs, self.minibatch, self.batch_steps, self.workers) < 1:
            raise ValueError("epochs, minibatch, batch_steps, workers must be >= 1")


@dataclass
class RolloutBatch:
    """Flat step arrays plus segment boundaries.

    starts has one entry per segment plus a trailing total count; segment i
    occupies [starts[i], starts[i+1]).  dones is nonzero only at segment
    ends; a zero there marks a truncated segment whose tail value
    last_values[i] bootstraps the advantage recursion.
    """

    observations: np.ndarray        # (B, obs_dim)
    actions: np.ndarray             # (B, act_dim)
    log_probs_old: np.ndarray       # (B,)
    rewards: np.ndarray             # (B,)
    dones: np.ndarray               # (B,)
    values_old: np.ndarray          # (B,)
    starts: np.ndarray              # (n_segments + 1,) int
    last_values: np.ndarray         # (n_segments,)

    @property
    def n_steps(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def n_segments(self) -> int:
        return int(self.starts.shape[0]) - 1

    def segment_slices(self):
        for i in range(self.n_segments):
            yield slice(int(self.starts[i]), int(self.starts[i + 1]))

    def segment_lengths(self) -> np.ndarray:
        return np.diff(self.starts)

    def validate(self):
        B = self.n_steps
        if self.starts[0] != 0 or self.starts[-1] != B:
            raise ValueError("starts must run from 0 to the step count")
        if np.any(np.diff(self.starts) <= 0):
            raise ValueError("segments must be nonempty and ordered")
        interior = np.ones(B, dtype=bool)
        interior[self.starts[1:] - 1] = False
        if np.any(self.dones[interior] != 0.0):
            raise ValueError("done flags are only allowed at segment ends")
        if not np.all(np.isfinite(self.log_probs_old)):
            raise ValueError("log_probs_old must be finite")

    @classmethod
    def concat(cls, chunks: Sequence["RolloutBatch"]) -> "RolloutBatch":
        chunks = [c for c in chunks if c.n_steps > 0]
        if not chunks:
            raise EmptyBatch("no rollout steps collected")
        offs = np.cumsum([0] + [c.n_steps for c in chunks])
        starts = np.concatenate(
            [c.starts[:-1] + o for c, o in zip(chunks, offs)] + [offs[-1:]])
        return cls(
            observations=np.concatenate([c.observations for c in chunks]),
            actions=np.concatenate([c.actions for c in chunks]),
            log_probs_old=np.concatenate([c.log_probs_old for c in chunks]),
            rewards=np.concatenate([c.rewards for c in chunks]),
            dones=np.concatenate([c.dones for c in chunks]),
            values_old=np.concatenate([c.values_old for c in chunks]),
            starts=starts.astype(np.int64),
            last_values=np.concatenate([c.last_values for c in chunks]),
        )


# -- advantage estimation --------------------------------------------------------


def compute_gae(batch: RolloutBatch, gamma: float, lam: float):
    """Raw GAE advantages and value-regression targets.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t), accumulated
    backward within each segment; the step after a truncated segment uses the
    stored bootstrap value.  Returns (advantages, targets), unnormalized.
    """
    if batch.n_steps == 0 or batch.n_segments == 0:
        raise EmptyBatch("cannot estimate advantages of an empty batch")
    adv = np.zeros(batch.n_steps)
    for i, seg in enumerate(batch.segment_slices()):
        r = batch.rewards[seg]
        v = batch.values_old[seg]
        d = batch.dones[seg]
        v_next = np.empty_like(v)
        v_next[:-1] = v[1:]
        v_next[-1] = batch.last_values[i]
        delta = r + gamma * v_next * (1.0 - d) - v
        acc = 0.0
        out = adv[seg]
        for t in range(len(r) - 1, -1, -1):
            acc = delta[t] + gamma * lam * (1.0 - d[t]) * acc
            out[t] = acc
    return adv, adv + batch.values_old


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    mu = adv.mean()
    sd = adv.std()
    if not np.isfinite(sd) or sd < 1e-12:
        return adv - mu
    return (adv - mu) / sd


def avg_return(batch: RolloutBatch) -> float:
    """Mean undiscounted reward sum per segment."""
    if batch.n_steps == 0 or batch.n_segments == 0:
        raise EmptyBatch("no rollouts to average")
    return float(np.mean([batch.rewards[s].sum() for s in batch.segment_slices()]))


def avg_length(batch: RolloutBatch) -> float:
    if batch.n_steps == 0 or batch.n_segments == 0:
        raise EmptyBatch("no rollouts to average")
    return float(batch.segment_lengths().mean())


# -- loss terms ------------------------------------------------------------------


def ppo_loss(params: PolicyParams, obs, actions, log_probs_old, advantages,
             clip_eps: float) -> float:
    mean = policy_mod.mean_action(params, obs)
    logp = gaussian_log_prob(mean, params.log_std, actions)
    ratio = np.exp(logp - log_probs_old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return -float(np.minimum(ratio * advantages, clipped * advantages).mean())


def ppo_loss_grads(params: PolicyParams, obs, actions, log_probs_old,
                   advantages, clip_eps: float):
    """(loss, pi layer grads, log_std grad).

    The per-sample objective is min(r*A, clip(r)*A); its derivative w.r.t.
    the new log-prob is r*A when the unclipped branch attains the min and
    zero otherwise (inside the clip band the branches coincide, so the
    unclipped derivative is used there too).
    """
    obs_n = normalize_obs(params, np.atleast_2d(obs))
    mean, acts = mlp_forward(params.pi, obs_n)
    logp = gaussian_log_prob(mean, params.log_std, actions)
    ratio = np.exp(logp - log_probs_old)
    s1 = ratio * advantages
    s2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    n = obs_n.shape[0]
    loss = -float(np.minimum(s1, s2).mean())
    g_logp = np.where(s1 <= s2, ratio * advantages, 0.0) * (-1.0 / n)
    dmean_lp, dls_lp = gaussian_log_prob_grads(mean, params.log_std, actions)
    dmean = g_logp[:, None] * dmean_lp
    dlog_std = (g_logp[:, None] * dls_lp).sum(axis=0)
    pi_grads, _ = mlp_backward(params.pi, acts, dmean)
    return loss, pi_grads, dlog_std


def _dense_signed_perm(sp) -> np.ndarray:
    n = len(sp)
    M = np.zeros((n, n))
    M[np.arange(n), sp.target] = sp.sign
    return M


def sym_loss(params: PolicyParams, model: CharacterModel, obs) -> float:
    obs = np.atleast_2d(obs)
    m1 = policy_mod.mean_action(params, obs)
    m2 = policy_mod.mean_action(params, mirror_observation(model, obs))
    r = m1 - model.mirror_act.apply(m2)
    return float((r * r).sum() / obs.shape[0])


def sym_loss_grads(params: PolicyParams, model: CharacterModel, obs):
    """Mean squared mirror mismatch of the policy mean, with pi-net grads.

    Gradients flow through both the plain branch and the mirrored branch of
    the same network.
    """
    obs = np.atleast_2d(obs)
    B = obs.shape[0]
    n1 = normalize_obs(params, obs)
    n2 = normalize_obs(params, mirror_observation(model, obs))
    m1, acts1 = mlp_forward(params.pi, n1)
    m2, acts2 = mlp_forward(params.pi, n2)
    Pa = _dense_signed_perm(model.mirror_act)
    r = m1 - m2 @ Pa.T
    loss = float((r * r).sum() / B)
    d1 = (2.0 / B) * r
    d2 = -d1 @ Pa
    g1, _ = mlp_backward(params.pi, acts1, d1)
    g2, _ = mlp_backward(params.pi, acts2, d2)
    return loss, [(a[0] + b[0], a[1] + b[1]) for a, b in zip(g1, g2)]


def value_loss(params: PolicyParams, obs, targets) -> float:
    err = policy_mod.value(params, np.atleast_2d(obs)) - targets
    return float((err * err).mean())


def value_loss_grads(params: PolicyParams, obs, targets):
    obs_n = normalize_obs(params, np.atleast_2d(obs))
    out, acts = mlp_forward(params.vf, obs_n)
    err = out[:, 0] - targets
    loss = float((err * err).mean())
    dY = (2.0 / err.shape[0]) * err[:, None]
    grads, _ = mlp_backward(params.vf, acts, dY)
    return loss, grads


def _flat_grads(pi_grads, dlog_std, vf_grads) -> np.ndarray:
    parts: List[np.ndarray] = []
    for gW, gb in pi_grads:
        parts.append(gW.ravel())
        parts.append(gb.ravel())
    parts.append(np.asarray(dlog_std).ravel())
    for gW, gb in vf_grads:
        parts.append(gW.ravel())
        parts.append(gb.ravel())
    return np.concatenate(parts)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float,
             beta1: float, beta2: float, eps: float) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        mhat = self.m / (1.0 - beta1 ** self.t)
        vhat = self.v / (1.0 - beta2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + eps)


# -- rollout collection ----------------------------------------------------------


class EnvFactory:
    """Picklable constructor for locomotion environments."""

    def __init__(self, model: CharacterModel, reward: RewardConfig,
                 config: EnvConfig):
        self.model = model
        self.reward = reward
        self.config = config

    def __call__(self, seed: int, lesson_range: Optional[LessonRange]):
        if lesson_range is None:
            lesson_range = LessonRange.constant(Lesson(0.0, 0.0))
        return LocomotionEnv(self.model, reward=self.reward,
                             config=self.config, lesson_range=lesson_range,
                             seed=seed)


def _collect_chunk(args):
    env_factory, params, n_steps, seed, lesson_range = args
    env = env_factory(seed, lesson_range)
    rng = np.random.default_rng(seed)
    obs_dim = params.obs_dim
    act_dim = params.act_dim
    O = np.empty((n_steps, obs_dim))
    A = np.empty((n_steps, act_dim))
    LP = np.empty(n_steps)
    R = np.empty(n_steps)
    D = np.empty(n_steps)
    starts = [0]
    finals = []
    obs = env.reset()
    for t in range(n_steps):
        a, logp = sample_action(params, obs, rng)
        res = env.step(a)
        O[t] = obs
        A[t] = a
        LP[t] = logp
        R[t] = res.reward
        D[t] = 1.0 if res.done else 0.0
        if res.done:
            starts.append(t + 1)
            finals.append(res.observation)
            obs = env.reset()
        elif t == n_steps - 1:
            starts.append(t + 1)
            finals.append(res.observation)
        else:
            obs = res.observation
    return O, A, LP, R, D, np.asarray(starts, dtype=np.int64), np.asarray(finals)


def collect_steps(env_factory: Callable, params: PolicyParams, n_steps: int,
                  seed: int, workers: int = 1,
                  lesson_range: Optional[LessonRange] = None) -> RolloutBatch:
    """Collect exactly n_steps of experience, split across workers.

    Worker w runs an independent environment and sampling stream seeded
    seed + w; chunks are concatenated in worker order, so the result is a
    pure function of (env_factory, params, n_steps, seed, workers).
    """
    if n_steps < 1:
        raise EmptyBatch("n_steps must be positive")
    base, rem = divmod(n_steps, workers)
    quotas = [(w, base + (1 if w < rem else 0)) for w in range(workers)]
    quotas = [(w, q) for w, q in quotas if q > 0]
    jobs = [(env_factory, params, q, seed + w, lesson_range) for w, q in quotas]
    if len(jobs) == 1:
        results = [_collect_chunk(jobs[0])]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=len(jobs)) as pool:
            results = pool.map(_collect_chunk, jobs)
    chunks = []
    for O, A, LP, R, D, starts, finals in results:
        values = policy_mod.value(params, O)
        last_values = policy_mod.value(params, finals)
        chunks.append(RolloutBatch(O, A, LP, R, D,
                                   np.atleast_1d(values),
                                   starts,
                                   np.atleast_1d(last_values)))
    batch = RolloutBatch.concat(chunks)
    batch.validate()
    return batch


def run_episodes(env_factory: Callable, params: PolicyParams, n_episodes: int,
                 seed: int, lesson_range: Optional[LessonRange] = None,
                 deterministic: bool = True):
    """Play whole episodes; returns (returns, lengths) arrays.

    With deterministic=True the policy mean is used, no exploration noise.
    """
    env = env_factory(seed, lesson_range)
    rng = np.random.default_rng(seed)
    rets = np.zeros(n_episodes)
    lens = np.zeros(n_episodes, dtype=np.int64)
    for k in range(n_episodes):
        obs = env.reset()
        total = 0.0
        steps = 0
        while True:
            if deterministic:
                a = policy_mod.mean_action(params, obs)
            else:
                a, _ = sample_action(params, obs, rng)
            res = env.step(a)
            total += res.reward
            steps += 1
            if res.done:
                break
            obs = res.observation
        rets[k] = total
        lens[k] = steps
    return rets, lens


# -- training driver -------------------------------------------------------------


@dataclass
class IterationStats:
    iteration: int
    avg_return: float
    avg_len: float
    ppo_loss: float
    sym_loss: float
    value_loss: float
    lr: float
    n_segments: int


class Learner:
    """Owns the parameters, optimizer state, and normalization statistics.

    model may be omitted only when w_sym is zero (no mirror maps needed);
    in that case observation statistics are updated from the raw batch
    instead of the batch joined with its mirror image.
    """

    def __init__(self, params: PolicyParams, env_factory: Callable,
                 config: LearnerConfig = LearnerConfig(),
                 model: Optional[CharacterModel] = None, seed: int = 0):
        if config.w_sym > 0.0 and model is None:
            raise ValueError("symmetry loss needs a model with mirror maps")
        self.params = params
        self.env_factory = env_factory
        self.config = config
        self.model = model
        self.seed = seed
        self.iteration = 0
        self.adam = AdamState.zeros(flatten(params).shape[0])
        self.running = policy_mod.RunningStat.from_params(params)
        self.rng = np.random.default_rng(seed)

    def current_lr(self) -> float:
        frac = 1.0 - self.iteration / self.config.lr_decay_iters
        return self.config.lr * max(0.0, frac)

    def train_iteration(self, lesson_range: Optional[LessonRange] = None):
        """One collect/optimize cycle; returns (params, batch, stats)."""
        cfg = self.config
        lr = self.current_lr()
        seed0 = self.seed + self.iteration * cfg.workers
        batch = collect_steps(self.env_factory, self.params, cfg.batch_steps,
                              seed0, cfg.workers, lesson_range)
        adv_raw, targets = compute_gae(batch, cfg.gamma, cfg.lam)
        adv = normalize_advantages(adv_raw)

        B = batch.n_steps
        sums = np.zeros(3)
        n_updates = 0
        theta = flatten(self.params)
        for _ in range(cfg.epochs):
            order = self.rng.permutation(B)
            for k in range(0, B, cfg.minibatch):
                mb = order[k:k + cfg.minibatch]
                l_pi, pi_g, dls = ppo_loss_grads(
                    self.params, batch.observations[mb], batch.actions[mb],
                    batch.log_probs_old[mb], adv[mb], cfg.clip_eps)
                if cfg.w_sym > 0.0:
                    l_sym, sym_g = sym_loss_grads(
                        self.params, self.model, batch.observations[mb])
                    pi_g = [(a[0] + cfg.w_sym * b[0], a[1] + cfg.w_sym * b[1])
                            for a, b in zip(pi_g, sym_g)]
                else:
                    l_sym = 0.0
                l_vf, vf_g = value_loss_grads(
                    self.params, batch.observations[mb], targets[mb])
                vf_g = [(cfg.value_coeff * gW, cfg.value_coeff * gb)
                        for gW, gb in vf_g]
                grad = _flat_grads(pi_g, dls, vf_g)
                theta = self.adam.step(theta, grad, lr, cfg.adam_beta1,
                                       cfg.adam_beta2, cfg.adam_eps)
                unflatten_into(self.params, theta)
                clamp_log_std(self.params)
                theta = flatten(self.params)
                sums += (l_pi, l_sym, l_vf)
                n_updates += 1

        if self.model is not None:
            stats_obs = np.concatenate(
                [batch.observations,
                 mirror_observation(self.model, batch.observations)])
        else:
            stats_obs = batch.observations
        self.running.update(stats_obs)
        self.running.freeze_into(self.params)

        stats = IterationStats(
            iteration=self.iteration,
            avg_return=avg_return(batch),
            avg_len=avg_length(batch),
            ppo_loss=sums[0] / n_updates,
            sym_loss=sums[1] / n_updates,
            value_loss=sums[2] / n_updates,
            lr=lr,
            n_segments=batch.n_segments,
        )
        self.iteration += 1
        return self.params, batch, stats
