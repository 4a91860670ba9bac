"""Gait measurement: symmetry index, actuation cost, trajectory export.

Everything here is a pure function over immutable Trajectory records; the
only I/O is the CSV import/export pair, which round-trips float64 exactly
through 17 significant digits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .charmodel import CharacterModel
from .env import RewardConfig

COMPONENT_NAMES = ("E_v", "E_u", "E_l", "E_a", "E_e")


class DegenerateInput(ValueError):
    """Raised when a metric is undefined for the given data."""


class IoError(OSError):
    """Trajectory file could not be read or written."""


@dataclass(frozen=True)
class Trajectory:
    """One rollout, row k aligned with the state the k-th action acted on."""

    t: np.ndarray           # (T,)
    q: np.ndarray           # (T, ndof)
    qd: np.ndarray          # (T, ndof)
    actions: np.ndarray     # (T, nact) clamped limit-relative commands
    torques: np.ndarray     # (T, nact) applied joint torques [N*m]
    components: np.ndarray  # (T, 5) reward terms, COMPONENT_NAMES order
    contacts: np.ndarray    # (T, n_contacts) 0/1 flags
    assist: np.ndarray      # (T, 2) world-frame fx, fz at the pelvis

    @property
    def n_steps(self) -> int:
        return int(self.t.shape[0])

    def validate(self):
        T = self.n_steps
        for name in ("q", "qd", "actions", "torques", "components",
                     "contacts", "assist"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(f"{name} row count does not match t")
        if self.components.shape[1] != len(COMPONENT_NAMES):
            raise ValueError("components must have one column per reward term")
        if self.assist.shape[1] != 2:
            raise ValueError("assist must be (fx, fz)")
        if T >= 2:
            dt = np.diff(self.t)
            if np.any(dt <= 0.0):
                raise ValueError("t must be strictly increasing")
            if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
                raise ValueError("control-step spacing must be uniform")

    def control_dt(self) -> float:
        if self.n_steps < 2:
            raise DegenerateInput("spacing undefined for fewer than two steps")
        return float(self.t[1] - self.t[0])


def record_rollout(env, action_fn: Callable[[np.ndarray, int], np.ndarray],
                   max_steps: Optional[int] = None,
                   reset: bool = True) -> Trajectory:
    """Play one episode and log it; action_fn(obs, k) supplies each action.

    Stops at episode end, or after max_steps rows when given (replay of a
    logged action sequence must not outrun the log).  reset=False records
    from the environment's current state, for callers that seeded it via
    reset_to().
    """
    obs = env.reset() if reset else env.observe()
    t, q, qd, acts, taus, comps, cons, assist = [], [], [], [], [], [], [], []
    k = 0
    while max_steps is None or k < max_steps:
        st = env.state
        t.append(float(st.t))
        q.append(st.q.copy())
        qd.append(st.qd.copy())
        res = env.step(action_fn(obs, k))
        info = res.info
        acts.append(np.asarray(info["action"], dtype=np.float64))
        taus.append(np.asarray(info["tau"], dtype=np.float64))
        comps.append([info[name] for name in COMPONENT_NAMES])
        cons.append(np.asarray(info["contacts"], dtype=np.float64))
        assist.append((float(info["assist_fx"]), float(info["assist_fz"])))
        k += 1
        if res.done:
            break
        obs = res.observation
    traj = Trajectory(
        t=np.asarray(t), q=np.asarray(q), qd=np.asarray(qd),
        actions=np.asarray(acts), torques=np.asarray(taus),
        components=np.asarray(comps), contacts=np.asarray(cons),
        assist=np.asarray(assist))
    traj.validate()
    return traj


# -- symmetry ----------------------------------------------------------------


def si_value(x_l: float, x_r: float) -> float:
    """2|x_l - x_r| / (x_l + x_r), as a fraction."""
    s = x_l + x_r
    if s == 0.0:
        raise DegenerateInput("both sides average to zero torque")
    return 2.0 * abs(x_l - x_r) / s


def _side_mean(torques: np.ndarray, dofs) -> float:
    # sorted before reduction, so equal torque multisets average exactly equal
    vals = np.sort(np.abs(torques[:, dofs]), axis=None)
    return float(vals.mean())


def symmetry_index(traj: Trajectory, model: CharacterModel) -> float:
    """Left/right asymmetry of the mean absolute joint torque."""
    if traj.n_steps == 0:
        raise ValueError("empty trajectory")
    if not model.left_leg_dofs or not model.right_leg_dofs:
        raise ValueError("model does not partition actuators into legs")
    return si_value(_side_mean(traj.torques, model.left_leg_dofs),
                    _side_mean(traj.torques, model.right_leg_dofs))


# -- actuation cost ----------------------------------------------------------


def avg_actuation(traj: Trajectory) -> float:
    """Time-mean actuation magnitude: the reward's energy term, made positive.

    Uses the limit-relative command vectors, the same quantity the reward
    penalizes, so this equals the negated mean of the logged E_e column.
    """
    if traj.n_steps == 0:
        raise ValueError("empty trajectory")
    norms = np.linalg.norm(traj.actions, axis=1)
    return float(np.sort(norms).mean())


# -- gait period -------------------------------------------------------------


def gait_period(traj: Trajectory, min_period_s: float = 0.4) -> Optional[float]:
    """Dominant contact-pattern period via autocorrelation, or None.

    Each foot's mean-removed contact series is autocorrelated; the biased
    estimate decays with lag, so the argmax past the minimum lag is the
    fundamental.  Feet with constant flags or no positive peak contribute
    nothing; None means no foot gave an estimate.
    """
    if traj.n_steps < 4:
        return None
    dt = traj.control_dt()
    T = traj.n_steps
    k_min = max(1, int(round(min_period_s / dt)))
    k_max = T // 2
    if k_min >= k_max:
        return None
    periods = []
    for j in range(traj.contacts.shape[1]):
        x = traj.contacts[:, j] - traj.contacts[:, j].mean()
        if not np.any(x):
            continue
        r = np.correlate(x, x, mode="full")[T - 1:]
        k = k_min + int(np.argmax(r[k_min:k_max]))
        if r[k] > 0.0:
            periods.append(k * dt)
    if not periods:
        return None
    return float(np.mean(periods))


# -- CSV export --------------------------------------------------------------


def _header(ndof: int, nact: int, n_contacts: int) -> str:
    cols = (["t"]
            + [f"q_{i}" for i in range(ndof)]
            + [f"qd_{i}" for i in range(ndof)]
            + [f"a_{i}" for i in range(nact)]
            + [f"tau_{i}" for i in range(nact)]
            + list(COMPONENT_NAMES)
            + [f"c_{i}" for i in range(n_contacts)]
            + ["assist_fx", "assist_fz"])
    return ", ".join(cols)


def export_trajectory(traj: Trajectory, path) -> None:
    ndof = traj.q.shape[1]
    nact = traj.actions.shape[1]
    n_c = traj.contacts.shape[1]
    try:
        with open(path, "w") as f:
            f.write(_header(ndof, nact, n_c) + "\n")
            for k in range(traj.n_steps):
                row = np.concatenate((
                    [traj.t[k]], traj.q[k], traj.qd[k], traj.actions[k],
                    traj.torques[k], traj.components[k], traj.contacts[k],
                    traj.assist[k]))
                f.write(", ".join(f"{v:.17g}" for v in row) + "\n")
    except OSError as e:
        raise IoError(f"cannot write trajectory: {e}") from e


def _count_prefix(cols: List[str], prefix: str) -> int:
    n = 0
    for c in cols:
        if c.startswith(prefix) and c[len(prefix):].isdigit():
            n += 1
    return n


def import_trajectory(path) -> Trajectory:
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IoError(f"cannot read trajectory: {e}") from e
    if not lines:
        raise ValueError("empty file")
    cols = [c.strip() for c in lines[0].split(",")]
    if cols[0] != "t" or cols[-2:] != ["assist_fx", "assist_fz"]:
        raise ValueError("not a trajectory file")
    ndof = _count_prefix(cols, "qd_")
    nact = _count_prefix(cols, "a_")
    n_c = _count_prefix(cols, "c_")
    if cols != _header(ndof, nact, n_c).split(", "):
        raise ValueError("malformed trajectory header")
    data = np.array([[float(v) for v in line.split(",")]
                     for line in lines[1:] if line.strip()])
    data = data.reshape(-1, len(cols))
    ofs = [1, ndof, ndof, nact, nact, len(COMPONENT_NAMES), n_c, 2]
    bounds = np.cumsum([0] + ofs)
    parts = [data[:, bounds[i]:bounds[i + 1]] for i in range(len(ofs))]
    traj = Trajectory(t=parts[0][:, 0], q=parts[1], qd=parts[2],
                      actions=parts[3], torques=parts[4], components=parts[5],
                      contacts=parts[6], assist=parts[7])
    traj.validate()
    return traj


# -- summary report ----------------------------------------------------------


@dataclass(frozen=True)
class GaitSummary:
    symmetry_index: float
    avg_actuation: float
    avg_return: float
    avg_episode_len: float
    gait_period_s: float    # nan when no estimate


def summarize(trajs: Sequence[Trajectory], model: CharacterModel,
              reward: RewardConfig = RewardConfig()) -> GaitSummary:
    """Pooled gait summary over one or more rollouts.

    Torque statistics pool across all steps; returns are reconstructed from
    the logged reward components with the given weights.
    """
    trajs = list(trajs)
    if not trajs or all(tr.n_steps == 0 for tr in trajs):
        raise ValueError("no steps to summarize")
    torques = np.concatenate([tr.torques for tr in trajs])
    pooled = Trajectory(
        t=np.arange(torques.shape[0], dtype=np.float64),
        q=np.zeros((torques.shape[0], 1)),
        qd=np.zeros((torques.shape[0], 1)),
        actions=np.concatenate([tr.actions for tr in trajs]),
        torques=torques,
        components=np.concatenate([tr.components for tr in trajs]),
        contacts=np.zeros((torques.shape[0], 1)),
        assist=np.zeros((torques.shape[0], 2)))
    rets = []
    for tr in trajs:
        c = tr.components
        r = (reward.w_v * c[:, 0] + c[:, 1] + reward.w_l * c[:, 2]
             + c[:, 3] + reward.w_e * c[:, 4])
        rets.append(float(r.sum()))
    periods = [p for p in (gait_period(tr) for tr in trajs) if p is not None]
    return GaitSummary(
        symmetry_index=symmetry_index(pooled, model),
        avg_actuation=avg_actuation(pooled),
        avg_return=float(np.mean(rets)),
        avg_episode_len=float(np.mean([tr.n_steps for tr in trajs])),
        gait_period_s=float(np.mean(periods)) if periods else math.nan)


REPORT_FIELDS = ("symmetry_index", "avg_actuation", "avg_return",
                 "avg_episode_len", "gait_period_s")


def format_report(summary: GaitSummary) -> str:
    return "".join(f"{name}: {getattr(summary, name):.10g}\n"
                   for name in REPORT_FIELDS)


def parse_report(text: str) -> GaitSummary:
    vals = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition(":")
        vals[key.strip()] = float(raw)
    missing = [f for f in REPORT_FIELDS if f not in vals]
    if missing:
        raise ValueError(f"report is missing fields: {missing}")
    return GaitSummary(**{f: vals[f] for f in REPORT_FIELDS})
