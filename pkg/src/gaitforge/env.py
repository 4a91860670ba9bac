"""Locomotion MDP: observations, reward, termination, assisted sub-stepping.

One control step holds the torques for 15 simulator sub-steps of 0.002 s
(33 Hz nominal control rate).  The assistant force is recomputed every
sub-step from the milestone schedule, so its strength decays inside the
rollout.  Rollouts are capped at 297 control steps, which at the nominal
rate is the 9 s horizon and spans exactly three milestone plateaus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assistant import Lesson, LessonRange, milestone_strength, spd_assist_force
from .dynamics import DEFAULT_DT, NumericalError, SimState, World

ROOT_FORWARD_DOF = 2    # sagittal root translation, excluded from observations
QD_DIVERGED = 1e6
CONTROL_RATE_HZ = 33.0  # nominal; horizon and balance arithmetic use this


@dataclass(frozen=True)
class RewardConfig:
    v_hat_final: float = 1.0
    w_v: float = 3.0
    w_ux: float = 1.0
    w_uy: float = 1.0
    w_uz: float = 1.0
    w_l: float = 3.0
    alive_bonus: float = 4.0
    w_e: float = 0.4

    def __post_init__(self):
        for name in ("w_v", "w_ux", "w_uy", "w_uz", "w_l", "w_e"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.alive_bonus > 0.0:
            raise ValueError("alive_bonus must be positive")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = DEFAULT_DT
    substeps: int = 15
    horizon: int = 297
    reset_noise: float = 0.005
    target_accel: float = 2.0
    avg_window: float = 2.0
    milestone_k_pct: float = 25.0
    milestone_p: float = 3.0
    com_height_frac: float = 0.5
    tilt_limit: float = 0.8
    gravity: float = 9.81


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def target_velocity(t: float, cfg: RewardConfig, accel: float = 2.0) -> float:
    """Ramp from zero at the configured acceleration, then hold."""
    vf = cfg.v_hat_final
    return math.copysign(min(accel * t, abs(vf)), vf)


def intrinsic_xyz_euler(R: np.ndarray) -> tuple:
    """Angles (ax, ay, az) with R = Rx(ax) @ Ry(ay) @ Rz(az)."""
    sy = min(1.0, max(-1.0, R[0, 2]))
    ay = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = math.atan2(-R[1, 2], R[2, 2])
        az = math.atan2(-R[0, 1], R[0, 0])
    else:
        # gimbal lock: fold the lost dof into ax
        ax = math.atan2(R[2, 1], R[1, 1])
        az = 0.0
    return ax, ay, az


class LocomotionEnv:
    """Assisted locomotion task for one character."""

    def __init__(self, model, reward: RewardConfig = RewardConfig(),
                 config: EnvConfig = EnvConfig(),
                 lesson_range: LessonRange = LessonRange.constant(Lesson(0.0, 0.0)),
                 seed: int = 0):
        self.model = model
        self.reward_config = reward
        self.config = config
        self.lesson_range = lesson_range
        self.world = World(model, gravity=config.gravity)
        self._rng = np.random.default_rng(seed)
        self._ref = self.world.reference_state()
        self._ref_com_height = float(self.world.com(self._ref.q)[1])
        self._window_n = int(round(config.avg_window / config.dt))
        self.obs_dim = model.obs_dim
        self.act_dim = model.nact
        self._act_dofs = np.asarray(model.act_dofs, dtype=np.intp)
        self._torque_limit = np.asarray(model.torque_limits, dtype=np.float64)
        self.state: Optional[SimState] = None
        self.steps = 0
        self._com_z_hist = None

    def set_lesson_range(self, lesson_range: LessonRange):
        self.lesson_range = lesson_range

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        st = self._ref.copy()
        if self.config.reset_noise > 0.0:
            n = self.config.reset_noise
            st.q = st.q + self._rng.uniform(-n, n, size=st.q.shape)
            st.qd = st.qd + self._rng.uniform(-n, n, size=st.qd.shape)
        st.t = 0.0
        st.contacts = self.world.contact_flags(st.q)
        self.state = st
        self.steps = 0
        self._com_z_hist = [float(self.world.com(st.q)[2])]
        return self._observe()

    def reset_to(self, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
        """Reset to an exact coordinate state, bypassing reset noise.

        Replaying a logged rollout requires starting from the recorded
        initial state bit-for-bit, so no RNG is touched here.
        """
        st = self._ref.copy()
        st.q = np.asarray(q, dtype=np.float64).copy()
        st.qd = np.asarray(qd, dtype=np.float64).copy()
        st.t = 0.0
        st.contacts = self.world.contact_flags(st.q)
        self.state = st
        self.steps = 0
        self._com_z_hist = [float(self.world.com(st.q)[2])]
        return self._observe()

    def observe(self) -> np.ndarray:
        """Observation for the current state without advancing time."""
        if self.state is None:
            raise RuntimeError("reset() before observe()")
        return self._observe()

    # -- reward pieces -------------------------------------------------------

    def average_velocity(self) -> float:
        """COM displacement over the trailing window; instantaneous at t=0."""
        h = self._com_z_hist
        if len(h) == 1:
            return float(self.world.com_velocity(self.state.q, self.state.qd)[2])
        n = min(len(h) - 1, self._window_n)
        return (h[-1] - h[-1 - n]) / (n * self.config.dt)

    def _reward(self, action_clamped: np.ndarray) -> tuple:
        rc = self.reward_config
        v_bar = self.average_velocity()
        v_hat = target_velocity(self.state.t, rc, self.config.target_accel)
        E_v = -abs(v_bar - v_hat)
        R = self.world.link_rotation(self.state.q, self.model.torso_link)
        ax, ay, az = intrinsic_xyz_euler(R)
        E_u = -(rc.w_ux * abs(ax) + rc.w_uy * abs(ay) + rc.w_uz * abs(az))
        E_l = -abs(float(self.world.com(self.state.q)[0]))
        E_a = rc.alive_bonus
        E_e = -float(np.linalg.norm(action_clamped))
        r = rc.w_v * E_v + E_u + rc.w_l * E_l + E_a + rc.w_e * E_e
        comps = {"E_v": E_v, "E_u": E_u, "E_l": E_l, "E_a": E_a, "E_e": E_e,
                 "v_bar": v_bar, "v_hat": v_hat}
        return r, comps

    def _check_termination(self) -> Optional[str]:
        com_y = float(self.world.com(self.state.q)[1])
        if com_y < self.config.com_height_frac * self._ref_com_height:
            return "com_low"
        R = self.world.link_rotation(self.state.q, self.model.torso_link)
        tilt = math.acos(min(1.0, max(-1.0, R[1, 1])))
        if tilt > self.config.tilt_limit:
            return "tilt"
        if self.steps >= self.config.horizon:
            return "horizon"
        return None

    # -- stepping ------------------------------------------------------------

    def step(self, action: np.ndarray) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        tau = np.zeros(self.model.ndof)
        tau[self._act_dofs] = a * self._torque_limit
        cfg = self.config
        st = self.state
        fx = fz = 0.0
        lesson = self.lesson_range.begin
        diverged = False
        try:
            for _ in range(cfg.substeps):
                lesson = milestone_strength(self.lesson_range, st.t,
                                            cfg.milestone_k_pct, cfg.milestone_p)
                v_hat = target_velocity(st.t, self.reward_config, cfg.target_accel)
                ext = spd_assist_force(self.model, st, lesson, v_hat, cfg.dt)
                fx, fz = ext.force[0], ext.force[2]
                st = self.world.step(st, tau, external_forces=(ext,), dt=cfg.dt)
                self._com_z_hist.append(float(self.world.last_com[2]))
                if len(self._com_z_hist) > self._window_n + 1:
                    del self._com_z_hist[0]
                if not np.all(np.isfinite(st.qd)) or np.abs(st.qd).max() > QD_DIVERGED:
                    diverged = True
                    break
        except NumericalError:
            diverged = True
        self.state = st
        self.steps += 1
        info = {"assist_kp": lesson.kp, "assist_kd": lesson.kd,
                "assist_fx": fx, "assist_fz": fz,
                "action": a, "tau": tau[self._act_dofs].copy(),
                "contacts": np.array(st.contacts, copy=True),
                "reason": None}
        if diverged:
            info.update(E_v=0.0, E_u=0.0, E_l=0.0, E_a=0.0, E_e=0.0,
                        v_bar=0.0, v_hat=0.0, reason="sim_diverged")
            obs = self._observe()
            np.nan_to_num(obs, copy=False, posinf=0.0, neginf=0.0)
            return StepResult(obs, 0.0, True, info)
        r, comps = self._reward(a)
        info.update(comps)
        reason = self._check_termination()
        info["reason"] = reason
        return StepResult(self._observe(), r, reason is not None, info)

    def _observe(self) -> np.ndarray:
        st = self.state
        obs = np.empty(self.obs_dim)
        n = self.model.ndof
        obs[0:ROOT_FORWARD_DOF] = st.q[0:ROOT_FORWARD_DOF]
        obs[ROOT_FORWARD_DOF:n - 1] = st.q[ROOT_FORWARD_DOF + 1:]
        obs[n - 1:2 * n - 1] = st.qd
        obs[2 * n - 1:-1] = st.contacts
        obs[-1] = target_velocity(st.t, self.reward_config, self.config.target_accel)
        return obs
