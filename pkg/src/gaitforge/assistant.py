"""Virtual assistant forces at the pelvis.

A point in the 2-D curriculum space x = (kp, kd) sets the strength of two
world-frame force components applied at the pelvis COM: a lateral balance
force (stiffness kp, damping 0.1*kp, target lateral position 0) and a sagittal
propelling force (pure damping kd toward the target forward velocity).  Both
are computed with the fully implicit PD discretization, so arbitrarily large
gains stay stable at the simulation step size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .dynamics import ExternalForce

logger = logging.getLogger(__name__)

FORCE_CLAMP = 1e5

# lateral damping is tied to the balance stiffness
BALANCE_DAMPING_RATIO = 0.1


@dataclass(frozen=True)
class Lesson:
    """Assistant strength: balance stiffness kp [N/m], propel gain kd [N*s/m]."""

    kp: float
    kd: float

    def __post_init__(self):
        if not (self.kp >= 0.0 and self.kd >= 0.0):
            raise ValueError(f"lesson gains must be nonnegative, got ({self.kp}, {self.kd})")

    def norm(self) -> float:
        return math.hypot(self.kp, self.kd)

    def scaled(self, factor: float) -> "Lesson":
        return Lesson(self.kp * factor, self.kd * factor)


@dataclass(frozen=True)
class LessonRange:
    """Strength at rollout start and the floor it decays to."""

    begin: Lesson
    end: Lesson

    @classmethod
    def from_begin(cls, begin: Lesson, k_pct: float = 25.0) -> "LessonRange":
        f = (k_pct / 100.0) ** 2
        return cls(begin, begin.scaled(f))

    @classmethod
    def constant(cls, lesson: Lesson) -> "LessonRange":
        return cls(lesson, lesson)


def milestone_strength(rng: LessonRange, t: float, k_pct: float = 25.0,
                       p: float = 3.0) -> Lesson:
    """Piecewise-constant in-rollout decay: begin * (k%)^floor(t/p), floored at end.

    The epsilon shields the plateau boundaries against accumulated float error
    in t, keeping breakpoints exactly at multiples of p.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    n = math.floor(t / p + 1e-9)
    f = (k_pct / 100.0) ** n
    kp = max(rng.begin.kp * f, rng.end.kp)
    kd = max(rng.begin.kd * f, rng.end.kd)
    return Lesson(kp, kd)


def spd_1d(p: float, v: float, kp: float, kd: float, p_bar: float,
           v_bar: float, dt: float, m: float) -> float:
    """Fully implicit 1-DOF PD force.

    Solves f = -kp*(p + dt*v' - p_bar) - kd*(v' - v_bar) with v' = v + dt*f/m,
    which keeps the closed loop stable for any nonnegative gains.
    """
    num = -kp * (p + dt * v - p_bar) - kd * (v - v_bar)
    den = 1.0 + kd * dt / m + kp * dt * dt / m
    return num / den


def spd_assist_force(model, state, lesson: Lesson, v_target: float,
                     dt: float) -> ExternalForce:
    """Assist force at the pelvis COM for one simulation sub-step.

    Lateral axis x: drive the pelvis toward the sagittal plane with stiffness
    lesson.kp and damping 0.1*lesson.kp.  Forward axis z: drive the pelvis
    velocity toward v_target with pure damping lesson.kd.  No vertical
    component.  The implicit mass correction uses the root translational
    effective mass, which equals the total character mass.
    """
    m = model.total_mass
    q, qd = state.q, state.qd
    fx = spd_1d(q[0], qd[0], lesson.kp, BALANCE_DAMPING_RATIO * lesson.kp,
                0.0, 0.0, dt, m)
    fz = spd_1d(q[2], qd[2], 0.0, lesson.kd, 0.0, v_target, dt, m)
    mag = math.hypot(fx, fz)
    if mag > FORCE_CLAMP:
        s = FORCE_CLAMP / mag
        fx *= s
        fz *= s
        logger.warning("assist force clamped: |f|=%.3e N at t=%.3f", mag, state.t)
    com = model.links[0].com
    return ExternalForce(link=0,
                         point=[float(com[0]), float(com[1]), float(com[2])],
                         force=[fx, 0.0, fz])
