"""Assistance-curriculum schedulers.

Two state machines drive training toward zero assistance:

* learner-centered: train until the return plateaus at the starting lesson,
  then repeatedly shrink the lesson by line searches along five descent
  directions in (kp, kd) space, gated on the return staying near the
  plateau value;
* environment-centered: decay assistance inside each rollout (milestones)
  and multiply the whole range by k% whenever the policy passes a balance
  test while keeping g% of its initial return.

Both end with a final training phase at exactly zero assistance.  The
schedulers only talk to a trainer object exposing

    train_iteration(lesson_range) -> (params, batch, stats)
    eval_return(lesson, n)        -> float
    params

so they run unchanged against an analytic mock with no physics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .assistant import Lesson, LessonRange
from .env import CONTROL_RATE_HZ
from .learner import Learner, RolloutBatch, avg_return, run_episodes

logger = logging.getLogger(__name__)

# 1D search directions in (kp, kd), in tie-break order
DIRECTIONS = ((-1.0, 0.0), (-1.0, -0.5), (-1.0, -1.0), (-0.5, -1.0),
              (0.0, -1.0))


class BudgetExceeded(RuntimeError):
    """Iteration cap hit before the curriculum finished.

    Carries the partial artifacts so a caller can still persist them.
    """

    def __init__(self, message, params=None, trace=None, state=None):
        super().__init__(message)
        self.params = params
        self.trace = trace
        self.state = state


@dataclass(frozen=True)
class CurriculumConfig:
    x0: Lesson = Lesson(2000.0, 2000.0)
    eps_term: float = 5.0
    h_pct: float = 80.0      # return gate for lesson updates
    l_pct: float = 60.0      # line-search admissibility floor
    g_pct: float = 70.0      # env-centered return floor
    k_pct: float = 25.0      # geometric reduction factor
    p: float = 3.0           # milestone period, seconds
    eval_rollouts: int = 4
    line_search_resolution: float = 0.5
    plateau_window: int = 20
    plateau_tol: float = 0.02
    balance_threshold: float = 0.9

    def __post_init__(self):
        for name in ("l_pct", "g_pct", "k_pct"):
            v = getattr(self, name)
            if not (0.0 < v <= 100.0):
                raise ValueError(f"{name} must lie in (0, 100]")
        # h_pct above 100 is legal: it makes the update gate unreachable
        if self.h_pct <= 0.0:
            raise ValueError("h_pct must be positive")
        if self.eps_term <= 0.0 or self.p <= 0.0:
            raise ValueError("eps_term and p must be positive")
        if self.eval_rollouts < 1 or self.plateau_window < 1:
            raise ValueError("eval_rollouts and plateau_window must be >= 1")
        if self.line_search_resolution <= 0.0:
            raise ValueError("line_search_resolution must be positive")
        if not (0.0 < self.balance_threshold <= 1.0):
            raise ValueError("balance_threshold must lie in (0, 1]")


@dataclass
class TraceEntry:
    iteration: int
    begin: Lesson
    end: Lesson
    avg_return: float
    accepted: bool


@dataclass
class CurriculumTrace:
    entries: List[TraceEntry] = field(default_factory=list)

    def append(self, entry: TraceEntry):
        self.entries.append(entry)

    def accepted_entries(self) -> List[TraceEntry]:
        return [e for e in self.entries if e.accepted]

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("iteration, kp_begin, kd_begin, kp_end, kd_end, "
                    "avg_return, accepted\n")
            for e in self.entries:
                f.write(f"{e.iteration}, {e.begin.kp:.17g}, {e.begin.kd:.17g}, "
                        f"{e.end.kp:.17g}, {e.end.kd:.17g}, "
                        f"{e.avg_return:.17g}, {int(e.accepted)}\n")

    @classmethod
    def read_csv(cls, path) -> "CurriculumTrace":
        trace = cls()
        with open(path) as f:
            header = f.readline()
            if not header.startswith("iteration"):
                raise ValueError("not a curriculum trace file")
            for line in f:
                parts = [p.strip() for p in line.split(",")]
                trace.append(TraceEntry(
                    iteration=int(parts[0]),
                    begin=Lesson(float(parts[1]), float(parts[2])),
                    end=Lesson(float(parts[3]), float(parts[4])),
                    avg_return=float(parts[5]),
                    accepted=bool(int(parts[6])),
                ))
        return trace


# -- balance test ----------------------------------------------------------------


def balance_test(batch: RolloutBatch, p: float, threshold: float = 0.9) -> bool:
    """True when enough rollouts stayed up for at least 2p seconds.

    Length is counted in control steps at the nominal 33 Hz rate.  Segments
    cut short by the batch boundary rather than by termination carry no
    evidence either way, so ones shorter than the bar are excluded from the
    denominator.
    """
    min_steps = int(round(2.0 * p * CONTROL_RATE_HZ))
    lengths = batch.segment_lengths()
    ends = batch.starts[1:] - 1
    truncated = batch.dones[ends] == 0.0
    counted = ~(truncated & (lengths < min_steps))
    if not counted.any():
        return False
    frac = float((lengths[counted] >= min_steps).mean())
    return frac >= threshold


# -- lesson update (1D line searches) ---------------------------------------------


def _candidate(x: Lesson, d, alpha: float) -> Lesson:
    return Lesson(max(x.kp + alpha * d[0], 0.0),
                  max(x.kd + alpha * d[1], 0.0))


def line_search(x: Lesson, d, r_bar: float,
                eval_fn: Callable[[Lesson], float],
                cfg: CurriculumConfig) -> Optional[Lesson]:
    """Largest admissible step from x along d, or None.

    Admissible means the frozen policy keeps more than l% of r_bar under
    the probed assistance.  The step length is resolved by bisection to
    within line_search_resolution of travel, assuming admissibility is
    monotone in the step (easing assistance never hurts), which is the
    same assumption a forward grid scan makes at a fraction of the probes.
    Components clamp at zero, so the search interval extends until both
    components are exhausted.
    """
    floor = cfg.l_pct / 100.0 * r_bar
    norm_d = math.hypot(d[0], d[1])
    alpha_max = 0.0
    for comp, dc in ((x.kp, d[0]), (x.kd, d[1])):
        if dc < 0.0:
            alpha_max = max(alpha_max, comp / -dc)
    if alpha_max <= 0.0:
        return None
    if eval_fn(_candidate(x, d, alpha_max)) > floor:
        return _candidate(x, d, alpha_max)
    lo, hi = 0.0, alpha_max
    while (hi - lo) * norm_d > cfg.line_search_resolution:
        mid = 0.5 * (lo + hi)
        if eval_fn(_candidate(x, d, mid)) > floor:
            lo = mid
        else:
            hi = mid
    if lo <= 0.0:
        return None
    return _candidate(x, d, lo)


def update_lesson(x: Lesson, r_bar: float,
                  eval_fn: Callable[[Lesson], float],
                  cfg: CurriculumConfig) -> Lesson:
    """One lesson-update round: five line searches, keep the smallest.

    Ties and no-progress directions resolve in DIRECTIONS order; if no
    direction admits any step the lesson is returned unchanged (a stall).
    """
    if not r_bar > 0.0:
        raise ValueError("reference return must be positive")
    best: Optional[Lesson] = None
    for d in DIRECTIONS:
        cand = line_search(x, d, r_bar, eval_fn, cfg)
        if cand is not None and (best is None or cand.norm() < best.norm()):
            best = cand
    if best is None:
        logger.info("lesson update stalled at (%.3g, %.3g)", x.kp, x.kd)
        return x
    return best


# -- real-environment trainer ------------------------------------------------------


class LearnerTrainer:
    """Bridges a Learner to the scheduler interface."""

    def __init__(self, learner: Learner, eval_seed: int = 2 ** 20):
        self.learner = learner
        self.eval_seed = eval_seed

    @property
    def params(self):
        return self.learner.params

    def train_iteration(self, lesson_range: LessonRange):
        return self.learner.train_iteration(lesson_range)

    def eval_return(self, lesson: Lesson, n: int) -> float:
        rets, _ = run_episodes(self.learner.env_factory, self.learner.params,
                               n, self.eval_seed,
                               LessonRange.constant(lesson),
                               deterministic=True)
        return float(rets.mean())


def eval_return(env_factory, params, lesson: Lesson, n: int,
                seed: int) -> float:
    """Mean return of n deterministic rollouts under constant assistance."""
    rets, _ = run_episodes(env_factory, params, n, seed,
                           LessonRange.constant(lesson), deterministic=True)
    return float(rets.mean())


# -- scheduler state ---------------------------------------------------------------


@dataclass
class SchedulerState:
    """Resumable loop position; everything else lives in the checkpoint."""

    curriculum: str                 # "learner" or "env"
    phase: str = "initial"          # initial -> loop -> final -> done
    x: Tuple[float, float] = (0.0, 0.0)
    x_end: Tuple[float, float] = (0.0, 0.0)
    r_bar: Optional[float] = None
    iters_used: int = 0
    best: Optional[float] = None    # plateau tracker for the current phase
    since: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SchedulerState":
        d = json.loads(text)
        d["x"] = tuple(d["x"])
        d["x_end"] = tuple(d["x_end"])
        return cls(**d)


class _Run:
    """Shared budget/trace plumbing for both schedulers."""

    def __init__(self, trainer, cfg: CurriculumConfig, max_iters: int,
                 st: SchedulerState, state_cb=None):
        self.trainer = trainer
        self.cfg = cfg
        self.max_iters = max_iters
        self.st = st
        self.state_cb = state_cb
        self.trace = CurriculumTrace()

    def step(self, lesson_range: LessonRange, accepted_hook=None):
        if self.st.iters_used >= self.max_iters:
            raise BudgetExceeded(
                f"iteration budget {self.max_iters} exhausted in phase "
                f"'{self.st.phase}'",
                params=self.trainer.params, trace=self.trace, state=self.st)
        params, batch, stats = self.trainer.train_iteration(lesson_range)
        self.st.iters_used += 1
        return params, batch, stats

    def record(self, lesson_range: LessonRange, ret: float, accepted: bool):
        self.trace.append(TraceEntry(self.st.iters_used, lesson_range.begin,
                                     lesson_range.end, ret, accepted))
        if self.state_cb is not None:
            self.state_cb(self.st, self.trace)

    def plateau_reset(self):
        self.st.best = None
        self.st.since = 0

    def plateau_track(self, ret: float) -> bool:
        """Feed one return; True once the plateau window has elapsed."""
        st = self.st
        if st.best is None or ret > st.best + self.cfg.plateau_tol * abs(st.best):
            st.best = ret if st.best is None else max(st.best, ret)
            st.since = 0
        else:
            st.since += 1
        return st.since >= self.cfg.plateau_window

    def train_to_plateau(self, lesson_range: LessonRange) -> float:
        while True:
            _, _, stats = self.step(lesson_range)
            self.record(lesson_range, stats.avg_return, False)
            if self.plateau_track(stats.avg_return):
                return self.st.best


def run_learner_centered(trainer, cfg: CurriculumConfig = CurriculumConfig(),
                         max_iters: int = 100000,
                         state: Optional[SchedulerState] = None,
                         state_cb=None):
    """Shrink a constant lesson via gated line searches; returns
    (params, trace)."""
    st = state or SchedulerState(curriculum="learner",
                                 x=(cfg.x0.kp, cfg.x0.kd))
    run = _Run(trainer, cfg, max_iters, st, state_cb)

    if st.phase == "initial":
        best = run.train_to_plateau(LessonRange.constant(cfg.x0))
        st.r_bar = best
        st.phase = "loop"
        run.plateau_reset()

    if st.phase == "loop":
        x = Lesson(*st.x)
        gate = cfg.h_pct / 100.0 * st.r_bar
        while x.norm() >= cfg.eps_term:
            lrange = LessonRange.constant(x)
            _, _, stats = run.step(lrange)
            accepted = False
            if stats.avg_return >= gate:
                x_new = update_lesson(
                    x, st.r_bar,
                    lambda lesson: trainer.eval_return(lesson,
                                                       cfg.eval_rollouts),
                    cfg)
                accepted = (x_new.kp, x_new.kd) != (x.kp, x.kd)
                x = x_new
                st.x = (x.kp, x.kd)
            run.record(lrange, stats.avg_return, accepted)
        st.phase = "final"
        run.plateau_reset()

    if st.phase == "final":
        run.train_to_plateau(LessonRange.constant(Lesson(0.0, 0.0)))
        st.phase = "done"
        if state_cb is not None:
            state_cb(st, run.trace)

    return trainer.params, run.trace


def run_env_centered(trainer, cfg: CurriculumConfig = CurriculumConfig(),
                     max_iters: int = 100000,
                     state: Optional[SchedulerState] = None,
                     state_cb=None):
    """Geometrically shrink a milestone range gated on the balance test;
    returns (params, trace)."""
    k = cfg.k_pct / 100.0
    st = state or SchedulerState(
        curriculum="env",
        x=(cfg.x0.kp, cfg.x0.kd),
        x_end=(cfg.x0.kp * k * k, cfg.x0.kd * k * k))
    run = _Run(trainer, cfg, max_iters, st, state_cb)

    if st.phase == "initial":
        best = run.train_to_plateau(
            LessonRange(Lesson(*st.x), Lesson(*st.x_end)))
        st.r_bar = cfg.g_pct / 100.0 * best
        st.phase = "loop"
        run.plateau_reset()

    if st.phase == "loop":
        begin = Lesson(*st.x)
        end = Lesson(*st.x_end)
        while begin.norm() >= cfg.eps_term:
            lrange = LessonRange(begin, end)
            _, batch, stats = run.step(lrange)
            accepted = (balance_test(batch, cfg.p, cfg.balance_threshold)
                        and stats.avg_return > st.r_bar)
            run.record(lrange, stats.avg_return, accepted)
            if accepted:
                begin = begin.scaled(k)
                end = end.scaled(k)
                st.x = (begin.kp, begin.kd)
                st.x_end = (end.kp, end.kd)
        st.phase = "final"
        run.plateau_reset()

    if st.phase == "final":
        zero = LessonRange.constant(Lesson(0.0, 0.0))
        run.train_to_plateau(zero)
        st.phase = "done"
        if state_cb is not None:
            state_cb(st, run.trace)

    return trainer.params, run.trace
