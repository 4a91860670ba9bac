"""Scheduler tests against analytic trainers; no physics anywhere here."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

import gaitforge.curriculum as C
import gaitforge.learner as L
import gaitforge.policy as P
from gaitforge.assistant import Lesson, LessonRange, milestone_strength

RES = 0.5


def cfg(**kw):
    return C.CurriculumConfig(**kw)


# -- batch fabrication -------------------------------------------------------


def mock_batch(lengths, end_flags=None, reward=1.0):
    """Batch of zero-filled segments with the given lengths.

    end_flags[i] = 1.0 marks segment i as terminated, 0.0 as truncated.
    """
    lengths = list(int(x) for x in lengths)
    n = sum(lengths)
    starts = np.zeros(len(lengths) + 1, dtype=np.int64)
    starts[1:] = np.cumsum(lengths)
    dones = np.zeros(n)
    flags = [1.0] * len(lengths) if end_flags is None else list(end_flags)
    for end, flag in zip(starts[1:], flags):
        dones[end - 1] = flag
    return L.RolloutBatch(
        observations=np.zeros((n, 3)),
        actions=np.zeros((n, 1)),
        log_probs_old=np.zeros(n),
        rewards=np.full(n, float(reward)),
        dones=dones,
        values_old=np.zeros(n),
        starts=starts,
        last_values=np.zeros(len(lengths)),
    )


class MockTrainer:
    """Analytic stand-in for a Learner.

    The average return ramps linearly to cap over `ramp` iterations and then
    stays flat, so plateau detection has something real to detect.  In
    evaluation the frozen policy keeps the full return as long as the probed
    assistance norm is within `tolerance` of the norm it last trained at,
    and collapses to zero beyond that.  Batches pass the balance test once
    `balance_after` training iterations have happened.
    """

    def __init__(self, cap=100.0, ramp=8, tolerance=300.0, balance_after=0,
                 seg_len=297, n_seg=10):
        self.cap = cap
        self.ramp = ramp
        self.tolerance = tolerance
        self.balance_after = balance_after
        self.seg_len = seg_len
        self.n_seg = n_seg
        self.n = 0
        self.trained_norm = None
        self.params = object()

    def train_iteration(self, lesson_range):
        self.n += 1
        self.trained_norm = lesson_range.begin.norm()
        ret = self.cap * min(1.0, self.n / self.ramp)
        length = self.seg_len if self.n > self.balance_after else 50
        batch = mock_batch([length] * self.n_seg)
        stats = SimpleNamespace(avg_return=ret, avg_len=float(length))
        return self.params, batch, stats

    def eval_return(self, lesson, n):
        if self.trained_norm is None:
            return 0.0
        if lesson.norm() >= self.trained_norm - self.tolerance:
            return self.cap
        return 0.0


def radial_eval(r, value=100.0):
    """Admissible ball: full return at norm >= r, nothing below."""
    return lambda lesson: value if lesson.norm() >= r else 0.0


# -- config ------------------------------------------------------------------


def test_config_defaults_valid():
    c = cfg()
    assert c.x0 == Lesson(2000.0, 2000.0)
    assert c.eps_term == 5.0
    assert (c.h_pct, c.l_pct, c.g_pct, c.k_pct) == (80.0, 60.0, 70.0, 25.0)
    assert c.p == 3.0 and c.eval_rollouts == 4


def test_config_gate_above_hundred_is_legal():
    assert cfg(h_pct=101.0).h_pct == 101.0


@pytest.mark.parametrize("kw", [
    dict(k_pct=0.0), dict(k_pct=150.0), dict(l_pct=0.0), dict(g_pct=101.0),
    dict(h_pct=0.0), dict(eps_term=0.0), dict(p=-1.0), dict(eval_rollouts=0),
    dict(line_search_resolution=0.0), dict(balance_threshold=0.0),
    dict(balance_threshold=1.5), dict(plateau_window=0),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        cfg(**kw)


# -- balance test ------------------------------------------------------------


def test_balance_all_full_horizon():
    assert C.balance_test(mock_batch([297] * 10), 3.0) is True


def test_balance_fraction_arithmetic():
    # bar at p=3 is 198 control steps
    nine = mock_batch([297] * 9 + [100])
    eight = mock_batch([297] * 8 + [100, 100])
    assert C.balance_test(nine, 3.0) is True
    assert C.balance_test(eight, 3.0) is False


def test_balance_min_steps_boundary():
    assert C.balance_test(mock_batch([198]), 3.0) is True
    assert C.balance_test(mock_batch([197]), 3.0) is False


def test_balance_truncated_short_excluded():
    # the 50-step tail was cut by the batch boundary, not by falling
    b = mock_batch([297] * 9 + [50], end_flags=[1.0] * 9 + [0.0])
    assert C.balance_test(b, 3.0) is True
    # the same tail as a real termination counts against the fraction
    b2 = mock_batch([297] * 5 + [50] * 5,
                    end_flags=[1.0] * 5 + [0.0, 1.0, 1.0, 1.0, 1.0])
    # 5 long + 4 counted short = 5/9 < 0.9
    assert C.balance_test(b2, 3.0) is False


def test_balance_truncated_long_counts():
    b = mock_batch([200], end_flags=[0.0])
    assert C.balance_test(b, 3.0) is True


def test_balance_no_evidence_fails():
    b = mock_batch([50, 60], end_flags=[0.0, 0.0])
    assert C.balance_test(b, 3.0) is False


def test_balance_period_scaling():
    assert C.balance_test(mock_batch([66]), 1.0) is True
    assert C.balance_test(mock_batch([65]), 1.0) is False


def test_balance_threshold_parameter():
    b = mock_batch([297] * 8 + [100, 100])
    assert C.balance_test(b, 3.0, threshold=0.8) is True
    assert C.balance_test(b, 3.0, threshold=0.81) is False


# -- line search -------------------------------------------------------------


def test_line_search_radial_boundary():
    # boundary of the admissible ball along the diagonal: 100/sqrt(2) per axis
    c = cfg()
    x = Lesson(200.0, 200.0)
    cand = C.line_search(x, (-1.0, -1.0), 100.0, radial_eval(100.0), c)
    assert cand is not None
    assert cand.kp == cand.kd
    assert abs(cand.norm() - 100.0) <= RES
    assert abs(cand.kp - 100.0 / math.sqrt(2.0)) <= RES


def test_line_search_full_clamp_endpoint():
    c = cfg()
    x = Lesson(200.0, 200.0)
    always = lambda lesson: 100.0
    assert C.line_search(x, (-1.0, -0.5), 100.0, always, c) == Lesson(0.0, 0.0)
    assert C.line_search(x, (-1.0, 0.0), 100.0, always, c) == Lesson(0.0, 200.0)
    assert C.line_search(x, (0.0, -1.0), 100.0, always, c) == Lesson(200.0, 0.0)


def test_line_search_inadmissible_returns_none():
    c = cfg()
    x = Lesson(200.0, 200.0)
    never = lambda lesson: 0.0
    for d in C.DIRECTIONS:
        assert C.line_search(x, d, 100.0, never, c) is None


def test_line_search_exhausted_component_returns_none():
    c = cfg()
    assert C.line_search(Lesson(0.0, 50.0), (-1.0, 0.0), 100.0,
                         lambda lesson: 100.0, c) is None


# -- lesson update -----------------------------------------------------------


def test_update_lesson_ball_example():
    # shrink from (200, 200) against an admissible ball of radius 100:
    # the winner must sit on the boundary to within the search resolution
    c = cfg()
    ev = radial_eval(100.0)
    out = C.update_lesson(Lesson(200.0, 200.0), 100.0, ev, c)
    assert abs(out.norm() - 100.0) <= RES
    assert ev(out) > 0.6 * 100.0


def test_update_lesson_constant_eval_reaches_zero():
    c = cfg()
    out = C.update_lesson(Lesson(200.0, 200.0), 100.0, lambda m: 100.0, c)
    assert out == Lesson(0.0, 0.0)


def test_update_lesson_stall_returns_input():
    c = cfg()
    x = Lesson(200.0, 200.0)
    out = C.update_lesson(x, 100.0, lambda m: 0.0, c)
    assert out == x


def test_update_lesson_floor_is_strict():
    # returns exactly at l% of the reference are not admissible
    c = cfg()
    x = Lesson(200.0, 200.0)
    out = C.update_lesson(x, 100.0, lambda m: 60.0, c)
    assert out == x


def test_update_lesson_clamps_components():
    # admissibility depends on kd only; every sensible direction parks kp at 0
    c = cfg()
    ev = lambda m: 100.0 if m.kd >= 800.0 else 0.0
    out = C.update_lesson(Lesson(10.0, 1000.0), 100.0, ev, c)
    assert out.kp == 0.0
    assert abs(out.kd - 800.0) <= RES


def test_update_lesson_picks_min_norm_direction():
    # admissible half-plane kp >= 150: the (-0.5, -1) search lands at
    # (150, 100), strictly below every other direction's best
    c = cfg()
    ev = lambda m: 100.0 if m.kp >= 150.0 else 0.0
    out = C.update_lesson(Lesson(200.0, 200.0), 100.0, ev, c)
    assert abs(out.kp - 150.0) <= RES
    assert abs(out.kd - 100.0) <= RES


def test_update_lesson_requires_positive_reference():
    with pytest.raises(ValueError):
        C.update_lesson(Lesson(200.0, 200.0), 0.0, lambda m: 100.0, cfg())


def test_update_lesson_admissibility_property():
    # random admissible balls: the result is admissible, never grows, and
    # lands on the ball boundary whenever the ball cuts inside x
    c = cfg()
    rng = np.random.default_rng(7)
    for _ in range(40):
        x = Lesson(float(rng.uniform(50.0, 400.0)),
                   float(rng.uniform(50.0, 400.0)))
        r = float(rng.uniform(5.0, 500.0))
        ev = radial_eval(r)
        out = C.update_lesson(x, 100.0, ev, c)
        assert out.norm() <= x.norm()
        if r >= x.norm():
            assert out == x
        else:
            assert ev(out) > 60.0
            assert abs(out.norm() - r) <= RES


# -- learner-centered scheduler ----------------------------------------------


def test_learner_centered_full_run():
    trainer = MockTrainer(tolerance=300.0)
    params, trace = C.run_learner_centered(trainer, cfg(), max_iters=500)
    assert params is trainer.params
    acc = trace.accepted_entries()
    assert len(acc) >= 2
    norms = [e.begin.norm() for e in acc]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    # constant assistance within each iteration, and a zero final phase
    assert all(e.begin == e.end for e in trace.entries)
    assert trace.entries[-1].begin == Lesson(0.0, 0.0)
    assert len(trace.entries) < 200


def test_learner_centered_unreachable_gate_budget():
    trainer = MockTrainer()
    with pytest.raises(C.BudgetExceeded) as exc:
        C.run_learner_centered(trainer, cfg(h_pct=101.0), max_iters=60)
    e = exc.value
    assert e.state.phase == "loop"
    assert len(e.trace.entries) == 60
    assert not e.trace.accepted_entries()
    assert e.params is trainer.params


def test_learner_centered_small_x0_skips_loop():
    trainer = MockTrainer()
    c = cfg(x0=Lesson(2.0, 2.0))
    params, trace = C.run_learner_centered(trainer, c, max_iters=500)
    assert not trace.accepted_entries()
    assert trace.entries[0].begin == Lesson(2.0, 2.0)
    assert trace.entries[-1].begin == Lesson(0.0, 0.0)


def test_learner_centered_stall_hits_budget():
    # a policy that tolerates no assistance reduction at all: the gate opens
    # but every line search comes back empty
    trainer = MockTrainer(tolerance=0.0)
    with pytest.raises(C.BudgetExceeded) as exc:
        C.run_learner_centered(trainer, cfg(), max_iters=60)
    assert not exc.value.trace.accepted_entries()


# -- environment-centered scheduler ------------------------------------------


def test_env_centered_full_run():
    trainer = MockTrainer()
    states = []
    params, trace = C.run_env_centered(
        trainer, cfg(), max_iters=500,
        state_cb=lambda st, tr: states.append((st.phase, st.iters_used,
                                               st.r_bar)))
    acc = trace.accepted_entries()
    assert [e.begin.kp for e in acc] == [2000.0, 500.0, 125.0, 31.25, 7.8125]
    assert [e.begin.kd for e in acc] == [2000.0, 500.0, 125.0, 31.25, 7.8125]
    for e in acc:
        assert e.end.kp == e.begin.kp * 0.0625
        assert e.end.kd == e.begin.kd * 0.0625
    assert trace.entries[-1].begin == Lesson(0.0, 0.0)
    # the return floor is set once after the initial phase, never refreshed
    floors = {r for ph, _, r in states if ph in ("loop", "final", "done")}
    assert floors == {70.0}
    iters = [i for _, i, _ in states]
    assert iters == sorted(iters)


def test_env_centered_overlap_property():
    # each accepted range starts exactly where the previous rollout's
    # in-episode decay had arrived one period in
    trainer = MockTrainer()
    c = cfg()
    _, trace = C.run_env_centered(trainer, c, max_iters=500)
    acc = trace.accepted_entries()
    for prev, nxt in zip(acc, acc[1:]):
        rng = LessonRange.from_begin(prev.begin, c.k_pct)
        m = milestone_strength(rng, c.p, k_pct=c.k_pct, p=c.p)
        assert (m.kp, m.kd) == (nxt.begin.kp, nxt.begin.kd)


def test_env_centered_balance_gate_blocks():
    trainer = MockTrainer(balance_after=10 ** 9)
    with pytest.raises(C.BudgetExceeded) as exc:
        C.run_env_centered(trainer, cfg(), max_iters=50)
    assert not exc.value.trace.accepted_entries()
    assert exc.value.state.phase == "loop"


def test_env_centered_return_gate_is_strict():
    # floor equal to the running return: strictly-greater never fires
    trainer = MockTrainer()
    with pytest.raises(C.BudgetExceeded) as exc:
        C.run_env_centered(trainer, cfg(g_pct=100.0), max_iters=60)
    assert not exc.value.trace.accepted_entries()


def test_env_centered_resume_round_trip():
    c = cfg()
    baseline = MockTrainer()
    _, trace_a = C.run_env_centered(baseline, c, max_iters=10000)

    trainer = MockTrainer()
    with pytest.raises(C.BudgetExceeded) as exc:
        C.run_env_centered(trainer, c, max_iters=30)
    part1 = exc.value.trace
    st = C.SchedulerState.from_json(exc.value.state.to_json())
    _, part2 = C.run_env_centered(trainer, c, max_iters=10000, state=st)

    got = [e.begin.kp for e in part1.accepted_entries()] + \
          [e.begin.kp for e in part2.accepted_entries()]
    want = [e.begin.kp for e in trace_a.accepted_entries()]
    assert got == want
    assert len(part1.entries) + len(part2.entries) == len(trace_a.entries)
    assert part2.entries[-1].begin == Lesson(0.0, 0.0)


# -- persistence -------------------------------------------------------------


def test_scheduler_state_json_round_trip():
    st = C.SchedulerState(curriculum="env", phase="loop", x=(125.0, 125.0),
                          x_end=(7.8125, 7.8125), r_bar=70.0, iters_used=31,
                          best=100.0, since=4)
    back = C.SchedulerState.from_json(st.to_json())
    assert back == st
    assert isinstance(back.x, tuple) and isinstance(back.x_end, tuple)


def test_trace_csv_round_trip(tmp_path):
    trace = C.CurriculumTrace()
    trace.append(C.TraceEntry(1, Lesson(2000.0, 2000.0), Lesson(125.0, 125.0),
                              12.345678901234567, False))
    trace.append(C.TraceEntry(2, Lesson(7.8125, 0.1), Lesson(0.0, 0.0),
                              -3.0, True))
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    back = C.CurriculumTrace.read_csv(path)
    assert back.entries == trace.entries
    header = path.read_text().splitlines()[0]
    assert header == ("iteration, kp_begin, kd_begin, kp_end, kd_end, "
                      "avg_return, accepted")


def test_trace_csv_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.csv"
    path.write_text("t, q_0\n0.0, 1.0\n")
    with pytest.raises(ValueError):
        C.CurriculumTrace.read_csv(path)


# -- real-trainer adapter ----------------------------------------------------


class _ScriptedEnv:
    """Five-step episodes, unit reward, observation encodes progress."""

    def __init__(self, seed, lesson_range):
        self.seed = seed
        self.n = -1
        self.t = 0

    def _obs(self):
        return np.array([float(self.n), float(self.t), float(self.seed)])

    def reset(self):
        self.n += 1
        self.t = 0
        return self._obs()

    def step(self, action):
        self.t += 1
        return SimpleNamespace(observation=self._obs(), reward=1.0,
                               done=self.t >= 5, info={})


def _scripted_factory(seed, lesson_range):
    return _ScriptedEnv(seed, lesson_range)


def test_learner_trainer_adapter():
    params = P.init_params(3, 1, seed=0)
    lcfg = L.LearnerConfig(w_sym=0.0, batch_steps=40, minibatch=32, epochs=1,
                           workers=1)
    learner = L.Learner(params, _scripted_factory, lcfg, model=None, seed=0)
    trainer = C.LearnerTrainer(learner)
    assert trainer.params is learner.params
    assert trainer.eval_return(Lesson(0.0, 0.0), 3) == pytest.approx(5.0)
    _, batch, stats = trainer.train_iteration(
        LessonRange.constant(Lesson(0.0, 0.0)))
    assert stats.avg_return == pytest.approx(5.0)
    assert batch.n_steps == 40
