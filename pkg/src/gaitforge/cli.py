"""Operator entry point: train, evaluate, replay, and inspect runs.

A training run writes a self-describing directory: the manifest snapshots
the full configuration and a copy of the character file, so `eval` and
`replay` need nothing but the directory itself.  Exit codes: 0 success,
2 usage or configuration error, 3 iteration budget exhausted, 4 numerical
failure (including replay divergence).
"""

import argparse
import dataclasses
import hashlib
import importlib.metadata
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .assistant import Lesson, LessonRange
from .charmodel import builtin_character_path, load_character
from .curriculum import (BudgetExceeded, CurriculumConfig, CurriculumTrace,
                         LearnerTrainer, SchedulerState, run_env_centered,
                         run_learner_centered)
from .env import EnvConfig, RewardConfig
from .learner import EnvFactory, Learner, LearnerConfig
from .metrics import (Trajectory, export_trajectory, format_report,
                      import_trajectory, record_rollout, summarize)
from .policy import init_params, load_params, mean_action, save_params

STATS_HEADER = ("iteration, avg_return, avg_len, ppo_loss, sym_loss, "
                "value_loss, lesson_norm, wall_time_s")
EVAL_SEED = 1 << 20  # outside the worker seed range used during training


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


# -- configuration assembly ---------------------------------------------------

_SECTIONS = {"env": EnvConfig, "reward": RewardConfig,
             "learner": LearnerConfig, "curriculum": CurriculumConfig}
_RUN_KEYS = ("name", "mode", "seed", "max_iters", "checkpoint_every",
             "character")


@dataclass
class RunSpec:
    """Everything cmd_train needs, resolved from preset/config/flags."""
    character: str
    preset: Optional[str]
    mode: str
    seed: int
    max_iters: int
    checkpoint_every: int
    env: EnvConfig
    reward: RewardConfig
    learner: LearnerConfig
    curriculum: CurriculumConfig


def _load_preset(name: str) -> dict:
    root = resources.files("gaitforge").joinpath("data", "presets")
    path = root.joinpath(name + ".json")
    if not path.is_file():
        known = sorted(p.name[:-5] for p in root.iterdir()
                       if p.name.endswith(".json"))
        raise ConfigError("preset: unknown preset '%s' (known: %s)"
                          % (name, ", ".join(known)))
    return json.loads(path.read_text())


def _merge_doc(run: dict, sections: dict, doc: dict, origin: str):
    """Fold one JSON document into the accumulating run/section dicts."""
    if not isinstance(doc, dict):
        raise ConfigError("%s: expected a JSON object" % origin)
    for key, val in doc.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError("%s.%s: expected an object" % (origin, key))
            fields = {f.name for f in dataclasses.fields(_SECTIONS[key])}
            for k, v in val.items():
                if k not in fields:
                    raise ConfigError("%s.%s.%s: unknown field"
                                      % (origin, key, k))
                sections[key][k] = v
        elif key in _RUN_KEYS:
            run[key] = val
        else:
            raise ConfigError("%s.%s: unknown key" % (origin, key))


def _build_cfg(cls, kw: dict, section: str):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("%s: %s" % (section, exc))


def _require(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError("%s: %s" % (field, msg))


def assemble_run_spec(args) -> RunSpec:
    sections = {k: {} for k in _SECTIONS}
    run = {"name": None, "mode": "env", "seed": 0, "max_iters": 100000,
           "checkpoint_every": 10, "character": None}

    preset_name = None
    if args.preset is not None:
        preset_name = args.preset
        _merge_doc(run, sections, _load_preset(args.preset), "preset")
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ConfigError("config: file not found: %s" % cfg_path)
        try:
            doc = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config: %s" % exc)
        _merge_doc(run, sections, doc, "config")

    # flags override files; the env var overrides everything
    if args.sym_weight is not None:
        sections["learner"]["w_sym"] = args.sym_weight
    if args.workers is not None:
        sections["learner"]["workers"] = args.workers
    threads = os.environ.get("GAITFORGE_THREADS")
    if threads is not None and threads != "":
        try:
            sections["learner"]["workers"] = int(threads)
        except ValueError:
            raise ConfigError("GAITFORGE_THREADS: not an integer: %r"
                              % threads)
    if args.seed is not None:
        run["seed"] = args.seed
    if args.max_iters is not None:
        run["max_iters"] = args.max_iters
    if args.curriculum is not None:
        run["mode"] = args.curriculum
    if args.character is not None:
        run["character"] = args.character

    if "x0" in sections["curriculum"]:
        x0 = sections["curriculum"]["x0"]
        if not (isinstance(x0, (list, tuple)) and len(x0) == 2):
            raise ConfigError("curriculum.x0: expected [kp, kd]")
        sections["curriculum"]["x0"] = Lesson(float(x0[0]), float(x0[1]))

    env_cfg = _build_cfg(EnvConfig, sections["env"], "env")
    reward_cfg = _build_cfg(RewardConfig, sections["reward"], "reward")
    learner_cfg = _build_cfg(LearnerConfig, sections["learner"], "learner")
    sched_cfg = _build_cfg(CurriculumConfig, sections["curriculum"],
                           "curriculum")

    _require(learner_cfg.w_sym >= 0, "learner.w_sym", "must be >= 0")
    _require(learner_cfg.workers >= 1, "learner.workers", "must be >= 1")
    _require(learner_cfg.epochs >= 1, "learner.epochs", "must be >= 1")
    _require(learner_cfg.minibatch >= 1, "learner.minibatch", "must be >= 1")
    _require(learner_cfg.batch_steps >= 1, "learner.batch_steps",
             "must be >= 1")
    _require(env_cfg.dt > 0, "env.dt", "must be > 0")
    _require(env_cfg.substeps >= 1, "env.substeps", "must be >= 1")
    _require(env_cfg.horizon >= 1, "env.horizon", "must be >= 1")
    _require(run["mode"] in ("learner", "env"), "curriculum",
             "must be 'learner' or 'env'")
    try:
        seed = int(run["seed"])
        max_iters = int(run["max_iters"])
        checkpoint_every = int(run["checkpoint_every"])
    except (TypeError, ValueError):
        raise ConfigError("seed/max_iters/checkpoint_every: must be integers")
    _require(max_iters >= 1, "max_iters", "must be >= 1")
    _require(checkpoint_every >= 1, "checkpoint_every", "must be >= 1")

    character = run["character"] or builtin_character_path("biped9")
    if not Path(character).is_file():
        raise ConfigError("character: file not found: %s" % character)

    return RunSpec(character=str(character), preset=preset_name,
                   mode=run["mode"], seed=seed, max_iters=max_iters,
                   checkpoint_every=checkpoint_every, env=env_cfg,
                   reward=reward_cfg, learner=learner_cfg,
                   curriculum=sched_cfg)


def _parse_assist(text: Optional[str]) -> Tuple[float, float]:
    if text is None:
        return 0.0, 0.0
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError("assist: expected 'kp,kd', got %r" % text)
    try:
        kp, kd = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError("assist: expected 'kp,kd', got %r" % text)
    if kp < 0 or kd < 0:
        raise ConfigError("assist: gains must be >= 0")
    return kp, kd


# -- run directory ------------------------------------------------------------

LAYOUT = {"character": "character.model", "manifest": "manifest.json",
          "stats": "stats.csv", "trace": "trace.csv",
          "checkpoints": "checkpoints", "final_params": "checkpoints/final.gfpk",
          "scheduler_state": "scheduler_state.json", "eval": "eval"}


def _code_version() -> str:
    try:
        return importlib.metadata.version("gaitforge")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def _build_manifest(spec: RunSpec, char_sha: str) -> dict:
    cfg = {"env": dataclasses.asdict(spec.env),
           "reward": dataclasses.asdict(spec.reward),
           "learner": dataclasses.asdict(spec.learner),
           "curriculum": dataclasses.asdict(spec.curriculum),
           "max_iters": spec.max_iters,
           "checkpoint_every": spec.checkpoint_every}
    return {"command": "train",
            "preset": spec.preset,
            "character": {"source": spec.character, "sha256": char_sha,
                          "file": LAYOUT["character"]},
            "seed": spec.seed,
            "curriculum": spec.mode,
            "code_version": _code_version(),
            "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "config": cfg,
            "layout": dict(LAYOUT)}


def _read_manifest(run: Path) -> dict:
    path = run / "manifest.json"
    if not path.is_file():
        raise ConfigError("run_dir: no manifest.json in %s" % run)
    return json.loads(path.read_text())


def _load_run_env(run: Path, man: dict):
    """Model + env/reward configs exactly as the run was trained."""
    char = run / man["layout"]["character"]
    if not char.is_file():
        raise ConfigError("character: missing from run dir: %s" % char)
    sha = hashlib.sha256(char.read_bytes()).hexdigest()
    if sha != man["character"]["sha256"]:
        raise ConfigError("character: %s does not match manifest sha256"
                          % char)
    model = load_character(str(char))
    env_cfg = EnvConfig(**man["config"]["env"])
    reward_cfg = RewardConfig(**man["config"]["reward"])
    return model, env_cfg, reward_cfg


def _resolve_checkpoint(run: Path, explicit: Optional[str]) -> Path:
    if explicit is not None:
        path = Path(explicit)
        if not path.is_file():
            raise ConfigError("checkpoint: file not found: %s" % path)
        return path
    final = run / LAYOUT["final_params"]
    if final.is_file():
        return final
    ckpts = sorted((run / LAYOUT["checkpoints"]).glob("iter_*.gfpk"))
    if ckpts:
        return ckpts[-1]
    raise ConfigError("checkpoint: no checkpoint found under %s"
                      % (run / LAYOUT["checkpoints"]))


# -- train --------------------------------------------------------------------


class _RecordingTrainer:
    """Trainer adapter journaling per-iteration stats and checkpoints.

    Stats rows are appended as they happen so an interrupted run still
    leaves a usable CSV; wall_time_s is the only nondeterministic column.
    """

    def __init__(self, trainer: LearnerTrainer, run_dir: Path,
                 checkpoint_every: int):
        self._trainer = trainer
        self._stats_path = run_dir / LAYOUT["stats"]
        self._ckpt_dir = run_dir / LAYOUT["checkpoints"]
        self._every = checkpoint_every
        self._t0 = time.monotonic()
        self._stats_path.write_text(STATS_HEADER + "\n")

    @property
    def params(self):
        return self._trainer.params

    def eval_return(self, lesson: Lesson, n: int) -> float:
        return self._trainer.eval_return(lesson, n)

    def train_iteration(self, lesson_range):
        params, batch, stats = self._trainer.train_iteration(lesson_range)
        it = stats.iteration + 1  # learner counts from 0
        norm = lesson_range.begin.norm() if lesson_range is not None else 0.0
        wall = time.monotonic() - self._t0
        row = ", ".join(["%d" % it]
                        + ["%.17g" % v for v in
                           (stats.avg_return, stats.avg_len, stats.ppo_loss,
                            stats.sym_loss, stats.value_loss, norm)]
                        + ["%.3f" % wall])
        with open(self._stats_path, "a") as fh:
            fh.write(row + "\n")
        if it % self._every == 0:
            save_params(params,
                        str(self._ckpt_dir / ("iter_%05d.gfpk" % it)))
        print("iter %d  return %.3f  len %.1f  lesson %.1f" %
              (it, stats.avg_return, stats.avg_len, norm), flush=True)
        return params, batch, stats


def cmd_train(args) -> int:
    spec = assemble_run_spec(args)
    out = Path(args.out) if args.out else \
        Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    if (out / "manifest.json").exists():
        raise ConfigError("out: %s already holds a run (manifest.json "
                          "present); run directories are immutable" % out)
    (out / LAYOUT["checkpoints"]).mkdir(parents=True, exist_ok=True)

    char_dst = out / LAYOUT["character"]
    shutil.copyfile(spec.character, char_dst)
    char_sha = hashlib.sha256(char_dst.read_bytes()).hexdigest()
    manifest = _build_manifest(spec, char_sha)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print("run dir: %s" % out, flush=True)

    model = load_character(str(char_dst))
    factory = EnvFactory(model, spec.reward, spec.env)
    params = init_params(model.obs_dim, model.nact, seed=spec.seed)
    learner = Learner(params, factory, spec.learner, model=model,
                      seed=spec.seed)
    trainer = _RecordingTrainer(LearnerTrainer(learner), out,
                                spec.checkpoint_every)
    runner = run_env_centered if spec.mode == "env" else run_learner_centered

    last_state = [None]

    def cb(st: SchedulerState, trace: CurriculumTrace):
        last_state[0] = st
        (out / LAYOUT["scheduler_state"]).write_text(st.to_json())
        trace.write_csv(str(out / LAYOUT["trace"]))

    code = 0
    try:
        params, trace = runner(trainer, spec.curriculum,
                               max_iters=spec.max_iters, state_cb=cb)
    except BudgetExceeded as exc:
        print("budget exhausted: %s" % exc, file=sys.stderr)
        params, trace = exc.params, exc.trace
        if exc.state is not None:
            (out / LAYOUT["scheduler_state"]).write_text(exc.state.to_json())
        code = 3
    else:
        if last_state[0] is not None:
            # the runner flipped this shared object to its final phase
            (out / LAYOUT["scheduler_state"]).write_text(
                last_state[0].to_json())
    trace.write_csv(str(out / LAYOUT["trace"]))
    save_params(params, str(out / LAYOUT["final_params"]))
    print("done: exit %d, artifacts in %s" % (code, out))
    return code


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    man = _read_manifest(run)
    model, env_cfg, reward_cfg = _load_run_env(run, man)
    params = load_params(str(_resolve_checkpoint(run, args.checkpoint)))
    kp, kd = _parse_assist(args.assist)
    lesson_range = LessonRange.constant(Lesson(kp, kd))
    factory = EnvFactory(model, reward_cfg, env_cfg)

    _require(args.rollouts >= 1, "rollouts", "must be >= 1")
    eval_dir = run / LAYOUT["eval"]
    eval_dir.mkdir(exist_ok=True)
    trajs = []
    for i in range(args.rollouts):
        env = factory(EVAL_SEED + i, lesson_range)
        traj = record_rollout(env, lambda obs, k: mean_action(params, obs))
        export_trajectory(traj, str(eval_dir / ("rollout_%02d.csv" % i)))
        trajs.append(traj)

    report = format_report(summarize(trajs, model, reward_cfg))
    (eval_dir / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


# -- replay -------------------------------------------------------------------

_TRAJ_FIELDS = ("t", "q", "qd", "actions", "torques", "components",
                "contacts", "assist")


def _first_divergence(a: Trajectory, b: Trajectory) -> Optional[int]:
    """Row index of the first bitwise mismatch, or None when identical."""
    n = min(a.t.shape[0], b.t.shape[0])
    for k in range(n):
        for name in _TRAJ_FIELDS:
            xa = np.atleast_1d(getattr(a, name)[k])
            xb = np.atleast_1d(getattr(b, name)[k])
            if not np.array_equal(xa, xb, equal_nan=True):
                return k
    if a.t.shape[0] != b.t.shape[0]:
        return n
    return None


def cmd_replay(args) -> int:
    run = Path(args.run_dir)
    man = _read_manifest(run)
    model, env_cfg, reward_cfg = _load_run_env(run, man)
    try:
        traj = import_trajectory(args.trajectory)
    except ValueError as exc:
        raise ConfigError("trajectory: %s" % exc)
    if traj.t.shape[0] == 0:
        raise ConfigError("trajectory: empty, nothing to replay")
    kp, kd = _parse_assist(args.assist)

    env = EnvFactory(model, reward_cfg, env_cfg)(
        0, LessonRange.constant(Lesson(kp, kd)))
    env.reset_to(traj.q[0], traj.qd[0])
    acts = traj.actions
    replayed = record_rollout(env, lambda obs, k: acts[k],
                              max_steps=acts.shape[0], reset=False)

    k = _first_divergence(traj, replayed)
    if k is not None:
        print("replay mismatch: first divergent step %d of %d"
              % (k, traj.t.shape[0]), file=sys.stderr)
        return 4
    dst = Path(args.out) if args.out else \
        Path(args.trajectory).with_suffix(".replay.csv")
    export_trajectory(replayed, str(dst))
    print("replay match: %d steps, wrote %s" % (replayed.t.shape[0], dst))
    return 0


# -- inspect ------------------------------------------------------------------


def cmd_inspect(args) -> int:
    run = Path(args.run_dir)
    man = _read_manifest(run)
    print("run: %s" % run)
    print("preset: %s" % (man.get("preset") or "-"))
    print("curriculum: %s" % man["curriculum"])
    print("seed: %s" % man["seed"])
    print("code version: %s" % man["code_version"])
    print("started: %s" % man["start_time"])
    print("character: %s (sha256 %s)"
          % (man["character"]["file"], man["character"]["sha256"][:12]))

    stats = run / man["layout"]["stats"]
    if stats.is_file():
        rows = stats.read_text().strip().splitlines()
        print("iterations: %d" % (len(rows) - 1))
        if len(rows) > 1:
            print("last: %s" % rows[-1])
    trace_path = run / man["layout"]["trace"]
    if trace_path.is_file():
        trace = CurriculumTrace.read_csv(str(trace_path))
        print("lessons accepted: %d of %d entries"
              % (len(trace.accepted_entries()), len(trace.entries)))
    state_path = run / man["layout"]["scheduler_state"]
    if state_path.is_file():
        st = SchedulerState.from_json(state_path.read_text())
        print("scheduler phase: %s (x = %.6g, %.6g)"
              % (st.phase, st.x[0], st.x[1]))
    ckpt_dir = run / man["layout"]["checkpoints"]
    ckpts = sorted(ckpt_dir.glob("iter_*.gfpk")) if ckpt_dir.is_dir() else []
    has_final = (run / man["layout"]["final_params"]).is_file()
    print("checkpoints: %d%s" % (len(ckpts), " + final" if has_final else ""))
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gaitforge",
        description="Symmetric low-energy locomotion training.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train",
                       help="train a policy under an assistive curriculum")
    t.add_argument("--preset", default=None,
                   help="named configuration shipped with the package")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--character", default=None,
                   help="character model file (default: built-in biped9)")
    t.add_argument("--curriculum", choices=("learner", "env"), default=None,
                   help="scheduler flavor (default env)")
    t.add_argument("--sym-weight", type=float, default=None,
                   help="mirror loss weight (default 4)")
    t.add_argument("--seed", type=int, default=None, help="default 0")
    t.add_argument("--workers", type=int, default=None,
                   help="rollout workers (default 8; "
                        "GAITFORGE_THREADS overrides)")
    t.add_argument("--max-iters", type=int, default=None,
                   help="iteration budget before exit 3")
    t.add_argument("--out", default=None,
                   help="run directory (default runs/<timestamp>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="deterministic rollouts + gait report")
    e.add_argument("run_dir")
    e.add_argument("--rollouts", type=int, default=4)
    e.add_argument("--assist", default=None,
                   help="kp,kd assistance (default 0,0)")
    e.add_argument("--checkpoint", default=None,
                   help="params file (default: final, else latest)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay",
                       help="re-simulate a logged trajectory, bit-exact")
    r.add_argument("run_dir")
    r.add_argument("trajectory", help="trajectory CSV to replay")
    r.add_argument("--assist", default=None,
                   help="kp,kd the trajectory was recorded at (default 0,0)")
    r.add_argument("--out", default=None,
                   help="where to write the replayed CSV")
    r.set_defaults(func=cmd_replay)

    i = sub.add_parser("inspect", help="summarize a run directory")
    i.add_argument("run_dir")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
