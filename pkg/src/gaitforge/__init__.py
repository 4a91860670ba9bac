"""Locomotion training with mirror-symmetry regularization and assistive
force curricula, on a self-contained reduced-coordinate physics core."""

__version__ = "0.1.0"

from .assistant import Lesson, LessonRange, milestone_strength, spd_assist_force
from .charmodel import (CharacterModel, ParseError, ValidationError, load_character,
                        mirror_action, mirror_observation)
from .curriculum import (BudgetExceeded, CurriculumConfig, LearnerTrainer,
                         run_env_centered, run_learner_centered)
from .dynamics import ExternalForce, NumericalError, SimState, World
from .env import EnvConfig, LocomotionEnv, RewardConfig, StepResult
from .learner import EnvFactory, Learner, LearnerConfig
from .metrics import (GaitSummary, Trajectory, format_report, record_rollout,
                      summarize, symmetry_index)
from .policy import init_params, load_params, save_params

__all__ = [
    "__version__",
    "CharacterModel", "ParseError", "ValidationError", "load_character",
    "mirror_observation", "mirror_action",
    "World", "SimState", "ExternalForce", "NumericalError",
    "Lesson", "LessonRange", "milestone_strength", "spd_assist_force",
    "LocomotionEnv", "EnvConfig", "RewardConfig", "StepResult",
    "init_params", "save_params", "load_params",
    "Learner", "LearnerConfig", "EnvFactory",
    "CurriculumConfig", "LearnerTrainer", "BudgetExceeded",
    "run_learner_centered", "run_env_centered",
    "Trajectory", "GaitSummary", "record_rollout", "symmetry_index",
    "summarize", "format_report",
]
