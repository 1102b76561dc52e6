"""RL from teacher-model refinement on a tiny autoregressive translation policy."""

from .corpus import ConfigError, CorpusError, ParallelExample, SyntheticTaskSpec, Vocab
from .policy import PolicyConfig, PolicyParams, PolicySnapshot
from .refine import TeacherConfig
from .rl import TrainConfig, train_rl
from .sft import SftConfig, train_sft

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorpusError",
    "ParallelExample",
    "PolicyConfig",
    "PolicyParams",
    "PolicySnapshot",
    "SftConfig",
    "SyntheticTaskSpec",
    "TeacherConfig",
    "TrainConfig",
    "Vocab",
    "train_rl",
    "train_sft",
]
