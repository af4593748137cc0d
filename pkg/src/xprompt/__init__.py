"""Soft-prompt tuning on a frozen mini-transformer, with hierarchical
structured pruning of prompt tokens and pieces, importance scoring through
exact mask gradients, and weight rewinding."""

from . import autograd, backbone, checkpoint, cli, harness, optim, prompt, pruning, tasks
from .errors import ConfigError, DataError, ShapeError, StageError, StateError

__all__ = [
    "autograd",
    "backbone",
    "checkpoint",
    "cli",
    "harness",
    "optim",
    "prompt",
    "pruning",
    "tasks",
    "ConfigError",
    "DataError",
    "ShapeError",
    "StageError",
    "StateError",
]
