"""Batch engine for a semi-off-policy reasoning data loop.

The library covers the full desk-scale loop: sampling image captions and
reasoning trajectories from pluggable backends, verifying final answers,
propagating outcome rewards back to captions, selecting threshold-passing
shortest trajectories into a training set, and running policy-gradient
updates on a small enumerable policy where the update math can be checked
exactly.
"""

from sophia.core import (
    Caption,
    ConfigError,
    OffPolicyRecord,
    PipelineConfig,
    TaskItem,
    Trajectory,
    count_tokens,
    load_config,
)

__version__ = "0.1.0"

__all__ = [
    "Caption",
    "ConfigError",
    "OffPolicyRecord",
    "PipelineConfig",
    "TaskItem",
    "Trajectory",
    "count_tokens",
    "load_config",
    "__version__",
]
