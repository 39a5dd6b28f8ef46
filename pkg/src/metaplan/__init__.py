"""Meta-plan guided tool-using agents: planning, execution, scoring and preference data."""

from .metrics import SampleReport, StepScore, discounted_aggregate, evaluate_trajectory, sequence_scores
from .plan_model import MetaPlan, MetaStep, TaskRecord, ToolCall, Trajectory, parse_meta_plan, parse_tool_call
from .preference import CandidateScores, PreferencePair, build_pairs, dpo_loss, gamma_sweep
from .significance import mann_whitney_greater
from .task_library import TaskLibrary, load_library, pruned_toolset, sample_library, validate_plan

__version__ = "0.1.0"

__all__ = [
    "CandidateScores", "MetaPlan", "MetaStep", "PreferencePair", "SampleReport", "StepScore", "TaskLibrary",
    "TaskRecord", "ToolCall", "Trajectory", "build_pairs", "discounted_aggregate", "dpo_loss",
    "evaluate_trajectory", "gamma_sweep", "load_library", "mann_whitney_greater", "parse_meta_plan",
    "parse_tool_call", "pruned_toolset", "sample_library", "sequence_scores", "validate_plan",
]
