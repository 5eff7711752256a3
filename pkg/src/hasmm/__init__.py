"""Hidden absorbing semi-Markov models for censored, irregularly sampled episodes."""

__version__ = "0.1.0"

from .emission import GpHyper, Segment
from .generate import Episode, LatentTrajectory, generate_dataset, read_episodes, write_episodes
from .model import ParameterSet, reference_instance
from .volterra import TransitionTable, build_table, load_table, query, save_table
from .filter import ForwardFilter, forward_messages, risk_score, state_posterior, stream_filter

__all__ = [
    "__version__",
    "GpHyper",
    "Segment",
    "Episode",
    "LatentTrajectory",
    "generate_dataset",
    "read_episodes",
    "write_episodes",
    "ParameterSet",
    "reference_instance",
    "TransitionTable",
    "build_table",
    "load_table",
    "query",
    "save_table",
    "ForwardFilter",
    "forward_messages",
    "risk_score",
    "state_posterior",
    "stream_filter",
]
