"""Multi-round sparse frame selection for video question answering."""
from .backend import (AuthError, BackendError, MalformedReply, ModelBackend, OptionScores,
                      RateLimited, SamplingParams, ScoringUnavailable, ScriptedBackend,
                      ServerError, Timeout)
from .controller import EpisodeConfig, QAItem, Trajectory, run_batch, run_episode
from .protocol import (AgentResponse, FinalAnswer, FrameRequest, ParseError, SummaryState,
                       format_is_valid, parse_response, serialize_response)
from .reward import RewardTrace, RewardWeights, score_trajectory
from .synth import OracleBackend, OracleRules, SyntheticVideo, generate_task

__version__ = "0.1.0"

__all__ = [
    "AgentResponse", "AuthError", "BackendError", "EpisodeConfig", "FinalAnswer", "FrameRequest",
    "MalformedReply", "ModelBackend", "OptionScores", "OracleBackend", "OracleRules", "ParseError",
    "QAItem", "RateLimited", "RewardTrace", "RewardWeights", "SamplingParams", "ScoringUnavailable",
    "ScriptedBackend", "ServerError", "SummaryState", "SyntheticVideo", "Timeout", "Trajectory",
    "format_is_valid", "generate_task", "parse_response", "run_batch", "run_episode",
    "score_trajectory", "serialize_response",
]
