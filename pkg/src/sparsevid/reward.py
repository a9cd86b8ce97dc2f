"""Annotation-free episode reward.

Per step ``t`` the reward is::

    r_t = l1 * conf_gain_t + l2 * summary_ok_t + l3 * stop_t + alpha * valid_format_t

where ``conf_gain`` is the positive part of the change in the correct
option's log-odds margin after new frames arrive (frame-request steps only),
``summary_ok`` asks whether the final summary alone already points at the
correct option, and ``stop`` pays ``1 + beta * max(t_stop - tau, 0)`` for a
correct answer at ``tau <= t_stop``. The episode return is the
``gamma``-discounted sum over steps. Only the correct label and model scores
are read; nothing about which frames hold the evidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

from .backend import ModelBackend, OptionScores, ScoringUnavailable
from .controller import Trajectory, summary_only_prompt
from .protocol import FinalAnswer, FrameRequest, SummaryState, format_is_valid


class SingleOption(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    alpha: float = 0.1
    beta: float = 1.0
    t_stop: int = 2
    gamma: float = 1.0
    margin_temperature: float = 1.0

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.t_stop < 1:
            raise ValueError("t_stop must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.margin_temperature <= 0:
            raise ValueError("margin_temperature must be positive")


@dataclass(frozen=True)
class StepReward:
    t: int
    action: str  # "frames", "answer" or "invalid"
    m_before: float | None
    m_after: float | None
    r_conf: float
    r_sum: float
    r_stop: float
    r_format: float
    r_total: float

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class RewardTrace:
    steps: list[StepReward] = field(default_factory=list)
    episode_return: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {"steps": [s.to_json() for s in self.steps], "episode_return": self.episode_return}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "RewardTrace":
        return cls([StepReward(**s) for s in data["steps"]], data["episode_return"])


def margin(scores: OptionScores | dict[str, float], correct: str, temperature: float = 1.0) -> float:
    """Correct option's log-probability minus the best competitor's."""
    logps = scores.logprobs if isinstance(scores, OptionScores) else scores
    if len(logps) < 2:
        raise SingleOption("margin needs at least two options")
    if correct not in logps:
        raise KeyError(f"correct label {correct!r} not among scored options")
    best_other = max(v for k, v in logps.items() if k != correct)
    return (logps[correct] - best_other) / temperature


def confidence_gain(m_before: float, m_after: float) -> float:
    return max(m_after - m_before, 0.0)


def sufficiency_from_scores(scores: OptionScores, correct: str) -> float:
    return 1.0 if scores.argmax() == correct else 0.0


def summary_sufficiency(backend: ModelBackend, question: str, options: Sequence[str],
                        final_summary: SummaryState, correct: str, structured: bool = True) -> float:
    """1.0 iff the summary-only prompt makes the correct option the strict argmax."""
    prompt = summary_only_prompt(question, options, final_summary, structured)
    return sufficiency_from_scores(backend.score_options(prompt, [], options), correct)


def stop_reward(answered_correctly: bool, tau: int, weights: RewardWeights) -> float:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if answered_correctly and tau <= weights.t_stop:
        return 1.0 + weights.beta * max(weights.t_stop - tau, 0)
    return 0.0


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    total = 0.0
    scale = 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


def _decision_states(traj: Trajectory, backend: ModelBackend | None) -> dict[int, OptionScores | None]:
    """Scores at the start of each round; a forced-answer prompt counts as state ``t + 1``."""
    out: dict[int, OptionScores | None] = {}
    for rec in traj.rounds:
        if rec.kind == "round" and rec.t not in out:
            key = rec.t
        elif rec.kind == "forced":
            key = rec.t + 1
        else:
            continue
        scores = rec.scores
        if scores is None and backend is not None and rec.prompt and not rec.shown_frames:
            scores = backend.score_options(rec.prompt, [], traj.options)
        out[key] = scores
    return out


def score_trajectory(traj: Trajectory, backend: ModelBackend | None = None,
                     weights: RewardWeights | None = None) -> RewardTrace:
    """Reward every step of ``traj`` from its cached option scores.

    Missing scores are recomputed through ``backend`` only where that needs no
    frames (frame-free prompts, the summary-only re-ask); otherwise
    :class:`ScoringUnavailable` is raised.
    """
    w = weights or RewardWeights()
    if traj.correct_label is None:
        raise ValueError("trajectory has no correct label; nothing to reward against")
    y = traj.correct_label
    states = _decision_states(traj, backend)

    acting: dict[int, Any] = {}
    for rec in traj.rounds:
        if rec.kind in ("round", "reprompt"):
            acting[rec.t] = rec
    final = traj.final_record()

    steps: list[StepReward] = []
    for t in range(1, traj.tau + 1):
        rec = acting.get(t)
        if rec is None and final is not None and final.t == t:
            rec = final
        if rec is None:
            continue
        parsed = rec.parsed
        is_last = t == traj.tau
        kind = "invalid"
        m_before = m_after = None
        r_conf = r_sum = r_stop = 0.0
        if rec.parse_ok and isinstance(parsed.action, FrameRequest):
            kind = "frames"
            # No later decision state (episode cut off) means no measurable gain.
            if t + 1 in states:
                before, after = states.get(t), states[t + 1]
                if before is None or after is None:
                    raise ScoringUnavailable(f"missing option scores around round {t}")
                m_before = margin(before, y, w.margin_temperature)
                m_after = margin(after, y, w.margin_temperature)
                r_conf = confidence_gain(m_before, m_after)
        elif rec.parse_ok:
            kind = "answer"
        if is_last and traj.final_answer is not None and final is not None:
            r_sum = _summary_term(traj, final, backend)
            r_stop = stop_reward(traj.final_answer == y, traj.tau, w)
        r_format = w.alpha * (1.0 if format_is_valid(rec.raw_response, traj.options,
                                                     structured=traj.structured) else 0.0)
        total = w.lambda1 * r_conf + w.lambda2 * r_sum + w.lambda3 * r_stop + r_format
        steps.append(StepReward(t, kind, m_before, m_after, r_conf, r_sum, r_stop, r_format, total))
    dense = [0.0] * traj.tau
    for s in steps:
        dense[s.t - 1] = s.r_total
    return RewardTrace(steps, discounted_return(dense, w.gamma))


def _summary_term(traj: Trajectory, final, backend: ModelBackend | None) -> float:
    if traj.summary_scores is not None:
        return sufficiency_from_scores(traj.summary_scores, traj.correct_label)
    if backend is None:
        raise ScoringUnavailable("no cached summary-only scores and no backend to compute them")
    assert isinstance(final.parsed.action, FinalAnswer)
    return summary_sufficiency(backend, traj.question, traj.options, final.parsed.summary,
                               traj.correct_label, traj.structured)
