"""Multi-round sparse frame selection loop.

Each round the model sees the question, its latest summary, and only the
frames admitted this round; it replies with a new summary plus either a frame
request or an answer. The controller owns every validity rule: parsing,
de-duplication, per-round caps, the token budget, and recovery from bad
replies.
"""
from __future__ import annotations

import hashlib
import logging
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence, Union

from .backend import (FORCED_MARKER, REMINDER_MARKER, BackendError, ModelBackend, OptionScores,
                      SamplingParams)
from .protocol import (FIELD_LABELS, AgentResponse, FinalAnswer, FrameRequest, ParseError,
                       SummaryState, option_labels, parse_response)
from .state import (CostModel, EpisodeState, bytes_over_four, commit_summary, extend_frames,
                    filter_request, within_budget)
from .video import VideoSource

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeConfig:
    max_rounds: int = 4
    max_frames_per_round: int = 3
    token_budget: int = 8192
    initial_frame_count: int | None = None  # None: same as max_frames_per_round
    retry_on_invalid: int = 1
    temperature: float = 0.2
    top_p: float = 0.9
    max_response_tokens: int = 256
    force_answer_at_end: bool = True
    per_frame_cost: int = 256
    carry_state: bool = True
    structured_summary: bool = True
    record_scores: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.max_frames_per_round < 1:
            raise ValueError("max_frames_per_round must be >= 1")
        if self.initial_frame_count is not None and not \
                1 <= self.initial_frame_count <= self.max_frames_per_round:
            raise ValueError("initial_frame_count must be in [1, max_frames_per_round]")
        if self.retry_on_invalid < 0:
            raise ValueError("retry_on_invalid must be >= 0")
        if self.token_budget < 1 or self.per_frame_cost < 1:
            raise ValueError("token_budget and per_frame_cost must be positive")

    @property
    def initial_frames(self) -> int:
        return self.initial_frame_count or self.max_frames_per_round

    @property
    def sampling(self) -> SamplingParams:
        return SamplingParams(self.temperature, self.top_p, self.max_response_tokens)

    @property
    def name(self) -> str:
        return f"{self.max_rounds:02d}_{self.max_frames_per_round:02d}"


# -- prompts ---------------------------------------------------------------------

GUIDELINES_STRUCTURED = """\
You are answering a multiple-choice question about a video. You only see a few
frames at a time and may ask for more. Reply in exactly one of two forms, with
no text outside the tags:

<summary>
P: <what you have already inspected>
O: <what you observe now>
H: <how the observations update your hypothesis; do not state the answer letter>
U: <what remains uncertain>
R: <which frames to look at next and why, or that the question is answered>
</summary>
<frames>i1,i2,...</frames>

or the same <summary> followed by <answer>LETTER</answer>.
Frame indices are 0-based. The summary is the only memory you keep between rounds.

"""

GUIDELINES_FREE = """\
You are answering a multiple-choice question about a video. You only see a few
frames at a time and may ask for more. Reply with <summary>free text</summary>
followed by either <frames>i1,i2,...</frames> or <answer>LETTER</answer>, with no
text outside the tags. Frame indices are 0-based.

"""

DEFAULT_TEMPLATE = """\
${guidelines}Round ${round} of ${max_rounds}.
Question: ${question}
Options:
${options}
Video: ${video_meta}
${summary_header}
${summary}
Frames shown this round:
${frames}
${rounds_notice}${notice}"""

STRUCTURED_HEADER = "Current summary (P/O/H/U/R):"
FREE_HEADER = "Current summary (free text):"


@dataclass(frozen=True)
class PromptTemplate:
    """``string.Template`` text with the placeholders of :data:`DEFAULT_TEMPLATE`."""

    text: str = DEFAULT_TEMPLATE

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        text = Path(path).read_text(encoding="utf-8")
        string.Template(text).substitute(_dummy_fields())  # fail early on unknown placeholders
        return cls(text)

    def render(self, **fields: Any) -> str:
        return string.Template(self.text).substitute(fields)


def _dummy_fields() -> dict[str, str]:
    return {k: "" for k in ("guidelines", "round", "max_rounds", "question", "options",
                            "video_meta", "summary_header", "summary", "frames",
                            "rounds_notice", "notice")}


@dataclass(frozen=True)
class VideoMeta:
    length: int
    fps: float

    def describe(self) -> str:
        return f"{self.length} frames total at {self.fps:g} fps ({self.length / self.fps:.2f}s)"


def format_options(options: Sequence[str]) -> str:
    return "\n".join(f"{lab}. {opt}" for lab, opt in zip(option_labels(options), options))


def render_summary(summary: SummaryState, structured: bool) -> str:
    if structured:
        return summary.to_text().rstrip("\n")
    return summary.observations or "(empty)"


def build_prompt(question: str, options: Sequence[str], state: EpisodeState,
                 shown_frames: Sequence[int], video_meta: VideoMeta, first_round: bool, *,
                 round_no: int = 1, max_rounds: int = 1, carry_state: bool = True,
                 structured: bool = True, notice: str = "", frame_cap: int | None = None,
                 template: PromptTemplate | None = None) -> str:
    """Deterministic prompt text for one round.

    Only ``state.latest_summary`` is read: earlier summaries are subsumed by it.
    """
    summary = state.latest_summary if carry_state else SummaryState()
    frames = "\n".join(f"Frame {i} @ {i / video_meta.fps:.2f}s" for i in shown_frames)
    left = max_rounds - round_no
    if left > 0:
        rounds_notice = f"{left} more round(s) available after this one."
        if frame_cap is not None:
            rounds_notice += f" Request at most {frame_cap} frame(s) per round."
    else:
        rounds_notice = "This is the final round: answer now."
    return (template or PromptTemplate()).render(
        guidelines=(GUIDELINES_STRUCTURED if structured else GUIDELINES_FREE) if first_round else "",
        round=round_no,
        max_rounds=max_rounds,
        question=question,
        options=format_options(options),
        video_meta=video_meta.describe(),
        summary_header=STRUCTURED_HEADER if structured else FREE_HEADER,
        summary=render_summary(summary, structured),
        frames=frames or "(no new frames)",
        rounds_notice=rounds_notice,
        notice=("\n" + notice) if notice else "",
    )


def summary_only_prompt(question: str, options: Sequence[str], summary: SummaryState,
                        structured: bool = True) -> str:
    """Frame-free prompt used to check whether a summary alone supports the answer."""
    header = STRUCTURED_HEADER if structured else FREE_HEADER
    return (f"Question: {question}\nOptions:\n{format_options(options)}\n"
            f"{header}\n{render_summary(summary, structured)}\n"
            "Answer using only the summary above.")


def format_reminder(error: ParseError) -> str:
    return (f"{REMINDER_MARKER} your previous reply was rejected ({error.kind.value}: "
            f"{error.message}). Reply with <summary> followed by exactly one of "
            "<frames>...</frames> or <answer>...</answer>, and nothing else.")


def rejection_notice(rejected: Sequence[tuple[int, str]]) -> str:
    if not rejected:
        return ""
    detail = "; ".join(f"{i}: {why}" for i, why in rejected)
    return f"Some requested frames were not admitted ({detail})."


def sample_initial_frames(video_length: int, n: int, seed: int | None = None) -> list[int]:
    """Evenly spaced indices including both endpoints (the midpoint when n == 1).

    ``seed`` is accepted for interface symmetry; the spacing is deterministic.
    """
    if not 1 <= n <= video_length:
        raise ValueError(f"need 1 <= n <= video_length, got n={n}, L={video_length}")
    if n == 1:
        return [(video_length - 1) // 2]
    return [j * (video_length - 1) // (n - 1) for j in range(n)]


# -- trajectories ----------------------------------------------------------------

@dataclass
class RoundRecord:
    t: int
    kind: str  # "round", "reprompt" or "forced"
    prompt: str
    shown_frames: tuple[int, ...]
    timestamps: tuple[float, ...]
    raw_response: str
    parsed: AgentResponse | ParseError
    visual_cost: int
    prompt_tokens: int
    scores: OptionScores | None = None
    rejected: tuple[tuple[int, str], ...] = ()

    @property
    def parse_ok(self) -> bool:
        return isinstance(self.parsed, AgentResponse)

    def to_json(self, include_prompt: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "t": self.t,
            "kind": self.kind,
            "prompt_hash": hashlib.sha256(self.prompt.encode("utf-8", "surrogateescape")).hexdigest()[:16],
            "frames": list(self.shown_frames),
            "timestamps": list(self.timestamps),
            "raw_response": self.raw_response,
            "action": action_json(self.parsed),
            "parse_ok": self.parse_ok,
            "visual_cost": self.visual_cost,
            "prompt_tokens": self.prompt_tokens,
        }
        if isinstance(self.parsed, ParseError):
            out["error"] = {"kind": self.parsed.kind.value, "span": list(self.parsed.span),
                            "message": self.parsed.message}
        else:
            out["summary"] = dict(zip(FIELD_LABELS, self.parsed.summary.values()))
        if self.scores is not None:
            out["scores"] = self.scores.to_json()
        if self.rejected:
            out["rejected"] = [list(r) for r in self.rejected]
        if include_prompt:
            out["prompt"] = self.prompt
        return out


def action_json(parsed: AgentResponse | ParseError) -> dict[str, Any] | None:
    if isinstance(parsed, ParseError):
        return None
    if isinstance(parsed.action, FrameRequest):
        return {"type": "frames", "indices": list(parsed.action.indices)}
    return {"type": "answer", "label": parsed.action.label}


@dataclass
class Trajectory:
    id: str | None
    question: str
    options: tuple[str, ...]
    max_rounds: int
    correct_label: str | None = None
    structured: bool = True
    rounds: list[RoundRecord] = field(default_factory=list)
    tau: int = 0
    final_answer: str | None = None
    forced: bool = False
    failure: str | None = None
    admitted_frames: tuple[int, ...] = ()
    wall_ms: float = 0.0
    summary_scores: OptionScores | None = None
    category: str | None = None
    reward: Any = None  # RewardTrace once scored

    @property
    def correct(self) -> bool | None:
        if self.correct_label is None:
            return None
        return self.final_answer == self.correct_label

    @property
    def frames_used(self) -> int:
        return len(self.admitted_frames)

    @property
    def prompt_tokens(self) -> int:
        return sum(r.prompt_tokens for r in self.rounds)

    def final_record(self) -> RoundRecord | None:
        for rec in reversed(self.rounds):
            if rec.parse_ok and isinstance(rec.parsed.action, FinalAnswer):
                return rec
        return None

    def to_json(self, include_prompts: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "question": self.question,
            "options": list(self.options),
            "rounds": [r.to_json(include_prompts) for r in self.rounds],
            "tau": self.tau,
            "answer": self.final_answer,
            "correct_label": self.correct_label,
            "correct": self.correct,
            "forced": self.forced,
            "failure": self.failure,
            "frames_used": self.frames_used,
            "admitted_frames": list(self.admitted_frames),
            "prompt_tokens": self.prompt_tokens,
            "wall_ms": round(self.wall_ms, 3),
            "max_rounds": self.max_rounds,
            "structured": self.structured,
            "category": self.category,
        }
        if self.summary_scores is not None:
            out["summary_scores"] = self.summary_scores.to_json()
        if self.reward is not None:
            out["reward"] = self.reward.to_json()
        return out

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Trajectory":
        options = tuple(data["options"])
        structured = data.get("structured", True)
        traj = cls(
            id=data.get("id"), question=data["question"], options=options,
            max_rounds=data.get("max_rounds", 0), correct_label=data.get("correct_label"),
            structured=structured, tau=data["tau"], final_answer=data.get("answer"),
            forced=data.get("forced", False), failure=data.get("failure"),
            admitted_frames=tuple(data.get("admitted_frames", ())),
            wall_ms=data.get("wall_ms", 0.0), category=data.get("category"),
        )
        if data.get("summary_scores"):
            traj.summary_scores = OptionScores.from_json(data["summary_scores"])
        for r in data["rounds"]:
            traj.rounds.append(RoundRecord(
                t=r["t"], kind=r["kind"], prompt=r.get("prompt", ""),
                shown_frames=tuple(r["frames"]), timestamps=tuple(r.get("timestamps", ())),
                raw_response=r["raw_response"],
                parsed=parse_response(r["raw_response"], options, structured=structured),
                visual_cost=r.get("visual_cost", 0), prompt_tokens=r.get("prompt_tokens", 0),
                scores=OptionScores.from_json(r["scores"]) if r.get("scores") else None,
                rejected=tuple(tuple(x) for x in r.get("rejected", ())),
            ))
        return traj


class EpisodeFailed(BackendError):
    """A backend error with the partial trajectory attached."""

    def __init__(self, cause: BackendError, trajectory: Trajectory):
        super().__init__(f"{cause.kind}: {cause}")
        self.cause = cause
        self.kind = cause.kind
        self.trajectory = trajectory


# -- the loop --------------------------------------------------------------------

class _Episode:
    def __init__(self, video: VideoSource, question: str, options: Sequence[str],
                 backend: ModelBackend, config: EpisodeConfig, template: PromptTemplate | None,
                 traj: Trajectory, text_cost: Callable[[str], int]):
        self.video = video
        self.meta = VideoMeta(video.length, video.fps)
        self.question = question
        self.options = tuple(options)
        self.backend = backend
        self.cfg = config
        self.template = template
        self.traj = traj
        self.state = EpisodeState(question, self.options,
                                  cost_model=CostModel(config.per_frame_cost, text_cost))

    def prompt(self, state: EpisodeState, shown: Sequence[int], t: int, notice: str = "") -> str:
        return build_prompt(self.question, self.options, state, shown, self.meta, t == 1,
                            round_no=t, max_rounds=self.cfg.max_rounds,
                            carry_state=self.cfg.carry_state,
                            structured=self.cfg.structured_summary, notice=notice,
                            frame_cap=self.cfg.max_frames_per_round, template=self.template)

    def ask(self, t: int, kind: str, prompt: str, shown: Sequence[int],
            rejected: Sequence[tuple[int, str]] = ()) -> RoundRecord:
        frames = [self.video.frame_at(i) for i in shown]
        scores = None
        if self.cfg.record_scores and kind != "reprompt":
            scores = self.backend.score_options(prompt, frames, self.options)
        raw = self.backend.generate(prompt, frames, self.cfg.sampling)
        rec = RoundRecord(
            t=t, kind=kind, prompt=prompt, shown_frames=tuple(shown),
            timestamps=tuple(f.timestamp for f in frames), raw_response=raw,
            parsed=parse_response(raw, self.options, structured=self.cfg.structured_summary),
            visual_cost=self.state.cumulative_visual_cost,
            prompt_tokens=self.state.cost_model.text_cost(prompt),
            scores=scores, rejected=tuple(rejected),
        )
        self.traj.rounds.append(rec)
        return rec

    def finish(self, t: int, answer: FinalAnswer, forced: bool = False) -> None:
        self.traj.tau = t
        self.traj.final_answer = answer.label
        self.traj.forced = forced

    def force_answer(self, t: int, reason: str) -> None:
        if not self.cfg.force_answer_at_end:
            self.traj.tau = t
            self.traj.failure = reason
            return
        prompt = self.prompt(self.state, (), t, notice=FORCED_MARKER)
        if not within_budget(self.state, prompt, self.cfg.token_budget):
            self.traj.tau = t
            self.traj.failure = "budget_exhausted"
            return
        rec = self.ask(t, "forced", prompt, ())
        if rec.parse_ok and isinstance(rec.parsed.action, FinalAnswer):
            self.finish(t, rec.parsed.action, forced=True)
        else:
            self.traj.tau = t
            self.traj.failure = reason if reason == "protocol" else "forced_answer_invalid"

    def run(self) -> None:
        cfg = self.cfg
        L = self.video.length
        pending = sample_initial_frames(L, min(cfg.initial_frames, L))
        pending_rejected: list[tuple[int, str]] = []
        notice = ""
        for t in range(1, cfg.max_rounds + 1):
            self.state = replace(self.state, round_index=t)
            keep, rejected = filter_request(self.state, pending, L, cfg.max_frames_per_round)
            rejected = pending_rejected + rejected
            # Largest prefix of the admissible frames that keeps the prompt in budget.
            chosen = None
            for n in range(len(keep), -1, -1):
                trial = extend_frames(self.state, keep[:n])
                extra = rejection_notice(rejected + [(i, "over token budget") for i in keep[n:]])
                prompt = self.prompt(trial, keep[:n], t, notice="\n".join(x for x in (notice, extra) if x))
                if within_budget(trial, prompt, cfg.token_budget):
                    chosen = n
                    break
            if chosen is None:
                self.traj.tau = t - 1
                self.traj.failure = "budget_exhausted"
                return
            if chosen == 0 and keep:
                self.force_answer(t, "budget_exhausted")
                return
            self.state = trial
            shown = keep[:chosen]
            rejected = rejected + [(i, "over token budget") for i in keep[chosen:]]
            rec = self.ask(t, "round", prompt, shown, rejected)
            retries = 0
            while not rec.parse_ok and retries < cfg.retry_on_invalid:
                retries += 1
                reprompt = prompt + "\n" + format_reminder(rec.parsed)
                if not within_budget(self.state, reprompt, cfg.token_budget):
                    break
                rec = self.ask(t, "reprompt", reprompt, shown)
            if not rec.parse_ok:
                self.force_answer(t, "protocol")
                return
            response = rec.parsed
            if isinstance(response.action, FinalAnswer):
                self.finish(t, response.action)
                return
            self.state = commit_summary(self.state, response.summary)
            if t == cfg.max_rounds:
                self.force_answer(t, "no_answer")
                return
            pending = list(response.action.indices)
            pending_rejected = []
            notice = ""
            kept, rej = filter_request(self.state, pending, L, cfg.max_frames_per_round)
            if not kept:
                notice = "No new frames were admitted this round."
                pending_rejected = list(rej)
                pending = []


def run_episode(video: VideoSource, question: str, options: Sequence[str],
                backend: ModelBackend, config: EpisodeConfig | None = None, *,
                item_id: str | None = None, correct: str | None = None,
                category: str | None = None, template: PromptTemplate | None = None,
                text_cost: Callable[[str], int] = bytes_over_four) -> Trajectory:
    """Run one episode and return its full trajectory.

    Backend failures propagate as :class:`EpisodeFailed` carrying the partial
    trajectory.
    """
    cfg = config or EpisodeConfig()
    if video.length < 1:
        raise ValueError("video must contain at least one frame")
    option_labels(options)
    traj = Trajectory(item_id, question, tuple(options), cfg.max_rounds, correct,
                      cfg.structured_summary, category=category)
    episode = _Episode(video, question, options, backend, cfg, template, traj, text_cost)
    t0 = time.perf_counter()
    try:
        episode.run()
        final = traj.final_record()
        if cfg.record_scores and final is not None and traj.final_answer is not None:
            prompt = summary_only_prompt(question, options, final.parsed.summary,
                                         cfg.structured_summary)
            traj.summary_scores = backend.score_options(prompt, [], options)
    except BackendError as exc:
        traj.admitted_frames = episode.state.admitted_frames
        traj.wall_ms = (time.perf_counter() - t0) * 1000
        raise EpisodeFailed(exc, traj) from exc
    traj.admitted_frames = episode.state.admitted_frames
    traj.wall_ms = (time.perf_counter() - t0) * 1000
    return traj


# -- batches ---------------------------------------------------------------------

@dataclass
class QAItem:
    id: str
    video: Union[VideoSource, Callable[[], VideoSource]]
    question: str
    options: tuple[str, ...]
    answer: str | None = None
    category: str | None = None

    def open_video(self) -> VideoSource:
        return self.video() if callable(self.video) else self.video


@dataclass
class ItemError:
    id: str
    kind: str  # "backend", "data" or "protocol"
    message: str
    trajectory: Trajectory | None = None

    def to_json(self) -> dict[str, Any]:
        out = {"id": self.id, "error": {"kind": self.kind, "message": self.message}}
        if self.trajectory is not None:
            out["partial"] = self.trajectory.to_json()
        return out


def _run_item(item: QAItem, backend: ModelBackend, config: EpisodeConfig,
              template: PromptTemplate | None) -> Trajectory | ItemError:
    try:
        video = item.open_video()
    except Exception as exc:  # noqa: BLE001 - any loader failure is a data error for this item
        return ItemError(item.id, "data", f"{type(exc).__name__}: {exc}")
    try:
        return run_episode(video, item.question, item.options, backend, config, item_id=item.id,
                           correct=item.answer, category=item.category, template=template)
    except EpisodeFailed as exc:
        return ItemError(item.id, "backend", str(exc), exc.trajectory)
    except BackendError as exc:
        return ItemError(item.id, "backend", f"{exc.kind}: {exc}")


def run_batch(items: Sequence[QAItem], backend: ModelBackend, config: EpisodeConfig | None = None,
              parallelism: int = 1,
              template: PromptTemplate | None = None) -> list[Trajectory | ItemError]:
    """Run independent episodes, preserving input order in the result."""
    cfg = config or EpisodeConfig()
    if parallelism <= 1 or len(items) <= 1:
        return [_run_item(item, backend, cfg, template) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda it: _run_item(it, backend, cfg, template), items))
