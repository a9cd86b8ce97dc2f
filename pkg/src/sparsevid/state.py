"""Episode state carried between rounds: committed summaries, admitted frames,
and the visual + text token budget."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .protocol import SummaryState

DEFAULT_FRAME_COST = 256


def bytes_over_four(text: str) -> int:
    return math.ceil(len(text.encode("utf-8", "surrogateescape")) / 4)


@dataclass(frozen=True)
class CostModel:
    per_frame_cost: int = DEFAULT_FRAME_COST
    text_cost: Callable[[str], int] = bytes_over_four

    def __post_init__(self) -> None:
        if self.per_frame_cost <= 0:
            raise ValueError("per_frame_cost must be positive")

    def visual_cost(self, frames: Iterable[int]) -> int:
        return self.per_frame_cost * sum(1 for _ in frames)


class EmptyAfterFiltering(Exception):
    """Every requested index was out of range or already admitted."""

    def __init__(self, rejected: Sequence[tuple[int, str]]):
        self.rejected = tuple(rejected)
        detail = ", ".join(f"{i} ({why})" for i, why in self.rejected) or "empty request"
        super().__init__(f"no admissible frames in request: {detail}")


@dataclass(frozen=True)
class EpisodeState:
    question: str
    options: tuple[str, ...]
    round_index: int = 0
    committed_summaries: tuple[SummaryState, ...] = ()
    admitted_frames: tuple[int, ...] = ()
    cumulative_visual_cost: int = 0
    cost_model: CostModel = field(default_factory=CostModel)

    @property
    def latest_summary(self) -> SummaryState:
        # The committed summary is cumulative, so the newest one is all a prompt needs.
        return self.committed_summaries[-1] if self.committed_summaries else SummaryState()


def filter_request(state: EpisodeState, request: Sequence[int], video_length: int,
                   cap: int) -> tuple[list[int], list[tuple[int, str]]]:
    """Split a request into admissible indices (first-come, capped) and rejections."""
    seen = set(state.admitted_frames)
    keep: list[int] = []
    rejected: list[tuple[int, str]] = []
    for i in request:
        if not 0 <= i < video_length:
            rejected.append((i, "out of range"))
        elif i in seen:
            rejected.append((i, "already seen"))
        elif len(keep) >= cap:
            rejected.append((i, "over per-round cap"))
        else:
            keep.append(i)
            seen.add(i)
    return keep, rejected


def admit_frames(state: EpisodeState, request: Sequence[int], video_length: int,
                 cap: int) -> tuple[EpisodeState, tuple[int, ...]]:
    """Admit the in-range, unseen part of ``request`` (at most ``cap`` indices).

    Raises :class:`EmptyAfterFiltering` when nothing survives.
    """
    if len(set(request)) != len(request):
        raise ValueError("request indices must be distinct")
    keep, rejected = filter_request(state, request, video_length, cap)
    if not keep:
        raise EmptyAfterFiltering(rejected)
    return extend_frames(state, keep), tuple(keep)


def extend_frames(state: EpisodeState, frames: Sequence[int]) -> EpisodeState:
    admitted = state.admitted_frames + tuple(frames)
    return replace(state, admitted_frames=admitted,
                   cumulative_visual_cost=state.cost_model.visual_cost(admitted))


def commit_summary(state: EpisodeState, summary: SummaryState) -> EpisodeState:
    return replace(state, committed_summaries=state.committed_summaries + (summary,))


def within_budget(state: EpisodeState, next_prompt: str, token_budget: int) -> bool:
    return state.cumulative_visual_cost + state.cost_model.text_cost(next_prompt) <= token_budget
