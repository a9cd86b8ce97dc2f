"""Backend interface, option scoring, and deterministic scripted backends."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from .protocol import (AgentResponse, FinalAnswer, option_labels, parse_response_lenient,
                       resolve_answer)
from .video import Frame


class BackendError(Exception):
    """Base class for failures talking to a model."""

    kind = "BackendError"


class AuthError(BackendError):
    kind = "AuthError"


class RateLimited(BackendError):
    kind = "RateLimited"


class Timeout(BackendError):
    kind = "Timeout"


class ServerError(BackendError):
    kind = "ServerError"


class MalformedReply(BackendError):
    kind = "MalformedReply"


class ScoringUnavailable(BackendError):
    kind = "ScoringUnavailable"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 256


@dataclass(frozen=True)
class OptionScores:
    """Log-probability per option label, plus how it was obtained."""

    logprobs: Mapping[str, float]
    path: str = "scripted"

    def __post_init__(self) -> None:
        object.__setattr__(self, "logprobs", dict(self.logprobs))
        for k, v in self.logprobs.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite score for option {k}: {v}")

    def __getitem__(self, label: str) -> float:
        return self.logprobs[label]

    def labels(self) -> list[str]:
        return list(self.logprobs)

    def argmax(self) -> str | None:
        """Best label, or None when the top score is tied."""
        best = max(self.logprobs.values())
        top = [k for k, v in self.logprobs.items() if v == best]
        return top[0] if len(top) == 1 else None

    def to_json(self) -> dict:
        return {"logprobs": dict(self.logprobs), "path": self.path}

    @classmethod
    def from_json(cls, data: dict) -> "OptionScores":
        return cls({k: float(v) for k, v in data["logprobs"].items()}, data.get("path", "scripted"))


class ModelBackend(Protocol):
    def generate(self, prompt: str, images: Sequence[Frame], params: SamplingParams) -> str: ...

    def score_options(self, prompt: str, images: Sequence[Frame],
                      options: Sequence[str]) -> OptionScores: ...


ANSWER_ONLY_SUFFIX = "\n\nReply with the letter of the correct option only."


def log_softmax(logits: Mapping[str, float]) -> dict[str, float]:
    top = max(logits.values())
    z = top + math.log(sum(math.exp(v - top) for v in logits.values()))
    return {k: v - z for k, v in logits.items()}


def laplace_logprobs(answers: Sequence[str], labels: Sequence[str]) -> dict[str, float]:
    """log((count + 1) / (n + |labels|)) over the parseable answers."""
    counts = Counter(a for a in answers if a in labels)
    n = sum(counts.values())
    return {lab: math.log((counts[lab] + 1) / (n + len(labels))) for lab in labels}


def score_options_via_logprobs(backend, prompt: str, images: Sequence[Frame],
                               options: Sequence[str], *, samples: int = 8,
                               allow_sampling: bool = True) -> OptionScores:
    """Score every option, preferring first-token log-probabilities.

    Backends exposing ``first_token_logprobs(prompt, images)`` are read
    directly; otherwise (or when an option is missing there) ``samples``
    answer-only generations are drawn and turned into Laplace-smoothed
    log-frequencies.
    """
    labels = option_labels(options)
    answer_prompt = prompt + ANSWER_ONLY_SUFFIX
    first = getattr(backend, "first_token_logprobs", None)
    if first is not None:
        top = first(answer_prompt, images)
        if all(lab in top for lab in labels):
            return OptionScores({lab: float(top[lab]) for lab in labels}, "logprobs")
        if not allow_sampling:
            missing = [lab for lab in labels if lab not in top]
            raise ScoringUnavailable(f"no log-probability for option(s) {missing}")
    if not allow_sampling or samples <= 0:
        raise ScoringUnavailable("backend exposes no log-probabilities and sampling is disabled")
    params = SamplingParams(temperature=1.0, top_p=1.0, max_tokens=8)
    answers = []
    for _ in range(samples):
        raw = backend.generate(answer_prompt, images, params)
        label = resolve_answer(raw, options)
        if label is None:
            parsed = parse_response_lenient(raw, options)
            if isinstance(parsed, AgentResponse) and isinstance(parsed.action, FinalAnswer):
                label = parsed.action.label
        if label is None:
            m = re.match(r"\s*\(?([A-Za-z])\b", raw)
            label = m.group(1).upper() if m else None
        answers.append(label)
    return OptionScores(laplace_logprobs([a for a in answers if a], labels), "sampling")


# -- scripted backends -----------------------------------------------------------

_ROUND_RE = re.compile(r"Round (\d+) of (\d+)\.")
FORCED_MARKER = "You must now answer; frame requests are not permitted."
REMINDER_MARKER = "Format reminder:"


def prompt_round(prompt: str) -> tuple[int, int] | None:
    m = _ROUND_RE.search(prompt)
    return (int(m.group(1)), int(m.group(2))) if m else None


Responder = Callable[[str, Sequence[Frame]], str]
Scorer = Callable[[str, Sequence[Frame], Sequence[str]], Mapping[str, float]]


@dataclass
class ScriptedBackend:
    """A pure function of (prompt, frames): same inputs, same bytes out.

    ``respond`` produces the raw reply and ``logits`` the per-option logits;
    :meth:`from_rounds` builds one that looks up replies by round number.
    """

    respond: Responder
    logits: Scorer | None = None

    def generate(self, prompt: str, images: Sequence[Frame], params: SamplingParams) -> str:
        return self.respond(prompt, images)

    def first_token_logprobs(self, prompt: str, images: Sequence[Frame]) -> dict[str, float]:
        if self.logits is None:
            return {}
        return dict(self.logits(prompt, images, ()))

    def score_options(self, prompt: str, images: Sequence[Frame],
                      options: Sequence[str]) -> OptionScores:
        if self.logits is None:
            raise ScoringUnavailable("scripted backend has no scoring rule")
        raw = self.logits(prompt, images, options)
        labels = option_labels(options)
        if set(raw) != set(labels):
            raise ScoringUnavailable(f"scripted scores cover {sorted(raw)}, options are {labels}")
        return OptionScores({lab: float(raw[lab]) for lab in labels}, "scripted")

    @classmethod
    def from_rounds(cls, replies: Sequence[str] | Mapping[int, str], *,
                    forced: str | None = None, reprompt: str | None = None,
                    logits: Mapping[str, float] | Scorer | None = None) -> "ScriptedBackend":
        table = dict(enumerate(replies, start=1)) if not isinstance(replies, Mapping) else dict(replies)

        def respond(prompt: str, images: Sequence[Frame]) -> str:
            if forced is not None and FORCED_MARKER in prompt:
                return forced
            if reprompt is not None and REMINDER_MARKER in prompt:
                return reprompt
            r = prompt_round(prompt)
            t = r[0] if r else 1
            return table.get(t, table[max(table)])

        scorer: Scorer | None
        if logits is None or callable(logits):
            scorer = logits
        else:
            fixed = dict(logits)
            scorer = lambda prompt, images, options: fixed  # noqa: E731
        return cls(respond, scorer)


@dataclass
class RecordingBackend:
    """Wraps a backend and keeps every prompt it was sent (tests, debugging)."""

    inner: ModelBackend
    prompts: list[str] = field(default_factory=list)

    def generate(self, prompt, images, params):
        self.prompts.append(prompt)
        return self.inner.generate(prompt, images, params)

    def score_options(self, prompt, images, options):
        return self.inner.score_options(prompt, images, options)
