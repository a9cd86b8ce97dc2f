"""Structured response format exchanged with the answering model.

Every reply is a ``<summary>`` block followed by exactly one action tag:
``<frames>`` (ask for more frames) or ``<answer>`` (commit to an option).
The strict parser below is the referee used by the controller and the reward;
:func:`parse_response_lenient` is a forgiving variant for weak backends.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

FIELD_LABELS = ("P", "O", "H", "U", "R")
MAX_INDEX_DIGITS = 12

_TAG_RE = re.compile(r"<(/?)(summary|frames|answer)>")
_TAG_RE_CI = re.compile(r"<\s*(/?)\s*(summary|frames|answer)\s*>", re.IGNORECASE)
_INDEX_LIST_RE = re.compile(r"\s*\d+\s*(?:,\s*\d+\s*)*")
_LENIENT_LABEL_RE = re.compile(r"^\s*([POHUR])\b[^:\n]{0,40}:\s?(.*)$", re.IGNORECASE)


@dataclass(frozen=True)
class SummaryState:
    previously_seen: str = ""
    observations: str = ""
    hypotheses: str = ""
    uncertainties: str = ""
    reasons: str = ""

    def values(self) -> tuple[str, str, str, str, str]:
        return (self.previously_seen, self.observations, self.hypotheses,
                self.uncertainties, self.reasons)

    def to_text(self) -> str:
        """Five ``X: value`` lines in P, O, H, U, R order."""
        return "".join(f"{label}: {_one_line(v)}\n" for label, v in zip(FIELD_LABELS, self.values()))

    @classmethod
    def free_text(cls, text: str) -> "SummaryState":
        # Unstructured summaries keep the whole blob in the observations slot.
        return cls(observations=text.strip())

    def is_empty(self) -> bool:
        return not any(self.values())


@dataclass(frozen=True)
class FrameRequest:
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("frame indices must be distinct")
        if any(i < 0 for i in self.indices):
            raise ValueError("frame indices must be non-negative")


@dataclass(frozen=True)
class FinalAnswer:
    label: str
    free_text: str = ""

    @property
    def text(self) -> str:
        return self.free_text or self.label


Action = Union[FrameRequest, FinalAnswer]


@dataclass(frozen=True)
class AgentResponse:
    summary: SummaryState
    action: Action

    @property
    def is_answer(self) -> bool:
        return isinstance(self.action, FinalAnswer)


class ParseErrorKind(str, Enum):
    MISSING_SUMMARY = "MissingSummary"
    MISSING_ACTION = "MissingAction"
    BOTH_ACTIONS = "BothActions"
    MALFORMED_FIELD = "MalformedField"
    MALFORMED_INDEX_LIST = "MalformedIndexList"
    TRAILING_CONTENT = "TrailingContent"


@dataclass(frozen=True)
class ParseError:
    kind: ParseErrorKind
    span: tuple[int, int]
    message: str

    def __str__(self) -> str:
        return f"{self.kind.value} at bytes {self.span[0]}-{self.span[1]}: {self.message}"


# -- answer set ----------------------------------------------------------------

def option_labels(options: Sequence[str]) -> list[str]:
    if not options:
        raise ValueError("answer set must be non-empty")
    if len(options) > 26:
        raise ValueError("at most 26 options are supported")
    return list(string.ascii_uppercase[: len(options)])


def resolve_answer(text: str, options: Sequence[str]) -> str | None:
    """Map answer text to an option label: a bare label or the exact option text."""
    labels = option_labels(options)
    cleaned = text.strip()
    if cleaned.upper() in labels and len(cleaned) == 1:
        return cleaned.upper()
    folded = cleaned.casefold()
    for label, option in zip(labels, options):
        if option.strip().casefold() == folded:
            return label
    return None


# -- strict parser -------------------------------------------------------------

def _one_line(value: str) -> str:
    return " ".join(value.splitlines()).strip()


class _Doc:
    """Character/byte offset bookkeeping for one raw reply."""

    def __init__(self, raw: str):
        self.raw = raw

    def byte_span(self, start: int, end: int) -> tuple[int, int]:
        enc = lambda s: len(s.encode("utf-8", "surrogateescape"))  # noqa: E731
        b0 = enc(self.raw[:start])
        return b0, b0 + enc(self.raw[start:end])

    def error(self, kind: ParseErrorKind, start: int, end: int, message: str) -> ParseError:
        return ParseError(kind, self.byte_span(start, end), message)


def _as_text(raw: str | bytes) -> str:
    if isinstance(raw, bytes):
        return raw.decode("utf-8", "surrogateescape")
    return raw


def _parse_summary_body(doc: _Doc, start: int, end: int) -> SummaryState | ParseError:
    body = doc.raw[start:end]
    lines = body.strip("\n").split("\n") if body.strip() else []
    if len(lines) != len(FIELD_LABELS):
        return doc.error(ParseErrorKind.MALFORMED_FIELD, start, end,
                         f"summary needs {len(FIELD_LABELS)} labeled lines, found {len(lines)}")
    values = []
    for label, line in zip(FIELD_LABELS, lines):
        stripped = line.lstrip()
        if not stripped.startswith(label + ":"):
            return doc.error(ParseErrorKind.MALFORMED_FIELD, start, end,
                             f"expected line starting with '{label}:', got {line[:20]!r}")
        values.append(stripped[len(label) + 1:].strip())
    return SummaryState(*values)


def _parse_index_list(doc: _Doc, start: int, end: int) -> FrameRequest | ParseError:
    body = doc.raw[start:end]
    if not _INDEX_LIST_RE.fullmatch(body):
        return doc.error(ParseErrorKind.MALFORMED_INDEX_LIST, start, end,
                         "frames must be comma-separated non-negative integers")
    parts = [p.strip() for p in body.split(",")]
    if any(len(p) > MAX_INDEX_DIGITS for p in parts):
        return doc.error(ParseErrorKind.MALFORMED_INDEX_LIST, start, end, "frame index too large")
    indices = [int(p) for p in parts]
    if len(set(indices)) != len(indices):
        return doc.error(ParseErrorKind.MALFORMED_INDEX_LIST, start, end, "duplicate frame index")
    return FrameRequest(tuple(indices))


def parse_response(raw: str | bytes, options: Sequence[str], *,
                   structured: bool = True) -> AgentResponse | ParseError:
    """Parse one model reply under the strict grammar.

    Text before ``<summary>`` and between the summary and the action tag is
    tolerated here (``format_is_valid`` rejects it); anything after the
    closing action tag is a ``TrailingContent`` error. Returns the first
    violated rule in document order.
    """
    option_labels(options)
    doc = _Doc(_as_text(raw))
    tags = list(_TAG_RE.finditer(doc.raw))
    n = len(doc.raw)

    if not tags or tags[0].group(1) or tags[0].group(2) != "summary":
        at = tags[0] if tags else None
        return doc.error(ParseErrorKind.MISSING_SUMMARY, at.start() if at else 0,
                         at.end() if at else n, "reply must open with <summary>")
    open_s = tags[0]
    if len(tags) < 2 or tags[1].group(0) != "</summary>":
        at = tags[1] if len(tags) > 1 else None
        return doc.error(ParseErrorKind.MALFORMED_FIELD, open_s.start(), at.end() if at else n,
                         "<summary> is not closed before the next tag")
    close_s = tags[1]
    if structured:
        summary = _parse_summary_body(doc, open_s.end(), close_s.start())
        if isinstance(summary, ParseError):
            return summary
    else:
        summary = SummaryState.free_text(doc.raw[open_s.end():close_s.start()])

    if len(tags) < 3:
        return doc.error(ParseErrorKind.MISSING_ACTION, close_s.end(), n,
                         "expected <frames> or <answer> after the summary")
    open_a = tags[2]
    kind = open_a.group(2)
    if open_a.group(1) or kind == "summary":
        err = ParseErrorKind.MALFORMED_FIELD if kind == "summary" else ParseErrorKind.MISSING_ACTION
        return doc.error(err, open_a.start(), open_a.end(), f"unexpected tag {open_a.group(0)}")
    if len(tags) < 4 or tags[3].group(0) != f"</{kind}>":
        at = tags[3] if len(tags) > 3 else None
        bad = (ParseErrorKind.MALFORMED_INDEX_LIST if kind == "frames"
               else ParseErrorKind.MALFORMED_FIELD)
        return doc.error(bad, open_a.start(), at.end() if at else n, f"<{kind}> is not closed")
    close_a = tags[3]

    if kind == "frames":
        action = _parse_index_list(doc, open_a.end(), close_a.start())
        if isinstance(action, ParseError):
            return action
    else:
        content = doc.raw[open_a.end():close_a.start()]
        label = resolve_answer(content, options)
        if label is None:
            return doc.error(ParseErrorKind.MALFORMED_FIELD, open_a.start(), close_a.end(),
                             f"answer {content.strip()[:40]!r} matches no option")
        free = content.strip()
        action = FinalAnswer(label, "" if free == label else free)

    for extra in tags[4:]:
        other = extra.group(2)
        if other in ("frames", "answer") and other != kind:
            return doc.error(ParseErrorKind.BOTH_ACTIONS, extra.start(), extra.end(),
                             "reply contains both <frames> and <answer>")
    if doc.raw[close_a.end():].strip():
        rest = len(doc.raw) - len(doc.raw[close_a.end():].lstrip())
        return doc.error(ParseErrorKind.TRAILING_CONTENT, rest, n,
                         "content after the closing action tag")
    return AgentResponse(summary, action)


def serialize_response(response: AgentResponse, *, structured: bool = True) -> str:
    if structured:
        body = response.summary.to_text()
    else:
        body = _one_line(response.summary.observations) + "\n"
    out = f"<summary>\n{body}</summary>\n"
    action = response.action
    if isinstance(action, FrameRequest):
        out += "<frames>" + ",".join(str(i) for i in action.indices) + "</frames>"
    else:
        out += f"<answer>{action.text}</answer>"
    return out


def format_is_valid(raw: str | bytes, options: Sequence[str], *, structured: bool = True) -> bool:
    """Strict parse succeeds and nothing but whitespace sits outside the tags."""
    text = _as_text(raw)
    if isinstance(parse_response(text, options, structured=structured), ParseError):
        return False
    tags = list(_TAG_RE.finditer(text))
    if text[: tags[0].start()].strip():
        return False
    return not text[tags[1].end(): tags[2].start()].strip()


# -- lenient parser ------------------------------------------------------------

def _lenient_summary(body: str) -> SummaryState:
    lines = [ln for ln in body.strip().splitlines() if ln.strip()]
    labeled: dict[str, list[str]] = {}
    unlabeled: list[str] = []
    current = None
    for line in lines:
        m = _LENIENT_LABEL_RE.match(line)
        if m:
            current = m.group(1).upper()
            labeled.setdefault(current, []).append(m.group(2).strip())
        elif current is not None:
            labeled[current].append(line.strip())
        else:
            unlabeled.append(line.strip())
    if not labeled:
        # No labels at all: assign lines positionally, overflow joins R.
        slots = unlabeled[:4] + [" ".join(unlabeled[4:])] if len(unlabeled) > 5 else unlabeled
        slots = slots + [""] * (5 - len(slots))
        return SummaryState(*slots)
    values = [" ".join(labeled.get(label, [])) for label in FIELD_LABELS]
    if unlabeled and not values[0]:
        values[0] = " ".join(unlabeled)
    return SummaryState(*values)


def parse_response_lenient(raw: str | bytes, options: Sequence[str]) -> AgentResponse | ParseError:
    """Best-effort parse: case-insensitive tags, unlabeled summary lines,
    missing closing action tag at end of text, ``(B)``/``B.`` answers, and
    trailing chatter are all tolerated.
    """
    option_labels(options)
    doc = _Doc(_as_text(raw))
    text = doc.raw

    def block(name: str) -> tuple[str, int, int] | None:
        opens = [m for m in _TAG_RE_CI.finditer(text) if m.group(2).lower() == name and not m.group(1)]
        if not opens:
            return None
        start = opens[0].end()
        closes = [m for m in _TAG_RE_CI.finditer(text, start) if m.group(2).lower() == name and m.group(1)]
        if closes:
            return text[start:closes[0].start()], opens[0].start(), closes[0].end()
        nxt = _TAG_RE_CI.search(text, start)
        stop = nxt.start() if nxt else len(text)
        return text[start:stop], opens[0].start(), stop

    summary_block = block("summary")
    if summary_block is None:
        return doc.error(ParseErrorKind.MISSING_SUMMARY, 0, len(text), "no <summary> tag")
    summary = _lenient_summary(summary_block[0])
    frames_block = block("frames")
    answer_block = block("answer")
    if frames_block and answer_block:
        return doc.error(ParseErrorKind.BOTH_ACTIONS, min(frames_block[1], answer_block[1]),
                         max(frames_block[2], answer_block[2]), "both <frames> and <answer>")
    if answer_block:
        content = answer_block[0].strip()
        m = re.match(r"^\(?([A-Za-z])\)?(?:[.:)\s]|$)", content)
        label = resolve_answer(content, options)
        if label is None and m:
            label = resolve_answer(m.group(1), options)
        if label is None:
            return doc.error(ParseErrorKind.MALFORMED_FIELD, answer_block[1], answer_block[2],
                             "answer matches no option")
        return AgentResponse(summary, FinalAnswer(label, content))
    if frames_block:
        seen: list[int] = []
        for tok in re.findall(r"\d+", frames_block[0]):
            if len(tok) <= MAX_INDEX_DIGITS and int(tok) not in seen:
                seen.append(int(tok))
        if not seen:
            return doc.error(ParseErrorKind.MALFORMED_INDEX_LIST, frames_block[1], frames_block[2],
                             "no frame indices found")
        return AgentResponse(summary, FrameRequest(tuple(seen)))
    return doc.error(ParseErrorKind.MISSING_ACTION, summary_block[2], len(text), "no action tag")


__all__ = [
    "FIELD_LABELS", "SummaryState", "FrameRequest", "FinalAnswer", "AgentResponse",
    "ParseError", "ParseErrorKind", "option_labels", "resolve_answer", "parse_response",
    "parse_response_lenient", "serialize_response", "format_is_valid",
]
