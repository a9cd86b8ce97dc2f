"""Synthetic video QA tasks and a scripted model that solves them exactly.

A task hides ``k`` clue frames among ``L`` frames. The scripted model knows
where the clues are, but its confidence in the correct option only grows with
the fraction of clues it has actually been shown (or remembers through its
summary). That makes every reward quantity a closed-form function of what the
controller let it see.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
import string
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .backend import (ANSWER_ONLY_SUFFIX, FORCED_MARKER, OptionScores, SamplingParams,
                      log_softmax, prompt_round)
from .controller import FREE_HEADER, STRUCTURED_HEADER
from .protocol import (AgentResponse, FinalAnswer, FrameRequest, SummaryState, option_labels,
                       serialize_response)
from .video import Frame, IndexOutOfRange, write_key_values

FRAME_SIZE = 32
_SYMBOLS = string.ascii_uppercase


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    seed: int
    video_length: int
    fps: float
    evidence_indices: tuple[int, ...]
    options: tuple[str, ...]
    correct: str
    layout: tuple[str, ...]  # one symbolic label per frame

    @property
    def k(self) -> int:
        return len(self.evidence_indices)

    @property
    def question(self) -> str:
        return f"[{self.id}] Which pattern do the hidden clue frames spell out?"

    def is_evidence(self, i: int) -> bool:
        return self.layout[i].startswith("clue")


def generate_task(seed: int, video_length: int, k: int, n_options: int = 4,
                  fps: float = 2.0) -> SyntheticTask:
    """Deterministic task: clue positions drawn without replacement from ``seed``."""
    if video_length < 1:
        raise ValueError("video_length must be >= 1")
    if not 1 <= k <= video_length:
        raise ValueError(f"need 1 <= k <= L, got k={k}, L={video_length}")
    rng = np.random.default_rng(seed)
    evidence = rng.choice(video_length, size=k, replace=False)
    return build_task(seed, video_length, evidence, n_options, fps,
                      f"synth-s{seed}-L{video_length}-k{k}-n{n_options}")


def build_task(seed: int, video_length: int, evidence: Iterable[int], n_options: int = 4,
               fps: float = 2.0, task_id: str | None = None) -> SyntheticTask:
    """Task with the given clue positions; options and scenery still come from ``seed``."""
    ev = tuple(sorted({int(i) for i in evidence}))
    if not ev or not all(0 <= i < video_length for i in ev):
        raise ValueError("evidence must be a non-empty subset of [0, L)")
    if not 2 <= n_options <= 26:
        raise ValueError("n_options must be in [2, 26]")
    if fps <= 0:
        raise ValueError("fps must be positive")
    rng = np.random.default_rng((seed, 1))
    return _assemble(seed, video_length, fps, ev, n_options, rng,
                     task_id or f"synth-s{seed}-L{video_length}-e{'.'.join(map(str, ev))}")


def _assemble(seed: int, L: int, fps: float, evidence: tuple[int, ...], n_options: int,
              rng: np.random.Generator, task_id: str) -> SyntheticTask:
    options: list[str] = []
    while len(options) < n_options:
        code = "".join(rng.choice(list(_SYMBOLS), size=4))
        if code not in options:
            options.append(code)
    labels = option_labels(options)
    correct = labels[int(rng.integers(n_options))]
    answer_code = options[labels.index(correct)]
    slot = {i: j for j, i in enumerate(evidence)}
    layout = []
    for i in range(L):
        if i in slot:
            j = slot[i]
            layout.append(f"clue {j + 1}/{len(evidence)}: {answer_code[j % 4]}")
        else:
            layout.append(f"scene {_SYMBOLS[int(rng.integers(26))].lower()}")
    return SyntheticTask(task_id, seed, L, fps, evidence, tuple(f"pattern {o}" for o in options),
                         correct, tuple(layout))


@lru_cache(maxsize=4096)
def render_frame(label: str, index: int) -> bytes:
    """A 32x32 grayscale PNG: clue frames are bright, and the first row carries
    the label bytes so the content is machine-readable from pixels too."""
    base = 220 if label.startswith("clue") else 40
    pixels = np.full((FRAME_SIZE, FRAME_SIZE), base, dtype=np.uint8)
    raw = label.encode("utf-8")[:FRAME_SIZE]
    pixels[0] = 0
    pixels[0, : len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    pixels[1, :4] = np.frombuffer(index.to_bytes(4, "big"), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_frame_label(data: bytes) -> str:
    pixels = np.asarray(Image.open(io.BytesIO(data)))
    return bytes(pixels[0]).rstrip(b"\x00").decode("utf-8", "replace")


class SyntheticVideo:
    def __init__(self, task: SyntheticTask):
        self.task = task
        self.length = task.video_length
        self.fps = task.fps

    def frame_at(self, i: int) -> Frame:
        if not 0 <= i < self.length:
            raise IndexOutOfRange(f"frame {i} outside [0, {self.length})")
        label = self.task.layout[i]
        return Frame(i, i / self.fps, render_frame(label, i), "image/png", label)


# -- the scripted model ------------------------------------------------------------

@dataclass(frozen=True)
class OracleRules:
    """Confidence curve and stopping rule of the scripted model.

    The correct option's logit is ``base_logit + gain * g * f`` where ``f`` is
    the fraction of clues known and ``g`` is 1 for structured summaries and
    ``unstructured_gain`` for a free-text one; distractors sit at 0.
    """

    threshold: float = 1.0
    base_logit: float = -1.0
    gain: float = 3.0
    unstructured_gain: float = 0.6
    noise: float = 0.0
    default_cap: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.gain < 0 or self.unstructured_gain < 0:
            raise ValueError("gains must be non-negative so confidence never drops with evidence")

    def logits(self, task: SyntheticTask, f: float, structured: bool = True,
               salt: str = "") -> dict[str, float]:
        g = 1.0 if structured else self.unstructured_gain
        labels = option_labels(task.options)
        out = {lab: 0.0 for lab in labels}
        out[task.correct] = self.base_logit + self.gain * g * f
        if self.noise:
            digest = hashlib.sha256(f"{task.id}|{salt}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            for lab in labels:
                out[lab] += float(rng.normal(0.0, self.noise))
        return out

    def scores(self, task: SyntheticTask, f: float, structured: bool = True) -> OptionScores:
        return OptionScores(log_softmax(self.logits(task, f, structured)), "oracle")


_CAP_RE = re.compile(r"Request at most (\d+) frame")
_FRAMES_RE = re.compile(r"frames ([\d,]+)")
_CLUES_RE = re.compile(r"clues at ([\d,]+)")
_ID_RE = re.compile(r"\[(synth-[^\]]+)\]")
SUMMARY_ONLY_MARKER = "Answer using only the summary above."


def _ints(m: re.Match | None) -> set[int]:
    return {int(x) for x in m.group(1).split(",") if x} if m else set()


def _summary_block(prompt: str) -> tuple[str, bool]:
    structured = FREE_HEADER not in prompt
    header = STRUCTURED_HEADER if structured else FREE_HEADER
    start = prompt.find(header)
    if start < 0:
        return "", structured
    body = prompt[start + len(header):]
    for stop in ("\nFrames shown this round:", "\n" + SUMMARY_ONLY_MARKER):
        cut = body.find(stop)
        if cut >= 0:
            body = body[:cut]
    return body, structured


@dataclass(frozen=True)
class OracleView:
    """What the scripted model can reconstruct from one prompt."""

    seen: frozenset[int]
    known_clues: frozenset[int]
    f: float
    structured: bool
    final: bool
    cap: int


def oracle_view(task: SyntheticTask, rules: OracleRules, prompt: str,
                shown_frames: Iterable[int]) -> OracleView:
    shown = sorted(set(shown_frames))
    for i in shown:
        if not 0 <= i < task.video_length:
            raise IndexOutOfRange(f"frame {i} outside [0, {task.video_length})")
    body, structured = _summary_block(prompt)
    seen = _ints(_FRAMES_RE.search(body)) | set(shown)
    clues = (_ints(_CLUES_RE.search(body)) | {i for i in shown if task.is_evidence(i)})
    clues &= set(task.evidence_indices)
    r = prompt_round(prompt)
    final = (FORCED_MARKER in prompt or SUMMARY_ONLY_MARKER in prompt
             or (r is not None and r[0] >= r[1]))
    m = _CAP_RE.search(prompt)
    cap = int(m.group(1)) if m else rules.default_cap
    return OracleView(frozenset(seen), frozenset(clues), len(clues) / task.k, structured, final, cap)


def _join(xs: Iterable[int]) -> str:
    return ",".join(str(i) for i in sorted(xs))


def oracle_respond(task: SyntheticTask, rules: OracleRules, prompt: str,
                   shown_frames: Sequence[int], round: int | None = None) -> tuple[str, OptionScores]:
    """Canonical reply text and option scores for one round.

    ``round`` is informational; the final-round test reads the prompt itself.
    """
    view = oracle_view(task, rules, prompt, shown_frames)
    scores = rules.scores(task, view.f, view.structured)
    missing = [i for i in task.evidence_indices if i not in view.seen]
    request = missing[: view.cap]

    seen_txt = f"frames {_join(view.seen)}" if view.seen else "nothing yet"
    clue_txt = f"clues at {_join(view.known_clues)}" if view.known_clues else "no clues yet"
    progress = f"{len(view.known_clues)}/{task.k} clue frames located"
    answering = view.f >= rules.threshold or view.final or not request
    reason = "question answered" if answering else f"inspect {_join(request)} next"
    if view.structured:
        summary = SummaryState(seen_txt, clue_txt, progress,
                               f"{task.k - len(view.known_clues)} clue frame(s) not yet located",
                               reason)
    else:
        summary = SummaryState.free_text(f"{seen_txt}; {clue_txt}; {progress}")
    if answering:
        top = max(scores.logprobs.values())
        label = next(lab for lab, v in scores.logprobs.items() if v == top)
        action: FinalAnswer | FrameRequest = FinalAnswer(label)
    else:
        action = FrameRequest(tuple(request))
    text = serialize_response(AgentResponse(summary, action), structured=view.structured)
    return text, scores


class OracleBackend:
    """Model backend backed by :func:`oracle_respond`; tasks are found by the id in the question."""

    def __init__(self, tasks: Iterable[SyntheticTask] = (), rules: OracleRules | None = None):
        self.rules = rules or OracleRules()
        self.tasks: dict[str, SyntheticTask] = {t.id: t for t in tasks}

    def add(self, task: SyntheticTask) -> None:
        self.tasks[task.id] = task

    def _task(self, prompt: str) -> SyntheticTask:
        m = _ID_RE.search(prompt)
        if not m or m.group(1) not in self.tasks:
            raise KeyError("prompt does not reference a registered synthetic task")
        return self.tasks[m.group(1)]

    def generate(self, prompt: str, images: Sequence[Frame], params: SamplingParams) -> str:
        task = self._task(prompt)
        if prompt.endswith(ANSWER_ONLY_SUFFIX):
            scores = self.score_options(prompt[: -len(ANSWER_ONLY_SUFFIX)], images, task.options)
            return scores.argmax() or option_labels(task.options)[0]
        text, _ = oracle_respond(task, self.rules, prompt, [f.index for f in images])
        return text

    def score_options(self, prompt: str, images: Sequence[Frame],
                      options: Sequence[str]) -> OptionScores:
        task = self._task(prompt)
        view = oracle_view(task, self.rules, prompt, [f.index for f in images])
        return self.rules.scores(task, view.f, view.structured)

    def first_token_logprobs(self, prompt: str, images: Sequence[Frame]) -> dict[str, float]:
        if prompt.endswith(ANSWER_ONLY_SUFFIX):
            prompt = prompt[: -len(ANSWER_ONLY_SUFFIX)]
        task = self._task(prompt)
        return dict(self.score_options(prompt, images, task.options).logprobs)


# -- dataset export ----------------------------------------------------------------

def export_dataset(tasks: Sequence[SyntheticTask], out_dir: str | Path,
                   category: str | None = None) -> Path:
    """Write tasks as ``manifest.jsonl`` plus one frame directory per task."""
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for task in tasks:
        d = root / "frames" / task.id
        d.mkdir(parents=True, exist_ok=True)
        for i, label in enumerate(task.layout):
            (d / f"{i:06d}.png").write_bytes(render_frame(label, i))
        write_key_values(d / "meta.txt", {"fps": task.fps, "source_id": task.id,
                                          "duration": task.video_length / task.fps})
        (d / "labels.txt").write_text("".join(f"{i}\t{lab}\n" for i, lab in enumerate(task.layout)),
                                      encoding="utf-8")
        record = {
            "id": task.id, "video_path": f"frames/{task.id}", "question": task.question,
            "options": list(task.options), "answer": task.correct,
            "category": category or f"k={task.k}",
            "synth": {"seed": task.seed, "video_length": task.video_length, "fps": task.fps,
                      "evidence": list(task.evidence_indices)},
        }
        lines.append(json.dumps(record, sort_keys=True))
    path = root / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def task_from_record(record: Mapping) -> SyntheticTask | None:
    """Rebuild the task behind an exported manifest record (None for other datasets)."""
    meta = record.get("synth")
    if not meta:
        return None
    task = build_task(int(meta["seed"]), int(meta["video_length"]), meta["evidence"],
                      len(record["options"]), float(meta.get("fps", 2.0)), record["id"])
    if task.question != record["question"] or list(task.options) != list(record["options"]):
        raise ValueError(f"manifest record {record['id']!r} does not match its synthetic parameters")
    return task


# -- RL environment ----------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    video_length: int = 48
    n_bins: int = 3
    n_evidence: int = 3
    n_options: int = 4
    max_rounds: int = 4
    frames_per_request: int = 3
    cue_prob: float = 0.8
    lure_gain: float = 1.2
    fps: float = 2.0

    def __post_init__(self) -> None:
        if self.lure_gain < 0:
            raise ValueError("lure_gain must be non-negative")
        if self.video_length % self.n_bins:
            raise ValueError("video_length must be a multiple of n_bins")
        bin_size = self.video_length // self.n_bins
        if not 1 <= self.n_evidence < bin_size:
            raise ValueError("evidence must fit inside one bin next to its cue frame")
        if self.max_rounds < 2:
            raise ValueError("max_rounds must be >= 2")
        if not 0.0 <= self.cue_prob <= 1.0:
            raise ValueError("cue_prob must lie in [0, 1]")

    @property
    def bin_size(self) -> int:
        return self.video_length // self.n_bins


@dataclass(frozen=True)
class EnvTask:
    task: SyntheticTask
    key_bin: int
    cue: bool
    initial_frames: tuple[int, ...]
    lure: str  # distractor favoured by frames from the other bins


@dataclass(frozen=True)
class EnvState:
    t: int
    seen: tuple[int, ...]
    visited: tuple[int, ...]  # bins requested so far
    shown: tuple[int, ...]    # frames admitted at the start of round t

    def f(self, task: SyntheticTask) -> float:
        return sum(task.is_evidence(i) for i in self.seen) / task.k


class SyntheticEnv:
    """Bin-level frame selection game used to train the toy policy.

    The video is cut into ``n_bins`` equal bins. All clues sit in one key bin;
    the first round shows one frame per bin and, with probability
    ``cue_prob``, the key bin's frame carries a visible cue. Requesting a bin
    admits its ``frames_per_request`` most salient unseen frames (clues first).
    Every other bin that gets requested adds ``lure_gain`` to one fixed wrong
    option, so reading irrelevant footage can talk the model out of the answer.
    """

    def __init__(self, config: EnvConfig | None = None, rules: OracleRules | None = None):
        self.config = config or EnvConfig()
        self.rules = rules or OracleRules()

    def initial_frames(self) -> tuple[int, ...]:
        c = self.config
        return tuple(b * c.bin_size + c.bin_size // 2 for b in range(c.n_bins))

    def sample_task(self, seed: int) -> EnvTask:
        c = self.config
        rng = np.random.default_rng(seed)
        key = int(rng.integers(c.n_bins))
        initial = self.initial_frames()
        lo = key * c.bin_size
        pool = [i for i in range(lo, lo + c.bin_size) if i != initial[key]]
        evidence = tuple(sorted(int(i) for i in rng.choice(pool, size=c.n_evidence, replace=False)))
        cue = bool(rng.random() < c.cue_prob)
        task = _assemble(seed, c.video_length, c.fps, evidence, c.n_options, rng,
                         f"synth-env-s{seed}")
        layout = list(task.layout)
        if cue:
            layout[initial[key]] = "scene cue"
        task = SyntheticTask(task.id, seed, task.video_length, task.fps, evidence, task.options,
                             task.correct, tuple(layout))
        wrong = [lab for lab in option_labels(task.options) if lab != task.correct]
        return EnvTask(task, key, cue, initial, wrong[int(rng.integers(len(wrong)))])

    def reset(self, et: EnvTask) -> EnvState:
        return EnvState(1, et.initial_frames, (), et.initial_frames)

    def bin_of(self, i: int) -> int:
        return i // self.config.bin_size

    def request_frames(self, et: EnvTask, state: EnvState, b: int) -> tuple[int, ...]:
        c = self.config
        lo = b * c.bin_size
        centre = lo + c.bin_size / 2
        cand = [i for i in range(lo, lo + c.bin_size) if i not in state.seen]
        cand.sort(key=lambda i: (not et.task.is_evidence(i), abs(i - centre), i))
        return tuple(sorted(cand[: c.frames_per_request]))

    def step_request(self, et: EnvTask, state: EnvState, b: int) -> EnvState:
        new = self.request_frames(et, state, b)
        return EnvState(state.t + 1, state.seen + new, state.visited + (b,), new)

    def cue_visible(self, et: EnvTask, state: EnvState, b: int) -> bool:
        return any(et.task.layout[i] == "scene cue" and self.bin_of(i) == b for i in state.seen)

    def scores(self, et: EnvTask, state: EnvState) -> OptionScores:
        logits = self.rules.logits(et.task, state.f(et.task))
        logits[et.lure] += self.config.lure_gain * len(set(state.visited) - {et.key_bin})
        return OptionScores(log_softmax(logits), "oracle")
