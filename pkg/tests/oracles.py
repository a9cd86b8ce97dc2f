"""Independent reference implementations used to cross-check the library.

Nothing here imports the code under test's math; trajectories are generated
together with the ground-truth facts the reward depends on, and the reward is
recomputed from those facts alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from helpers import answer_text, select_text
from sparsevid.backend import OptionScores
from sparsevid.controller import RoundRecord, Trajectory
from sparsevid.protocol import option_labels, parse_response

LABELS = "ABCDE"


@dataclass
class Truth:
    correct: int
    step_kinds: list          # "frames" | "answer" | "invalid" per acting step
    step_valid: list          # strict format validity of the acting reply
    logits: dict              # decision state t -> np.ndarray
    summary_logits: np.ndarray | None
    answer: int | None
    tau: int


def _logits(rng, n):
    if rng.random() < 0.25:  # coarse values make exact ties likely
        return rng.integers(-3, 1, size=n).astype(float)
    return rng.normal(0.0, 2.0, size=n)


def _reply(rng, kind, t, label):
    """Return (raw text, strict-format-valid)."""
    body = select_text(t + 1, t + 2) if kind == "frames" else answer_text(label)
    roll = rng.random()
    if roll < 0.15:
        return "Sure. " + body, False      # parses, but has extra text
    if roll < 0.2:
        return "\n " + body + "\n", True   # surrounding whitespace is allowed
    return body, True


def random_trajectory(rng: np.random.Generator) -> tuple[Trajectory, Truth]:
    n = int(rng.integers(2, 6))
    options = tuple(f"option {i}" for i in range(n))
    labels = option_labels(options)
    correct = int(rng.integers(n))
    T = int(rng.integers(1, 6))
    mode = rng.choice(["answer", "forced", "protocol", "cutoff"], p=[0.5, 0.2, 0.15, 0.15])
    tau = int(rng.integers(1, T + 1)) if mode in ("answer", "protocol") else T

    traj = Trajectory("x", "q", options, T, labels[correct])
    kinds, valid, logits = [], [], {}

    def add(t, kind, raw, scores=None):
        traj.rounds.append(RoundRecord(t, kind, "", (), (), raw, parse_response(raw, options),
                                       0, 0, scores))

    for t in range(1, tau + 1):
        x = _logits(rng, n)
        logits[t] = x
        scores = OptionScores(dict(zip(labels, x.tolist())))
        last = t == tau
        if last and mode == "protocol":
            add(t, "round", "garbage", scores)
            add(t, "reprompt", "still garbage <answer>")
            kinds.append("invalid")
            valid.append(False)
            continue
        kind = "answer" if last and mode == "answer" else "frames"
        label = labels[int(rng.integers(n))]
        raw, ok = _reply(rng, kind, t, label)
        if rng.random() < 0.1:   # a rejected first attempt, then a good reprompt
            add(t, "round", raw + " trailing chatter", scores)
            add(t, "reprompt", raw)
        else:
            add(t, "round", raw, scores)
        kinds.append(kind)
        valid.append(ok)
        if kind == "answer":
            traj.final_answer = label

    if mode in ("forced", "protocol"):
        x = _logits(rng, n)
        logits[tau + 1] = x
        label = labels[int(rng.integers(n))]
        add(tau, "forced", answer_text(label), OptionScores(dict(zip(labels, x.tolist()))))
        traj.final_answer = label
        traj.forced = True
    traj.tau = tau
    summary = None
    if traj.final_answer is not None:
        summary = _logits(rng, n)
        traj.summary_scores = OptionScores(dict(zip(labels, summary.tolist())))
    answer = labels.index(traj.final_answer) if traj.final_answer is not None else None
    return traj, Truth(correct, kinds, valid, logits, summary, answer, tau)


def brute_force_return(truth: Truth, w) -> float:
    """Reward recomputed from ground truth with array arithmetic."""
    def m(t):
        x = truth.logits[t] / w.margin_temperature
        return x[truth.correct] - np.delete(x, truth.correct).max()

    total = 0.0
    for t in range(1, truth.tau + 1):
        r = 0.0
        if truth.step_kinds[t - 1] == "frames" and (t + 1) in truth.logits:
            r += w.lambda1 * max(m(t + 1) - m(t), 0.0)
        if t == truth.tau and truth.answer is not None:
            s = truth.summary_logits
            strict_best = int(np.argmax(s)) if (s == s.max()).sum() == 1 else -1
            r += w.lambda2 * float(strict_best == truth.correct)
            if truth.answer == truth.correct and truth.tau <= w.t_stop:
                r += w.lambda3 * (1.0 + w.beta * max(w.t_stop - truth.tau, 0))
        r += w.alpha * float(truth.step_valid[t - 1])
        total += w.gamma ** (t - 1) * r
    return total


def random_weights(rng):
    from sparsevid.reward import RewardWeights
    return RewardWeights(lambda1=float(rng.uniform(0, 2)), lambda2=float(rng.uniform(0, 2)),
                         lambda3=float(rng.uniform(0, 2)), alpha=float(rng.uniform(0, 0.5)),
                         beta=float(rng.uniform(0, 2)), t_stop=int(rng.integers(1, 5)),
                         gamma=float(rng.choice([1.0, rng.uniform(0, 1)])),
                         margin_temperature=float(rng.choice([1.0, rng.uniform(0.2, 3)])))


def rel_close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(b))


# -- GRPO ------------------------------------------------------------------------------

def brute_force_advantages(returns):
    n = len(returns)
    if len(set(returns)) == 1:  # a constant group carries no signal
        return [0.0] * n
    mean = sum(returns) / n
    var = sum((r - mean) ** 2 for r in returns) / n
    return [(r - mean) / (var ** 0.5 + 1e-8) for r in returns]


def brute_force_objective(logp_new, logp_old, adv, eps):
    import math
    total = 0.0
    for new, old, a in zip(logp_new, logp_old, adv):
        acc = 0.0
        for ln, lo in zip(new, old):
            rho = math.exp(ln - lo)
            clipped = min(max(rho, 1 - eps), 1 + eps)
            acc += min(rho * a, clipped * a)
        total += acc / len(new)
    return total / len(logp_new)
