import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import answer_text, select_text
from oracles import brute_force_return, random_trajectory, random_weights, rel_close
from sparsevid.backend import OptionScores, ScoringUnavailable, ScriptedBackend
from sparsevid.controller import EpisodeConfig, RoundRecord, Trajectory, run_episode
from sparsevid.protocol import SummaryState, parse_response
from sparsevid.reward import (RewardTrace, RewardWeights, SingleOption, confidence_gain, discounted_return,
                              margin, score_trajectory, stop_reward, sufficiency_from_scores,
                              summary_sufficiency)
from sparsevid.video import Frame

OPTS = ("x", "y", "z")


def test_margin_examples():
    assert margin({"A": -1.0, "B": -1.0}, "A") == 0.0
    assert margin({"A": -0.5, "B": -2.0, "C": -3.0}, "A") == pytest.approx(1.5, abs=1e-15)
    assert margin({"A": -2.0, "B": -0.5}, "A") < 0
    assert margin({"A": -0.5, "B": -2.0}, "A", temperature=0.5) == pytest.approx(3.0)
    with pytest.raises(SingleOption):
        margin({"A": 0.0}, "A")


def test_confidence_gain_examples():
    assert confidence_gain(0.2, 0.9) == pytest.approx(0.7)
    assert confidence_gain(0.9, 0.2) == 0.0
    assert confidence_gain(0.4, 0.4) == 0.0


@pytest.mark.parametrize("correct,tau,expected", [(True, 1, 2.0), (True, 2, 1.0), (True, 3, 0.0),
                                                  (False, 1, 0.0), (False, 2, 0.0)])
def test_stop_reward_table(correct, tau, expected):
    assert stop_reward(correct, tau, RewardWeights(beta=1.0, t_stop=2)) == expected


def test_weights_validation():
    for bad in (dict(lambda1=-1), dict(t_stop=0), dict(gamma=1.5), dict(margin_temperature=0)):
        with pytest.raises(ValueError):
            RewardWeights(**bad)


def _backend_favouring(scores):
    return ScriptedBackend(lambda p, im: "A", lambda p, im, o: scores)


@pytest.mark.parametrize("scores,expected", [({"A": -0.1, "B": -2, "C": -3}, 1.0),
                                             ({"A": -2, "B": -0.1, "C": -3}, 0.0),
                                             ({"A": -0.5, "B": -0.5, "C": -3}, 0.0)])
def test_summary_sufficiency(scores, expected):
    seen = []
    b = _backend_favouring(scores)
    spy = ScriptedBackend(b.respond, lambda p, im, o: seen.append((p, im)) or scores)
    z = SummaryState("frames 1", "red car at 3s", "", "", "")
    assert summary_sufficiency(spy, "colour?", OPTS, z, "A") == expected
    prompt, images = seen[0]
    assert images == [] and "red car at 3s" in prompt and "colour?" in prompt


def _one_round(correct=True, valid=True):
    raw = answer_text("A" if correct else "B")
    if not valid:
        raw = "Well. " + raw
    traj = Trajectory("t", "q", OPTS, 4, "A")
    traj.rounds.append(RoundRecord(1, "round", "p", (0,), (0.0,), raw, parse_response(raw, OPTS),
                                   256, 10, OptionScores({"A": 0, "B": -1, "C": -1})))
    traj.tau = 1
    traj.final_answer = "A" if correct else "B"
    traj.summary_scores = OptionScores({"A": 0, "B": -1, "C": -2} if correct else
                                       {"A": -3, "B": 0, "C": -2})
    return traj


def test_one_round_correct_episode_returns_three():
    w = RewardWeights(lambda1=1, lambda2=1, lambda3=1, alpha=0, gamma=1, t_stop=2, beta=1)
    trace = score_trajectory(_one_round(), None, w)
    assert trace.steps[0].r_sum == 1.0 and trace.steps[0].r_stop == 2.0
    assert trace.episode_return == 3.0


def test_wrong_invalid_episode_returns_zero():
    trace = score_trajectory(_one_round(correct=False, valid=False), None, RewardWeights(alpha=0))
    assert trace.episode_return == 0.0


def test_format_bonus_per_step():
    trace = score_trajectory(_one_round(correct=False), None, RewardWeights(alpha=0.1))
    assert trace.steps[0].r_format == pytest.approx(0.1)


def test_discount():
    assert discounted_return([0.0, 4.0], 0.5) == 2.0
    assert discounted_return([1.0, 2.0, 3.0], 1.0) == 6.0
    assert discounted_return([], 0.9) == 0.0


def _two_round(gamma):
    traj = Trajectory("t", "q", OPTS, 4, "A")
    s1 = OptionScores({"A": -1.0, "B": -0.5, "C": -3.0})
    s2 = OptionScores({"A": -0.2, "B": -1.5, "C": -3.0})
    for t, raw, s in ((1, select_text(4), s1), (2, answer_text("A"), s2)):
        traj.rounds.append(RoundRecord(t, "round", "p", (), (), raw, parse_response(raw, OPTS),
                                       0, 0, s))
    traj.tau, traj.final_answer = 2, "A"
    traj.summary_scores = s2
    return traj


def test_confidence_gain_uses_next_decision_state():
    trace = score_trajectory(_two_round(1.0), None, RewardWeights(alpha=0))
    step1 = trace.steps[0]
    assert step1.m_before == pytest.approx(-0.5) and step1.m_after == pytest.approx(1.3)
    assert step1.r_conf == pytest.approx(1.8)
    # r_stop: correct at tau=2 == t_stop -> 1, weighted 0.5; r_sum 1
    assert trace.episode_return == pytest.approx(1.8 + 1 + 0.5)


def test_gamma_discount_on_second_step():
    w = RewardWeights(lambda1=0, alpha=0, gamma=0.5)
    trace = score_trajectory(_two_round(0.5), None, w)
    assert trace.episode_return == pytest.approx(0.5 * trace.steps[1].r_total)


def test_missing_scores_raise():
    traj = _two_round(1.0)
    traj.rounds[0].scores = None
    with pytest.raises(ScoringUnavailable):
        score_trajectory(traj)
    traj = _one_round()
    traj.summary_scores = None
    with pytest.raises(ScoringUnavailable):
        score_trajectory(traj)


def test_summary_term_recomputed_through_backend():
    traj = _one_round()
    traj.summary_scores = None
    backend = _backend_favouring({"A": 0, "B": -1, "C": -1})
    assert score_trajectory(traj, backend).steps[0].r_sum == 1.0


def test_trace_json_round_trip():
    trace = score_trajectory(_two_round(1.0))
    assert RewardTrace.from_json(trace.to_json()) == trace


class BlankVideo:
    length, fps = 10, 1.0

    def frame_at(self, i):
        return Frame(i, float(i), b"")


def test_scores_live_episode_end_to_end():
    # Margins rise as the scripted model sees more frames.
    def logits(prompt, images, options):
        k = len(images)
        return {"A": -1.0 + k, "B": 0.0, "C": -2.0, "D": -2.0}

    backend = ScriptedBackend.from_rounds([select_text(5), answer_text("A")], logits=logits)
    traj = run_episode(BlankVideo(), "q", ("a", "b", "c", "d"), backend, EpisodeConfig(record_scores=True),
                       correct="A")
    trace = score_trajectory(traj, None, RewardWeights())
    assert trace.steps[0].r_conf == pytest.approx(0.0)  # 3 frames -> 1 frame shown: margin drops
    assert all(s.r_conf >= 0 for s in trace.steps)


def test_matches_brute_force_on_random_trajectories():
    rng = np.random.default_rng(1234)
    for _ in range(2000):
        traj, truth = random_trajectory(rng)
        w = random_weights(rng)
        trace = score_trajectory(traj, None, w)
        expected = brute_force_return(truth, w)
        assert rel_close(trace.episode_return, expected, 1e-12), (trace, truth)
        assert all(s.r_conf >= 0 for s in trace.steps)
        assert all(s.r_sum in (0.0, 1.0) and s.r_stop >= 0 for s in trace.steps)


# Dyadic grids keep the shifted values exact, so ties survive the shift.
@given(st.lists(st.integers(-160, 0).map(lambda v: v / 8), min_size=2, max_size=5),
       st.integers(-240, 240).map(lambda v: v / 8))
def test_sufficiency_invariant_to_probability_rescaling(logps, shift):
    labels = "ABCDE"[: len(logps)]
    a = OptionScores(dict(zip(labels, logps)))
    b = OptionScores({k: v + shift for k, v in a.logprobs.items()})
    for correct in labels:
        assert sufficiency_from_scores(a, correct) == sufficiency_from_scores(b, correct)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8))
def test_gamma_one_is_plain_sum(rewards):
    assert math.isclose(discounted_return(rewards, 1.0), sum(rewards), abs_tol=1e-9)
