import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevid.protocol import SummaryState
from sparsevid.state import (CostModel, EmptyAfterFiltering, EpisodeState, admit_frames,
                             bytes_over_four, commit_summary, extend_frames, within_budget)


def fresh(**kw):
    return EpisodeState("q?", ("a", "b"), **kw)


def test_admit_dedups_against_seen():
    s = extend_frames(fresh(), [1, 5])
    s2, admitted = admit_frames(s, [5, 7, 9], 10, cap=3)
    assert admitted == (7, 9)
    assert s2.admitted_frames == (1, 5, 7, 9)
    assert s2.cumulative_visual_cost == 4 * 256


def test_admit_clamps_range():
    _, admitted = admit_frames(fresh(), [0, 999], 100, cap=3)
    assert admitted == (0,)


def test_admit_caps_in_request_order():
    _, admitted = admit_frames(fresh(), [9, 2, 7, 1], 10, cap=2)
    assert admitted == (9, 2)


def test_admit_empty_after_filtering_lists_reasons():
    s = extend_frames(fresh(), [3])
    with pytest.raises(EmptyAfterFiltering) as info:
        admit_frames(s, [3, 50], 10, cap=3)
    assert dict(info.value.rejected) == {3: "already seen", 50: "out of range"}


def test_admit_requires_distinct_request():
    with pytest.raises(ValueError):
        admit_frames(fresh(), [1, 1], 10, cap=3)


def test_commit_summary_appends():
    zs = [SummaryState(previously_seen=f"z{i}") for i in range(3)]
    s = fresh()
    assert s.latest_summary == SummaryState()
    s = commit_summary(s, zs[0])
    assert s.committed_summaries == (zs[0],)
    for z in zs[1:]:
        s = commit_summary(s, z)
    assert len(s.committed_summaries) == 3 and s.latest_summary == zs[2]


def test_within_budget_examples():
    assert within_budget(fresh(), "x" * 400, 8192)   # 100 tokens
    heavy = extend_frames(fresh(cost_model=CostModel(per_frame_cost=1000)), range(9))
    assert not within_budget(heavy, "", 8192)


def test_within_budget_boundary_inclusive():
    s = extend_frames(fresh(), range(2))              # 512
    assert within_budget(s, "x" * 4 * 100, 612)
    assert not within_budget(s, "x" * (4 * 100 + 1), 612)


def test_text_cost_counts_utf8_bytes():
    assert bytes_over_four("") == 0
    assert bytes_over_four("abcd") == 1
    assert bytes_over_four("abcde") == 2
    assert bytes_over_four("éé") == 1                 # four bytes


def test_cost_model_rejects_non_positive():
    with pytest.raises(ValueError):
        CostModel(per_frame_cost=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(1, 6),
       st.lists(st.lists(st.integers(-5, 260), max_size=8, unique=True), max_size=10))
def test_admitted_set_stays_valid(L, cap, requests):
    s = fresh()
    for req in requests:
        before = s.admitted_frames
        try:
            s, admitted = admit_frames(s, req, L, cap)
        except EmptyAfterFiltering:
            continue
        assert not set(admitted) & set(before)
        assert len(admitted) <= cap
        assert s.admitted_frames[: len(before)] == before
    assert len(set(s.admitted_frames)) == len(s.admitted_frames)
    assert all(0 <= i < L for i in s.admitted_frames)
    assert s.cumulative_visual_cost == 256 * len(s.admitted_frames)


@given(st.text(max_size=50), st.text(max_size=50))
def test_text_cost_monotone_in_length(a, b):
    assert bytes_over_four(a) <= bytes_over_four(a + b)
