import json

import pytest
from hypothesis import given, settings, strategies as st

from cropr import schedule as S
from cropr.errors import ScheduleError

KEEP_TARGETS = [(96 - 16 * i) ** 2 for i in range(1, 6)]


def test_per_block_goldens():
    s = S.build_per_block(24, 196, 8, llf=False, cls=True)
    assert (len(s.entries), s.final_tokens, S.tpr_percent(s)) == (23, 12, 94)
    s = S.build_per_block(24, 196, 8, llf=True, cls=True)
    assert (len(s.entries), s.final_tokens, S.tpr_percent(s)) == (22, 20, 90)
    s = S.build_per_block(2, 64, 0)
    assert s.entries == [] and S.tpr(s) == 0


def test_staged_goldens():
    s = S.build_staged([{"block": b, "r": 50} for b in (6, 12, 18)], 196, llf=True, cls=True, depth=24)
    assert (s.final_tokens, S.tpr_percent(s)) == (46, 77)
    s = S.build_staged([{"block": 3, "r": 825}], 1024, cls=True, depth=24)
    assert S.tpr(s) == pytest.approx(0.8, abs=0.01)
    s = S.staged_from_keep_targets([5, 8, 11, 14, 20], KEEP_TARGETS, 9216, llf=True, depth=24)
    assert (s.final_patch_tokens, S.tpr_percent(s)) == (256, 97)


def test_tpr_examples():
    s = S.build_per_block(24, 196, 8, cls=True)
    assert s.total_pruned == 185 and S.tpr_percent(s) == 94
    s = S.build_staged([{"block": 1, "r": 176}], 196, depth=24)
    assert S.tpr_percent(s) == 90
    assert S.tpr_percent(S.build_staged([], 196, depth=24)) == 0


def test_cls_adjustment_only_first_entry():
    s = S.build_staged([{"block": 1, "r": 4}, {"block": 2, "r": 4}], 16, cls=True, depth=4)
    assert s.effective_counts() == [5, 4]
    assert s.trajectory() == [17, 12, 8]


def test_validation_errors():
    with pytest.raises(ScheduleError):
        S.build_staged([{"block": 3, "r": 2}, {"block": 2, "r": 2}], 16, depth=8)
    with pytest.raises(ScheduleError):
        S.build_staged([{"block": 7, "r": 2}], 16, llf=True, depth=8)
    S.build_staged([{"block": 7, "r": 2}], 16, llf=False, depth=8)
    with pytest.raises(ScheduleError):
        S.build_staged([{"block": 8, "r": 2}], 16, depth=8)
    with pytest.raises(ScheduleError):
        S.build_per_block(8, 16, 3)
    with pytest.raises(ScheduleError):
        S.build_staged([{"block": 1, "r": 16}], 16, depth=8)


def test_curriculum_examples():
    c = S.Curriculum(enabled=True, start_r=1, final_r=40, warmup_epochs=32)
    assert S.curriculum_r(0, c) == 1
    assert S.curriculum_r(32, c) == 40 and S.curriculum_r(100, c) == 40
    assert S.curriculum_r(16, c) == 21 == round(1 + 39 * 16 / 31)
    assert S.curriculum_r(31, c) == 40
    with pytest.raises(ValueError):
        S.curriculum_r(-1, c)


def test_curriculum_rescales_schedule():
    c = S.Curriculum(enabled=True, start_r=1, final_r=8, warmup_epochs=8)
    s = S.build_per_block(8, 64, 8, curriculum=c)
    assert all(e.r == 1 for e in s.for_epoch(0).entries)
    assert s.for_epoch(7).entries == s.entries


def test_div8_examples():
    s = S.build_per_block(24, 196, 8, cls=True, prefer_div8=True)
    traj = s.trajectory()
    assert traj[1:3] == [188, 180] and all(n % 8 == 4 for n in traj[1:])
    assert len(S.validate_div8(s)) == 23
    assert S.validate_div8(S.build_per_block(24, 196, 8, cls=True)) == []
    assert S.validate_div8(S.build_staged([{"block": 1, "r": 8}, {"block": 2, "r": 8}], 64,
                                          depth=4, prefer_div8=True)) == []
    assert S.validate_div8(S.build_staged([], 64, depth=4, prefer_div8=True)) == []


def test_format_table():
    assert S.format_table(S.build_staged([], 64, depth=4)).count("\n") == 0
    table = S.format_table(S.build_per_block(24, 196, 8, cls=True))
    assert "final tokens: 12" in table and "TPR: 94%" in table


schedules = st.builds(
    lambda depth, m0, cls, llf, picks: _staged(depth, m0, cls, llf, picks),
    st.integers(3, 24), st.integers(8, 400), st.booleans(), st.booleans(),
    st.lists(st.tuples(st.integers(1, 24), st.integers(1, 30)), max_size=8),
)


def _staged(depth, m0, cls, llf, picks):
    last = depth - 2 if llf else depth - 1
    blocks = sorted({b for b, _ in picks if b <= last})
    stages, left = [], m0 - 1
    for b in blocks:
        r = min(dict(picks)[b], left - 1)
        if r < 1:
            break
        stages.append({"block": b, "r": r})
        left -= r
    return S.build_staged(stages, m0, llf, cls, depth)


@given(schedules)
@settings(max_examples=300, deadline=None)
def test_schedule_properties(s):
    traj = s.trajectory()
    assert all(a > b for a, b in zip(traj, traj[1:]))
    assert traj[-1] >= 1 + int(s.cls)
    assert S.PruningSchedule.from_json(s.to_json()) == s
    assert json.loads(s.to_json())["entries"] == [{"block": e.block, "r": e.r} for e in s.entries]
    assert len(s.tokens_per_block()) == s.depth
    if s.llf:
        assert s.tokens_per_block()[-1] == s.m0 + int(s.cls)


@given(st.integers(3, 24), st.integers(16, 400), st.integers(0, 8), st.booleans())
@settings(max_examples=200, deadline=None)
def test_llf_tpr_never_exceeds_plain(depth, m0, r, cls):
    try:
        plain = S.build_per_block(depth, m0, r, False, cls)
    except ScheduleError:
        return
    llf = S.build_per_block(depth, m0, r, True, cls)
    assert plain.tpr >= llf.tpr
