from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skynas.boxes import Box
from skynas.scoring import (
    ScoringError,
    TeamResult,
    ao,
    energy_score,
    iou,
    iou_array,
    leaderboard,
    mean_energy,
    r_iou,
    read_box_csv,
    sr,
    team_ious,
    total_score,
)


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(3, 3, 4, 4)) == 0.0
    assert abs(iou(a, Box(1, 1, 3, 3)) - float(Fraction(1, 7))) < 1e-12


def test_iou_degenerate_conventions():
    p = Box(0.5, 0.5, 0.5, 0.5)
    assert iou(p, p) == 1.0
    assert iou(p, Box(0.2, 0.2, 0.2, 0.2)) == 0.0
    assert iou(p, Box(0, 0, 1, 1)) == 0.0


def test_invalid_box():
    with pytest.raises(ValueError):
        Box(1, 0, 0, 1)


def test_r_iou_examples():
    assert r_iou([1, 1, 1]) == 1.0
    assert abs(r_iou([0.5, 0.7]) - 0.6) < 1e-12
    assert r_iou([0.0] * 7) == 0.0
    with pytest.raises(ScoringError):
        r_iou([])


def test_energy_score_examples():
    assert energy_score(3.0, 3.0, 2) == 1.0
    assert abs(energy_score(1.0, 2.0, 2) - 1.2) < 1e-12
    assert energy_score(1e10, 1.0, 10) == 0.0
    with pytest.raises(ScoringError):
        energy_score(0.0, 1.0, 2)


def test_mean_energy_examples():
    assert mean_energy([5.0]) == 5.0
    assert mean_energy([2, 4]) == 3
    assert mean_energy([1.5] * 4) == 1.5
    with pytest.raises(ScoringError):
        mean_energy([])


def test_total_score_examples():
    assert total_score(0.4, 1.0) == 0.8
    assert total_score(0.0, 1.7) == 0.0
    # published SkyNet contest row: IoU 0.731, total 1.504; ES back-derived
    es = 1.504 / 0.731 - 1
    assert abs(es - 1.0575) < 1e-3
    assert abs(total_score(0.731, es) - 1.504) < 1e-12


def test_ao_sr_examples():
    assert ao([1.0] * 3) == 1.0 and sr([1.0] * 3, 0.99) == 1.0
    assert sr([0.6, 0.4], 0.5) == 0.5
    # two of the three frames exceed 0.75
    assert abs(sr([0.8, 0.8, 0.2], 0.75) - 2 / 3) < 1e-12
    assert abs(ao([0.8, 0.8, 0.2]) - 0.6) < 1e-12
    assert sr([0.5], 0.5) == 0.0 and sr([0.5], 0.5, strict=False) == 1.0
    with pytest.raises(ScoringError):
        sr([0.5], 1.0)


coord = st.floats(0, 100, allow_nan=False)


@st.composite
def boxes(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return Box(x0, y0, x1, y1)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0 <= iou(a, b) <= 1


@given(boxes())
def test_iou_self(a):
    if a.area > 0:
        assert iou(a, a) == 1.0


@given(boxes(), boxes(), st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_iou_scale_invariant(a, b, s):
    # power-of-two scales are exact in binary floating point
    assert iou(a.scaled(s), b.scaled(s)) == iou(a, b)


@given(st.lists(st.tuples(boxes(), boxes()), min_size=1, max_size=10))
def test_iou_array_matches_scalar(pairs):
    p = np.array([a.as_tuple() for a, _ in pairs])
    g = np.array([b.as_tuple() for _, b in pairs])
    np.testing.assert_allclose(iou_array(p, g), [iou(a, b) for a, b in pairs], atol=1e-12)


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100), st.sampled_from([2, 10]))
def test_energy_score_monotone(e1, e2, m, x):
    lo, hi = sorted((e1, e2))
    assert energy_score(lo, m, x) >= energy_score(hi, m, x)
    assert energy_score(m, m, x) == 1.0


@given(
    st.lists(st.tuples(st.floats(0, 1), st.floats(0.1, 50)), min_size=2, max_size=6),
    st.sampled_from([0.5, 4.0, 1024.0]),
    st.sampled_from(["fpga", "gpu"]),
)
def test_leaderboard_energy_scale_invariance(teams, k, track):
    base = [TeamResult(f"t{i}", (v,), e) for i, (v, e) in enumerate(teams)]
    scaled = [TeamResult(t.team_id, t.ious, t.energy_joules * k) for t in base]
    a = leaderboard(base, track)
    b = leaderboard(scaled, track)
    for ra, rb in zip(a, b):
        assert abs(ra.ts - rb.ts) < 1e-9
    # ordering agrees up to ties
    ts = {r.team: r.ts for r in a}
    order_b = [r.team for r in b]
    assert all(ts[x] >= ts[y] - 1e-9 for x, y in zip(order_b, order_b[1:]))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_sr_monotone(ious, t1, t2):
    lo, hi = sorted((t1, t2))
    assert sr(ious, lo) >= sr(ious, hi)


def test_team_result_validation():
    with pytest.raises(ScoringError):
        TeamResult("x", (0.5,), 0.0)
    with pytest.raises(ScoringError):
        TeamResult("x", (1.5,), 1.0)
    with pytest.raises(ScoringError):
        leaderboard([TeamResult("x", (0.5,), 1.0)], "cpu")


def test_leaderboard_sorted():
    rows = leaderboard([TeamResult("a", (0.5,), 2.0), TeamResult("b", (0.6,), 1.0)], "fpga")
    assert [r.team for r in rows] == ["b", "a"]
    assert rows[0].es > 1 > rows[1].es


def test_csv_ingestion(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("image_id,x_min,y_min,x_max,y_max\n1,0,0,1,1\n2,0,0,0.5,0.5\n")
    gt = read_box_csv(p)
    assert team_ious({"1": Box(0, 0, 1, 1)}, gt) == (1.0, 0.0)
    with pytest.raises(ScoringError):
        team_ious({"9": Box(0, 0, 1, 1)}, gt)
    bad = tmp_path / "bad.csv"
    bad.write_text("image_id,x_min,y_min,x_max,y_max\n1,0,0,x,1\n")
    with pytest.raises(ScoringError, match="bad.csv:2"):
        read_box_csv(bad)
    dup = tmp_path / "dup.csv"
    dup.write_text("image_id,x_min,y_min,x_max,y_max\n1,0,0,1,1\n1,0,0,1,1\n")
    with pytest.raises(ScoringError, match="duplicate"):
        read_box_csv(dup)
