import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import decathlon_score_exact
from spotpatch.decathlon import (DecathlonResult, baseline_from_finetune, score,
                                 score_per_footprint)
from spotpatch.exceptions import ArgumentError

maps = st.lists(st.floats(0, 0.999, allow_nan=False), min_size=1, max_size=12)


def test_baseline_examples():
    assert baseline_from_finetune([0.673])[0] == pytest.approx(0.346, abs=1e-12)
    assert baseline_from_finetune([0.5, 1.0]) == [0.0, 1.0]


def test_baseline_out_of_range():
    with pytest.raises(ArgumentError):
        baseline_from_finetune([1.2])


@given(maps)
def test_finetune_against_itself_is_2500(m):
    assert abs(score(m, baseline_from_finetune(m)) - 2500.0) < 1e-9


def test_extremes():
    b = baseline_from_finetune([0.6, 0.8, 0.3])
    assert score([1.0, 1.0, 1.0], b) == 10000.0
    assert score([0.1, 0.5, -0.5], b) == 0.0


def test_baseline_of_one_rejected():
    with pytest.raises(ArgumentError):
        score([1.0], [1.0])


def test_length_mismatch():
    with pytest.raises(ArgumentError):
        score([0.5, 0.5], [0.0])


@given(maps, st.data())
def test_matches_exact_oracle(m, data):
    b = baseline_from_finetune(m)
    s = data.draw(st.lists(st.floats(0, 1), min_size=len(m), max_size=len(m)))
    assert score(s, b) == pytest.approx(float(decathlon_score_exact(s, b)), rel=1e-12, abs=1e-9)


@given(maps, st.data())
def test_monotone_and_order_invariant(m, data):
    b = baseline_from_finetune(m)
    s = data.draw(st.lists(st.floats(0, 1), min_size=len(m), max_size=len(m)))
    k = data.draw(st.integers(0, len(m) - 1))
    bumped = list(s)
    bumped[k] = min(1.0, bumped[k] + 0.1)
    assert score(bumped, b) >= score(s, b)
    perm = np.random.default_rng(len(m)).permutation(len(m))
    assert score([s[i] for i in perm], [b[i] for i in perm]) == pytest.approx(score(s, b), rel=1e-12)
    assert 0.0 <= score(s, b) <= 10000.0


def test_score_per_footprint():
    assert round(score_per_footprint(2500, 9.0)) == 278
    assert score_per_footprint(0.0, 3.0) == 0.0
    assert score_per_footprint(1000, 0.5) == 2 * score_per_footprint(1000, 1.0)
    with pytest.raises(ArgumentError):
        score_per_footprint(1.0, 0.0)


def test_result_compute():
    r = DecathlonResult.compute(["a", "b"], [0.7, 0.6], [0.7, 0.6], 2.0)
    assert r.D == 2 and abs(r.score - 2500) < 1e-9 and r.score_per_footprint == pytest.approx(1250)
    assert r.to_dict()["tasks"] == ["a", "b"]
