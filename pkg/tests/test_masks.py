import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beagle.masks import (inverse_block_mask, render, simulation_mask, simulation_mask_step,
                          strict_causal_mask, window_plan)


def windows_as_sets(plan):
    return [set(w.queries) for w in plan.windows]


def start_oracle(T, k, eps):
    """Window start of every position by direct arithmetic."""
    out = {}
    for q in range(1, T + 1):
        out[q] = 0 if q <= eps else eps + ((q - eps - 1) // k) * k
    return out


def inverse_oracle(T, k, eps):
    st_ = start_oracle(T, k, eps)
    return {(i, j) for i in range(1, T + 1) for j in range(1, T + 1)
            if j < i and not (st_[i] < j <= st_[i] + k)}


def simulation_oracle(T, k, eps, step):
    st_ = start_oracle(T, k, eps)
    return {(i, j) for i in range(1, T + 1) for j in range(1, T + 1)
            if j < i and j <= st_[i] + step - 1}


def as_set(mask):
    return {(i + 1, j + 1) for i, j in zip(*np.nonzero(mask))}


# -- strict causal --------------------------------------------------------------------

def test_strict_causal_t1_is_empty():
    assert not strict_causal_mask(1).any()


def test_strict_causal_t3():
    assert as_set(strict_causal_mask(3)) == {(2, 1), (3, 1), (3, 2)}


def test_strict_causal_row_counts():
    m = strict_causal_mask(32)
    assert m.sum(axis=1).tolist() == list(range(32))


# -- window plans ------------------------------------------------------------------------

def test_window_plan_with_offset():
    assert windows_as_sets(window_plan(10, 3, 1)) == [{1}, {2, 3, 4}, {5, 6, 7}, {8, 9, 10}]


def test_window_plan_exact_tiling():
    assert windows_as_sets(window_plan(4, 2, 0)) == [{1, 2}, {3, 4}]


def test_window_plan_k1_singletons():
    assert windows_as_sets(window_plan(5, 1, 0)) == [{i} for i in range(1, 6)]


def test_window_plan_rejects_bad_offset():
    with pytest.raises(ValueError):
        window_plan(10, 3, 3)


@given(st.integers(1, 64), st.integers(1, 9), st.data())
def test_window_plan_partitions_positions(T, k, data):
    eps = data.draw(st.integers(0, k - 1))
    plan = window_plan(T, k, eps)
    sets = windows_as_sets(plan)
    assert sum(len(s) for s in sets) == T
    assert set().union(*sets) == set(range(1, T + 1))
    assert all(len(s) == k for s in sets[1:-1])


# -- inverse block ---------------------------------------------------------------------------

def test_inverse_block_small():
    m = inverse_block_mask(window_plan(4, 2, 0))
    assert render(m).splitlines() == ["....", "....", "xx..", "xx.."]


def test_inverse_block_k1_is_strict_causal():
    assert np.array_equal(inverse_block_mask(window_plan(17, 1, 0)), strict_causal_mask(17))


def test_inverse_block_matches_set_builder_exhaustively():
    for T in range(1, 33):
        for k in range(1, 9):
            for eps in range(k):
                assert as_set(inverse_block_mask(window_plan(T, k, eps))) == inverse_oracle(T, k, eps), (T, k, eps)


# -- simulation steps ----------------------------------------------------------------------------

def test_simulation_steps_first_window():
    plan = window_plan(3, 3, 0)
    m = inverse_block_mask(plan)
    assert not m[0].any()
    simulation_mask_step(m, plan, 2)
    assert np.nonzero(m[1])[0].tolist() == [0]
    simulation_mask_step(m, plan, 3)
    assert np.nonzero(m[2])[0].tolist() == [0, 1]


def test_simulation_adds_one_key_per_window_and_step():
    plan = window_plan(20, 4, 1)
    m = inverse_block_mask(plan)
    for i in range(2, 5):
        before = m.copy()
        simulation_mask_step(m, plan, i)
        flipped = m & ~before
        assert not (before & ~m).any()
        for w in plan.windows:
            rows = flipped[w.start:w.start + w.size]
            # queries n+i .. end gain exactly one key each: slot n+i-1
            assert rows.sum() == max(0, w.size - i + 1)
            assert all(np.nonzero(r)[0].tolist() == [w.start + i - 2] for r in rows[i - 1:])


def test_full_unroll_is_strict_causal_inside_window():
    plan = window_plan(12, 4, 0)
    m = simulation_mask(plan, 4)
    for w in plan.windows:
        sl = slice(w.start, w.start + w.size)
        assert np.array_equal(m[sl, sl], strict_causal_mask(w.size))


def test_simulation_step_range_checked():
    plan = window_plan(8, 3, 0)
    with pytest.raises(ValueError):
        simulation_mask_step(inverse_block_mask(plan), plan, 1)
    with pytest.raises(ValueError):
        simulation_mask_step(inverse_block_mask(plan), plan, 4)


def test_simulation_matches_set_builder_exhaustively():
    for T in range(1, 33):
        for k in range(1, 9):
            for eps in range(k):
                plan = window_plan(T, k, eps)
                m = inverse_block_mask(plan)
                prev = m.copy()
                for step in range(2, k + 1):
                    simulation_mask_step(m, plan, step)
                    assert as_set(m) == simulation_oracle(T, k, eps, step), (T, k, eps, step)
                    assert np.all(m >= prev) and not np.any(np.triu(m))
                    prev = m.copy()


def test_render_single_position():
    assert render(simulation_mask(window_plan(1, 1, 0), 1)) == "."
