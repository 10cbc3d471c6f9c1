import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coalign.errors import ContractViolation, InvalidArgument
from coalign.game import (
    Coalition,
    GameEvaluator,
    additive_game,
    all_subsets,
    bool_to_masks,
    exclude_then_add,
    grand_coalition,
    masks_to_bool,
    reduce_game,
    scatter_bits,
    table_game,
)


def test_grand_coalition_sizes():
    assert grand_coalition(0).members == ()
    assert grand_coalition(3).members == (0, 1, 2)
    assert len(grand_coalition(64)) == 64


def test_coalition_rejects_bad_members():
    with pytest.raises(ContractViolation):
        Coalition.from_members([3], 3)
    with pytest.raises(ContractViolation):
        Coalition.from_members([1, 1], 3)
    with pytest.raises(ContractViolation):
        Coalition(8, 3)


@given(st.sets(st.integers(0, 69)), st.sets(st.integers(0, 69)))
def test_coalition_set_algebra(a, b):
    n = 70
    ca, cb = Coalition.from_members(a, n), Coalition.from_members(b, n)
    assert set(ca.union(cb).members) == a | b
    assert set(ca.difference(cb).members) == a - b
    assert set(ca.complement().members) == set(range(n)) - a
    assert len(ca) == len(a)


def test_additive_value():
    g = additive_game([1, 2, 3])
    assert g(Coalition.from_members([0, 2], 3)) == 4.0


def test_purity_and_counter():
    g = table_game(np.random.default_rng(0).normal(size=16))
    s = Coalition.from_members([1, 3], 4)
    assert g(s) == g(s)
    g2 = additive_game([1.0, 2.0, 3.0])
    for k in range(5):
        g2(Coalition(k, 3))
    assert g2.eval_count == 5


def test_counter_is_thread_safe():
    g = additive_game(np.ones(6))
    masks = np.arange(64)

    def work():
        for _ in range(50):
            g.evaluate_masks(masks)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert g.eval_count == 8 * 50 * 64


def test_mask_outside_universe_rejected():
    with pytest.raises(ContractViolation):
        additive_game([1, 2]).evaluate_masks([4])


def test_reduced_game():
    base = additive_game([1, 2, 3])
    s = Coalition.from_members([1, 2], 3)
    red = reduce_game(base, s)
    assert red.n == 2
    assert red.evaluate_masks([1 << red.synthetic])[0] == base(s)
    assert red.evaluate_masks([0b11])[0] == 6.0
    with pytest.raises(InvalidArgument):
        reduce_game(base, Coalition.empty(3))


def test_reduced_game_counts_on_base_only():
    base = additive_game([1, 2, 3])
    red = reduce_game(base, Coalition.from_members([0, 1], 3))
    red.evaluate_masks([0, 1, 2, 3])
    assert base.eval_count == 4 and red.eval_count == 4


def test_restricted_game():
    base = table_game(np.arange(4.0) ** 2)
    s = Coalition.from_members([0, 1], 2)
    r = exclude_then_add(base, s, 0)
    assert r.n == 1
    assert r.evaluate_masks([1])[0] == base(Coalition.from_members([0], 2))
    assert r.evaluate_masks([0])[0] == base(Coalition.empty(2))
    with pytest.raises(InvalidArgument):
        exclude_then_add(base, Coalition.from_members([1], 2), 0)


def test_large_universe_uses_python_ints():
    n = 70
    g = additive_game(np.arange(n, dtype=float))
    s = Coalition.from_members([0, 65, 69], n)
    assert g(s) == 134.0
    red = reduce_game(g, s)
    assert red.evaluate_masks(np.array([1 << red.synthetic], dtype=object))[0] == 134.0


@given(st.integers(1, 8), st.integers(0, 2**16))
def test_mask_bool_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    masks = rng.integers(0, 1 << n, size=10)
    bools = masks_to_bool(masks, n)
    assert (bool_to_masks(bools, range(n), n) == masks).all()


def test_all_subsets_and_scatter():
    masks, sizes = all_subsets([1, 3], 4)
    assert sorted(masks.tolist()) == [0, 2, 8, 10]
    assert sizes.tolist() == [bin(m).count("1") for m in masks]
    assert scatter_bits(np.array([0b11]), [1, 3], 4).tolist() == [10]


def test_evaluator_needs_a_function():
    with pytest.raises(InvalidArgument):
        GameEvaluator(3)
