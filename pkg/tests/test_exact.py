import itertools
import math

import numpy as np
import pytest

from coalign.errors import InvalidArgument, ResourceLimitError
from coalign.exact import (
    interaction_exact_expectation_form,
    pairwise_interaction_exact,
    shapley_exact,
    shapley_interaction_exact,
    shapley_vector_exact,
)
from coalign.game import Coalition, additive_game, glove_game, random_game, table_game, unanimity_game


def permutation_shapley(game):
    """Oracle: average marginal contribution over all player orders."""
    n = game.n
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for order in perms:
        mask = 0
        for p in order:
            before = game.evaluate_masks([mask])[0]
            mask |= 1 << p
            phi[p] += game.evaluate_masks([mask])[0] - before
    return phi / len(perms)


def test_additive_shapley_equals_weights():
    assert np.allclose(shapley_vector_exact(additive_game([1, 2, 3])), [1, 2, 3], atol=1e-12)


def test_glove_game():
    phi = [shapley_exact(glove_game(), i).value for i in range(3)]
    assert np.allclose(phi, [1 / 6, 1 / 6, 2 / 3], atol=1e-12)
    assert np.allclose(phi, permutation_shapley(glove_game()), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 4, 6])
def test_matches_permutation_oracle(n):
    g = random_game(n, np.random.default_rng(n))
    assert np.allclose(shapley_vector_exact(g), permutation_shapley(g), atol=1e-12)


def test_efficiency():
    values = np.random.default_rng(3).normal(size=1 << 7)
    assert math.isclose(shapley_vector_exact(table_game(values)).sum(), values[-1] - values[0], abs_tol=1e-12)


def test_eval_budget():
    g = random_game(5, np.random.default_rng(0))
    r = shapley_exact(g, 2)
    assert r.evals_used == 2 ** 5 and r.evals_used <= 2 * 2 ** 5


def test_cap():
    with pytest.raises(ResourceLimitError, match="sampling"):
        shapley_exact(additive_game(np.ones(21)), 0)
    with pytest.raises(ResourceLimitError):
        shapley_exact(additive_game(np.ones(5)), 0, cap=4)


def test_and_game_interaction():
    g = unanimity_game(2, [0, 1])
    s = Coalition.from_members([0, 1], 2)
    assert shapley_interaction_exact(g, s).value == pytest.approx(1.0, abs=1e-12)
    assert interaction_exact_expectation_form(g, s).value == pytest.approx(1.0, abs=1e-12)


def test_and_game_with_dummies():
    g = unanimity_game(4, [1, 3])
    assert pairwise_interaction_exact(g, 1, 3).value == pytest.approx(1.0, abs=1e-12)


def test_additive_interaction_is_exactly_zero():
    g = additive_game([3, -1, 4, 1, -5, 9])
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = Coalition.from_members(rng.choice(6, size=rng.integers(1, 5), replace=False), 6)
        assert shapley_interaction_exact(g, s).value == 0.0
        assert interaction_exact_expectation_form(g, s).value == 0.0
    assert pairwise_interaction_exact(g, 0, 4).value == 0.0


def test_direct_equals_expectation_form():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 11))
        g = random_game(n, rng)
        s = Coalition.from_members(rng.choice(n, size=rng.integers(1, min(4, n) + 1), replace=False), n)
        a = shapley_interaction_exact(g, s)
        b = interaction_exact_expectation_form(g, s)
        assert (a.method, b.method) == ("direct", "expectation_form")
        worst = max(worst, abs(a.value - b.value))
    assert worst < 1e-9


def test_n8_size3():
    g = random_game(8, np.random.default_rng(8))
    s = Coalition.from_members([0, 4, 7], 8)
    assert shapley_interaction_exact(g, s).value == pytest.approx(interaction_exact_expectation_form(g, s).value, abs=1e-9)


def test_pairwise_symmetric_under_swap():
    values = np.random.default_rng(2).normal(size=16)
    g = table_game(values)
    assert pairwise_interaction_exact(g, 1, 2).value == pytest.approx(pairwise_interaction_exact(g, 2, 1).value, abs=1e-14)
    with pytest.raises(InvalidArgument):
        pairwise_interaction_exact(g, 1, 1)


def test_singleton_interaction_is_shapley_value_in_restricted_game():
    # With |S| = 1 the interaction is phi([S]) - phi(i) on the same game: zero.
    g = random_game(5, np.random.default_rng(4))
    assert shapley_interaction_exact(g, Coalition.from_members([2], 5)).value == pytest.approx(0.0, abs=1e-12)


def test_empty_coalition_rejected():
    with pytest.raises(InvalidArgument):
        shapley_interaction_exact(additive_game([1, 2]), Coalition.empty(2))
