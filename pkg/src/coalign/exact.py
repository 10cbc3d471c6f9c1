"""Exact Shapley values and Shapley interactions by full subset enumeration."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from coalign.errors import ContractViolation, InvalidArgument, ResourceLimitError
from coalign.game import (
    Coalition,
    GameEvaluator,
    all_subsets,
    exclude_then_add,
    mask_dtype,
    reduce_game,
)

DEFAULT_CAP = 20


@dataclass(frozen=True)
class ShapleyResult:
    player: int
    value: float
    evals_used: int


@dataclass(frozen=True)
class InteractionResult:
    coalition: Coalition
    value: float
    method: str
    evals_used: int


def _check_cap(n: int, cap: int):
    if n > cap:
        raise ResourceLimitError(
            f"exact enumeration over {n} players exceeds the cap of {cap}; "
            "use coalign.sampling for games this large"
        )


def shapley_weights(n: int) -> np.ndarray:
    """``p(S) = |S|! (n-|S|-1)! / n!`` indexed by ``|S|`` in ``0..n-1``."""
    return np.array([1.0 / (n * comb(n - 1, s)) for s in range(n)])


def context_weights(m: int) -> np.ndarray:
    """Probability of one particular context of size ``c`` among ``m`` others.

    Sizes are uniform on ``0..m`` and contexts uniform within a size, which is
    exactly the Shapley weight of the ``(m+1)``-player game.
    """
    return np.array([1.0 / ((m + 1) * comb(m, c)) for c in range(m + 1)])


def _size_averaged(marginal: np.ndarray, sizes: np.ndarray, n: int) -> float:
    """``sum_S p(S) m(S)`` written as the mean over sizes of the mean within each size.

    Same value as weighting by ``p(S)``, but a constant marginal comes back
    exactly rather than up to rounding.
    """
    totals = np.bincount(sizes, weights=marginal, minlength=n)
    counts = np.array([comb(n - 1, k) for k in range(n)], dtype=float)
    return float((totals / counts).sum() / n)


def shapley_exact(game: GameEvaluator, i: int, *, cap: int = DEFAULT_CAP) -> ShapleyResult:
    n = game.n
    if not 0 <= i < n:
        raise ContractViolation(f"player {i} outside universe of size {n}")
    _check_cap(n, cap)
    others = [p for p in range(n) if p != i]
    without, sizes = all_subsets(others, n)
    bit = np.array(1, dtype=mask_dtype(n)) << i
    vals = game.evaluate_masks(np.concatenate([without, without | bit]))
    half = len(without)
    marginal = vals[half:] - vals[:half]
    value = _size_averaged(marginal, sizes, n)
    return ShapleyResult(i, value, 2 * half)


def shapley_vector_exact(game: GameEvaluator, *, cap: int = DEFAULT_CAP) -> np.ndarray:
    """All Shapley values from a single pass over the ``2**n`` coalition table."""
    n = game.n
    _check_cap(n, cap)
    if n == 0:
        return np.zeros(0)
    masks, sizes = all_subsets(list(range(n)), n)
    table = game.evaluate_masks(masks)
    phi = np.empty(n)
    for i in range(n):
        without = (masks >> i) & 1 == 0
        s = masks[without]
        phi[i] = _size_averaged(table[s | (1 << i)] - table[s], sizes[without], n)
    return phi


def _check_coalition(game: GameEvaluator, s: Coalition):
    if s.n != game.n:
        raise ContractViolation(f"coalition over {s.n} players, game has {game.n}")
    if len(s) == 0:
        raise InvalidArgument("interaction needs a non-empty coalition")


def shapley_interaction_exact(
    game: GameEvaluator, s: Coalition, *, cap: int = DEFAULT_CAP
) -> InteractionResult:
    """Value of ``[s]`` in the reduced game minus each member's value in its restricted game."""
    _check_coalition(game, s)
    _check_cap(game.n - len(s) + 1, cap)
    reduced = reduce_game(game, s)
    merged = shapley_exact(reduced, reduced.synthetic, cap=cap)
    value, evals = merged.value, merged.evals_used
    for i in s:
        alone = exclude_then_add(game, s, i)
        r = shapley_exact(alone, alone.synthetic, cap=cap)
        value -= r.value
        evals += r.evals_used
    return InteractionResult(s, value, "direct", evals)


def _contexts(game: GameEvaluator, s: Coalition, cap: int):
    _check_coalition(game, s)
    others = [p for p in range(game.n) if p not in s]
    _check_cap(len(others) + 1, cap)
    ctx, sizes = all_subsets(others, game.n)
    return ctx, context_weights(len(others))[sizes]


def interaction_exact_expectation_form(
    game: GameEvaluator, s: Coalition, *, cap: int = DEFAULT_CAP
) -> InteractionResult:
    """Expected ``v(T+S) - sum_i v(T+i) + (|S|-1) v(T)`` over every context ``T``."""
    ctx, w = _contexts(game, s, cap)
    dtype = mask_dtype(game.n)
    rows = [ctx | np.array(s.mask, dtype=dtype)]
    rows += [ctx | (np.array(1, dtype=dtype) << i) for i in s]
    rows.append(ctx)
    vals = game.evaluate_masks(np.concatenate(rows)).reshape(len(rows), -1)
    bracket = vals[0] - vals[1:-1].sum(axis=0) + (len(s) - 1) * vals[-1]
    return InteractionResult(s, float(np.dot(w, bracket)), "expectation_form", vals.size)


def pairwise_interaction_exact(
    game: GameEvaluator, i: int, j: int, *, cap: int = DEFAULT_CAP
) -> InteractionResult:
    """Two-player interaction in its four-term form ``v(T+ij) - v(T+i) - v(T+j) + v(T)``."""
    if i == j:
        raise InvalidArgument("pairwise interaction needs two distinct players")
    s = Coalition.from_members((i, j), game.n)
    ctx, w = _contexts(game, s, cap)
    dtype = mask_dtype(game.n)
    bi = np.array(1, dtype=dtype) << i
    bj = np.array(1, dtype=dtype) << j
    vals = game.evaluate_masks(np.concatenate([ctx | bi | bj, ctx | bi, ctx | bj, ctx]))
    both, only_i, only_j, none = vals.reshape(4, -1)
    return InteractionResult(s, float(np.dot(w, both - only_i - only_j + none)), "pairwise", vals.size)
