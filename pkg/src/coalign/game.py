"""Players, coalitions and cooperative games with evaluation accounting.

A coalition over ``n`` players is stored as an integer bitmask, bit ``k`` set
meaning player ``k`` participates.  Engines that evaluate many coalitions at
once pass numpy arrays of masks (``int64`` for up to 62 players, Python ints
in an object array beyond that).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from coalign.errors import ContractViolation, InvalidArgument

MAX_INT64_PLAYERS = 62


def mask_dtype(n: int):
    return np.int64 if n <= MAX_INT64_PLAYERS else object


@dataclass(frozen=True)
class Coalition:
    """A subset of the players ``{0, ..., n-1}``."""

    mask: int
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ContractViolation(f"universe size must be >= 0, got {self.n}")
        if self.mask < 0 or self.mask >> self.n:
            raise ContractViolation(
                f"coalition mask {self.mask:#x} has members outside a universe of {self.n}"
            )

    @classmethod
    def from_members(cls, members: Iterable[int], n: int) -> "Coalition":
        mask = 0
        for m in members:
            m = int(m)
            if not 0 <= m < n:
                raise ContractViolation(f"player {m} outside universe of size {n}")
            if mask >> m & 1:
                raise ContractViolation(f"duplicate member {m}")
            mask |= 1 << m
        return cls(mask, n)

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(0, n)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.n) if self.mask >> k & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __contains__(self, player: int) -> bool:
        return 0 <= player < self.n and bool(self.mask >> player & 1)

    def _check_same(self, other: "Coalition"):
        if other.n != self.n:
            raise ContractViolation(f"universe mismatch: {self.n} vs {other.n}")

    def union(self, other: "Coalition") -> "Coalition":
        self._check_same(other)
        return Coalition(self.mask | other.mask, self.n)

    def difference(self, other: "Coalition") -> "Coalition":
        self._check_same(other)
        return Coalition(self.mask & ~other.mask, self.n)

    def complement(self) -> "Coalition":
        return Coalition(((1 << self.n) - 1) & ~self.mask, self.n)

    def with_player(self, player: int) -> "Coalition":
        if not 0 <= player < self.n:
            raise ContractViolation(f"player {player} outside universe of size {self.n}")
        return Coalition(self.mask | (1 << player), self.n)

    def to_bool(self) -> np.ndarray:
        return np.array([self.mask >> k & 1 for k in range(self.n)], dtype=bool)

    def __repr__(self) -> str:
        return f"Coalition({set(self.members) or '{}'}, n={self.n})"


def grand_coalition(n: int) -> Coalition:
    if n < 0:
        raise InvalidArgument("player count must be >= 0")
    return Coalition((1 << n) - 1, n)


def masks_to_bool(masks: np.ndarray, n: int) -> np.ndarray:
    """Expand a 1-d array of masks to a ``(len(masks), n)`` boolean matrix."""
    masks = np.asarray(masks)
    if masks.dtype == object:
        return np.array([[m >> k & 1 for k in range(n)] for m in masks], dtype=bool).reshape(-1, n)
    shifts = np.arange(n, dtype=np.int64)
    return ((masks[:, None] >> shifts[None, :]) & 1).astype(bool)


def bool_to_masks(include: np.ndarray, players: Sequence[int], n: int) -> np.ndarray:
    """Collapse boolean rows (one column per entry of ``players``) into masks over ``n``."""
    include = np.asarray(include, dtype=bool)
    if mask_dtype(n) is object:
        weights = [1 << int(p) for p in players]
        return np.array(
            [sum(w for w, b in zip(weights, row) if b) for row in include], dtype=object
        )
    weights = np.left_shift(np.int64(1), np.asarray(players, dtype=np.int64))
    return (include.astype(np.int64) * weights[None, :]).sum(axis=1)


def scatter_bits(local: np.ndarray, players: Sequence[int], n: int) -> np.ndarray:
    """Map bit ``k`` of each local mask to bit ``players[k]`` of a mask over ``n``."""
    dtype = mask_dtype(n)
    local = np.asarray(local, dtype=dtype)
    out = np.zeros(local.shape, dtype=dtype)
    for k, p in enumerate(players):
        out = out | (((local >> k) & 1) << int(p))
    return out


def all_subsets(players: Sequence[int], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Every subset of ``players`` as masks over ``n``, with subset sizes.

    Order is the binary counter over the positions in ``players``.
    """
    m = len(players)
    local = np.arange(1 << m, dtype=np.int64)
    sizes = np.zeros(1 << m, dtype=np.int64)
    for k in range(m):
        sizes += (local >> k) & 1
    return scatter_bits(local, players, n), sizes


class GameEvaluator:
    """A characteristic function ``v`` over ``n`` players with an evaluation counter.

    Pass ``value_fn`` (Coalition -> float), ``batch_fn`` (mask array -> float
    array), or both.  The counter is incremented once per coalition scored,
    whichever entry point is used, and is safe to update from several threads.
    """

    def __init__(
        self,
        n: int,
        value_fn: Callable[[Coalition], float] | None = None,
        *,
        batch_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        name: str = "game",
    ):
        if value_fn is None and batch_fn is None:
            raise InvalidArgument("need value_fn or batch_fn")
        if n < 0:
            raise InvalidArgument("player count must be >= 0")
        self.n = n
        self.name = name
        self._value_fn = value_fn
        self._batch_fn = batch_fn
        self._count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        return self._count

    def _charge(self, k: int):
        with self._lock:
            self._count += k

    def _check_masks(self, masks: np.ndarray):
        if masks.size == 0:
            return
        if masks.dtype == object:
            bad = any(m < 0 or m >> self.n for m in masks)
        else:
            bad = bool(masks.min() < 0 or (masks.max() >> self.n) != 0)
        if bad:
            raise ContractViolation(f"coalition outside universe of size {self.n}")

    def evaluate(self, s: Coalition) -> float:
        if s.n != self.n:
            raise ContractViolation(f"coalition over {s.n} players, game has {self.n}")
        return float(self.evaluate_masks(np.array([s.mask], dtype=mask_dtype(self.n)))[0])

    def evaluate_masks(self, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=mask_dtype(self.n)).reshape(-1)
        self._check_masks(masks)
        out = self._raw(masks)
        self._charge(len(masks))
        return out

    def _raw(self, masks: np.ndarray) -> np.ndarray:
        if self._batch_fn is not None:
            return np.asarray(self._batch_fn(masks), dtype=float).reshape(-1)
        return np.array([self._value_fn(Coalition(int(m), self.n)) for m in masks], dtype=float)

    __call__ = evaluate

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, n={self.n})"


def evaluate(game: GameEvaluator, s: Coalition) -> float:
    return game.evaluate(s)


class ReducedGame(GameEvaluator):
    """A game over ``others`` plus one synthetic player standing for ``group``.

    Reduced player ``k < len(others)`` is base player ``others[k]``; the last
    index is the merged player.  Evaluations are forwarded to (and counted by)
    the base game, so the reduced game holds no mutable state of its own.
    Base players in neither ``others`` nor ``group`` are always absent.
    """

    def __init__(self, base: GameEvaluator, others: Sequence[int], group: Coalition):
        self.base = base
        self.others = tuple(int(p) for p in others)
        self.merged = group
        super().__init__(len(self.others) + 1, batch_fn=self._forward, name=f"reduced({base.name})")

    @property
    def synthetic(self) -> int:
        return len(self.others)

    @property
    def player_map(self) -> tuple:
        return self.others + (self.merged.members,)

    @property
    def eval_count(self) -> int:
        return self.base.eval_count

    def _charge(self, k: int):
        pass

    def expand(self, masks: np.ndarray) -> np.ndarray:
        n = self.base.n
        out = scatter_bits(masks, self.others, n)
        merged = (np.asarray(masks, dtype=mask_dtype(n)) >> self.synthetic) & 1
        if mask_dtype(n) is object:
            return np.array([o | (self.merged.mask if b else 0) for o, b in zip(out, merged)], dtype=object)
        return out | (merged * np.int64(self.merged.mask))

    def _forward(self, masks: np.ndarray) -> np.ndarray:
        return self.base.evaluate_masks(self.expand(masks))


def reduce_game(game: GameEvaluator, s: Coalition) -> ReducedGame:
    """Replace the members of ``s`` by one hypothetical player ``[s]``."""
    if s.n != game.n:
        raise ContractViolation("coalition and game universes differ")
    if len(s) == 0:
        raise InvalidArgument("cannot merge an empty coalition")
    others = [p for p in range(game.n) if p not in s]
    return ReducedGame(game, others, s)


def exclude_then_add(game: GameEvaluator, s: Coalition, i: int) -> ReducedGame:
    """The game over ``N \\ s`` plus player ``i``; the rest of ``s`` never plays.

    Player ``i`` sits at the last index of the returned game.
    """
    if s.n != game.n:
        raise ContractViolation("coalition and game universes differ")
    if i not in s:
        raise InvalidArgument(f"player {i} is not a member of {s}")
    others = [p for p in range(game.n) if p not in s]
    return ReducedGame(game, others, Coalition(1 << i, game.n))


# Reference games used by the tests and the harness.

def additive_game(weights: Sequence[float], name: str = "additive") -> GameEvaluator:
    w = np.asarray(weights, dtype=float)
    n = len(w)

    def batch(masks):
        return masks_to_bool(masks, n) @ w if n else np.zeros(len(masks))

    return GameEvaluator(n, batch_fn=batch, name=name)


def table_game(values: np.ndarray, name: str = "table") -> GameEvaluator:
    """A game given by its full table of ``2**n`` coalition values, indexed by mask."""
    values = np.asarray(values, dtype=float)
    n = int(np.log2(len(values)))
    if len(values) != 1 << n:
        raise InvalidArgument("table length must be a power of two")
    return GameEvaluator(n, batch_fn=lambda masks: values[masks.astype(np.int64)], name=name)


def random_game(n: int, rng: np.random.Generator, *, zero_empty: bool = False) -> GameEvaluator:
    values = rng.normal(size=1 << n)
    if zero_empty:
        values[0] = 0.0
    return table_game(values, name=f"random{n}")


def unanimity_game(n: int, required: Sequence[int], name: str = "unanimity") -> GameEvaluator:
    """``v(S) = 1`` iff ``S`` contains every player in ``required``."""
    need = Coalition.from_members(required, n).mask
    return GameEvaluator(
        n, batch_fn=lambda masks: ((masks & need) == need).astype(float), name=name
    )


def glove_game() -> GameEvaluator:
    """Three players; ``v(S) = 1`` iff ``S`` holds player 2 and one of players 0, 1."""

    def batch(masks):
        return (((masks & 4) != 0) & ((masks & 3) != 0)).astype(float)

    return GameEvaluator(3, batch_fn=batch, name="glove")
