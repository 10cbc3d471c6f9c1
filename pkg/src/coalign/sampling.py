"""Monte-Carlo estimates of Shapley values and interactions, plus the instability diagnostic.

Samples are drawn in fixed-size blocks; block ``b`` uses its own generator
seeded from ``(seed, b)``.  Workers take whole blocks and results are merged in
block order, so an estimate does not depend on how many workers produced it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from coalign.errors import ContractViolation, DegenerateInputError, InvalidArgument
from coalign.game import Coalition, GameEvaluator, bool_to_masks, mask_dtype


@dataclass(frozen=True)
class SamplingConfig:
    num_samples: int = 500
    seed: int = 0
    workers: int = 1
    block_size: int = 256

    def __post_init__(self):
        if self.num_samples < 1:
            raise InvalidArgument("num_samples must be >= 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        if self.block_size < 1:
            raise InvalidArgument("block_size must be >= 1")


@dataclass(frozen=True)
class InteractionEstimate:
    mean: float
    variance_of_mean: float
    samples: int
    evals_used: int
    method: str

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance_of_mean)


def derive_seed(seed: int, *key: int) -> int:
    """A child seed for ``key`` under ``seed`` (stable across runs and platforms)."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _run_blocks(cfg: SamplingConfig, draw: Callable[[np.random.Generator, int], np.ndarray]) -> np.ndarray:
    full, rem = divmod(cfg.num_samples, cfg.block_size)
    sizes = [cfg.block_size] * full + ([rem] if rem else [])

    def job(b):
        return draw(_block_rng(cfg.seed, b), sizes[b])

    if cfg.workers == 1 or len(sizes) == 1:
        parts = [job(b) for b in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    return np.concatenate(parts)


def _summarize(draws: np.ndarray, per_sample: int, method: str) -> InteractionEstimate:
    k = len(draws)
    var = float(draws.var(ddof=1)) / k if k > 1 else 0.0
    return InteractionEstimate(float(draws.mean()), var, k, k * per_sample, method)


def random_contexts(rng: np.random.Generator, size: int, m: int) -> np.ndarray:
    """``size`` boolean rows over ``m`` players: size ``c ~ U{0..m}``, then a uniform subset of size ``c``."""
    c = rng.integers(0, m + 1, size=size)
    ranks = rng.random((size, m)).argsort(axis=1).argsort(axis=1)
    return ranks < c[:, None]


def sample_interaction(game: GameEvaluator, s: Coalition, cfg: SamplingConfig) -> InteractionEstimate:
    """Average of ``v(T+S) - sum_i v(T+i) + (|S|-1) v(T)`` over random contexts ``T``.

    Costs ``|S| + 2`` evaluations per sample.
    """
    if s.n != game.n:
        raise ContractViolation(f"coalition over {s.n} players, game has {game.n}")
    if len(s) == 0:
        raise InvalidArgument("interaction needs a non-empty coalition")
    n = game.n
    others = [p for p in range(n) if p not in s]
    members = s.members
    dtype = mask_dtype(n)
    smask = np.array(s.mask, dtype=dtype)
    bits = [np.array(1, dtype=dtype) << i for i in members]

    def draw(rng, size):
        ctx = bool_to_masks(random_contexts(rng, size, len(others)), others, n)
        rows = [ctx | smask] + [ctx | b for b in bits] + [ctx]
        vals = game.evaluate_masks(np.concatenate(rows)).reshape(len(rows), size)
        return vals[0] - vals[1:-1].sum(axis=0) + (len(members) - 1) * vals[-1]

    return _summarize(_run_blocks(cfg, draw), len(members) + 2, "sampled")


def sample_shapley(game: GameEvaluator, i: int, cfg: SamplingConfig) -> InteractionEstimate:
    """Permutation sampling: marginal contribution of ``i`` given its predecessors."""
    n = game.n
    if not 0 <= i < n:
        raise ContractViolation(f"player {i} outside universe of size {n}")
    players = list(range(n))
    bit = np.array(1, dtype=mask_dtype(n)) << i

    def draw(rng, size):
        keys = rng.random((size, n))
        before = bool_to_masks(keys < keys[:, i : i + 1], players, n)
        vals = game.evaluate_masks(np.concatenate([before | bit, before])).reshape(2, size)
        return vals[0] - vals[1]

    return _summarize(_run_blocks(cfg, draw), 2, "sampled")


def instability(values: Sequence[float]) -> float:
    """Mean absolute difference over ordered pairs of repeats, over the mean absolute value."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 2:
        raise InvalidArgument("instability needs at least two values")
    denom = np.abs(v).mean()
    if denom == 0:
        raise DegenerateInputError("all repeated estimates are zero")
    k = len(v)
    pairwise = np.abs(v[:, None] - v[None, :]).sum() / (k * (k - 1))
    return float(pairwise / denom)


@dataclass(frozen=True)
class SweepRow:
    sample_count: int
    repeats: int
    mean_instability: float
    mean_estimate: float
    mean_evals: float
    degenerate: bool = False


SWEEP_COLUMNS = ("sample_count", "repeats", "mean_instability", "mean_estimate", "mean_evals")


def convergence_sweep_many(
    items: Sequence[tuple[GameEvaluator, Coalition]],
    sample_counts: Sequence[int],
    repeats: int,
    seed: int,
    *,
    workers: int = 1,
) -> list[SweepRow]:
    """Instability per budget, averaged over several (game, coalition) items.

    A row is flagged ``degenerate`` when some item's repeats were all zero;
    such items are left out of the instability average.
    """
    if repeats < 2:
        raise InvalidArgument("repeats must be >= 2")
    if not sample_counts:
        raise InvalidArgument("need at least one budget")
    rows = []
    for b, budget in sorted(enumerate(sample_counts), key=lambda t: t[1]):
        inst, means, evals, flagged = [], [], [], False
        for k, (game, s) in enumerate(items):
            ests = [
                sample_interaction(
                    game, s, SamplingConfig(int(budget), derive_seed(seed, b, k, r), workers)
                )
                for r in range(repeats)
            ]
            vals = [e.mean for e in ests]
            means.append(np.mean(vals))
            evals.append(np.mean([e.evals_used for e in ests]))
            try:
                inst.append(instability(vals))
            except DegenerateInputError:
                flagged = True
        rows.append(
            SweepRow(
                int(budget),
                repeats,
                float(np.mean(inst)) if inst else math.nan,
                float(np.mean(means)),
                float(np.mean(evals)),
                flagged,
            )
        )
    return rows


def convergence_sweep(
    game: GameEvaluator,
    s: Coalition,
    sample_counts: Sequence[int],
    repeats: int,
    seed: int,
    *,
    workers: int = 1,
) -> list[SweepRow]:
    return convergence_sweep_many([(game, s)], sample_counts, repeats, seed, workers=workers)


def is_non_increasing(rows: Sequence[SweepRow]) -> bool:
    vals = [r.mean_instability for r in rows]
    return all(b <= a for a, b in zip(vals, vals[1:]))


def format_sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r.sample_count},{r.repeats},{r.mean_instability:.10g},{r.mean_estimate:.10g},{r.mean_evals:.10g}"
        )
    return "\n".join(lines) + "\n"
