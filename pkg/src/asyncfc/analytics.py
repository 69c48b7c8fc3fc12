"""Closed-form latencies for independent call sets and theorem checkers.

An independent set is a list of ``(g_ms, e_ms)`` pairs: generation latency and
execution time of each call. Three execution models are compared:

* sync: generate, execute, repeat. ``sum(g) + sum(e)``
* sync-parallel: generate everything, then execute concurrently.
  ``sum(g) + max(e)``
* async with LPT: calls are generated in decreasing ``e`` order and each
  starts executing as soon as it is generated.
  ``max_i(sum_{j<=i} g_j + e_i)``
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

Pair = tuple[float, float]


class AnalyticsError(ValueError):
    pass


class DegenerateConfig(AnalyticsError):
    pass


class TooLarge(AnalyticsError):
    pass


def _check(items: Sequence[Pair]) -> None:
    if not items:
        raise AnalyticsError("independent set must be nonempty")
    for g, e in items:
        if not (g > 0 and e > 0):
            raise AnalyticsError(f"generation and execution times must be positive, got {(g, e)}")


def latency_sync(items: Sequence[Pair]) -> float:
    _check(items)
    return sum(g for g, _ in items) + sum(e for _, e in items)


def latency_sync_parallel(items: Sequence[Pair]) -> float:
    _check(items)
    return sum(g for g, _ in items) + max(e for _, e in items)


def lpt_order(items: Sequence[Pair]) -> list[int]:
    """Indices in generation order: decreasing e, then increasing g, then index."""
    return sorted(range(len(items)), key=lambda i: (-items[i][1], items[i][0], i))


def order_latency(items: Sequence[Pair], order: Sequence[int]) -> float:
    """Makespan when calls are generated back to back in ``order``."""
    t = 0.0
    worst = 0.0
    for i in order:
        g, e = items[i]
        t += g
        worst = max(worst, t + e)
    return worst


def completion_times(items: Sequence[Pair], order: Sequence[int]) -> list[float]:
    t = 0.0
    out = [0.0] * len(items)
    for i in order:
        t += items[i][0]
        out[i] = t + items[i][1]
    return out


def latency_async_lpt(items: Sequence[Pair]) -> float:
    _check(items)
    return order_latency(items, lpt_order(items))


@dataclass(frozen=True)
class LatencyTriple:
    l_sync: float
    l_sync_parallel: float
    l_async: float


def latencies(items: Sequence[Pair]) -> LatencyTriple:
    return LatencyTriple(latency_sync(items), latency_sync_parallel(items), latency_async_lpt(items))


@dataclass
class Theorem61Report:
    holds: bool
    triple: LatencyTriple
    degenerate: bool = False


def check_theorem_61(items: Sequence[Pair]) -> Theorem61Report:
    """Async <= sync-parallel < sync. A single call makes the strict part vacuous."""
    t = latencies(items)
    if len(items) == 1:
        holds = t.l_async == t.l_sync_parallel == t.l_sync
        return Theorem61Report(holds, t, degenerate=True)
    return Theorem61Report(t.l_async <= t.l_sync_parallel < t.l_sync, t)


@dataclass(frozen=True)
class SpeedupEstimate:
    mean_e: float
    mean_g: float
    sigma_e: float
    n: int
    predicted_ratio: float
    max_e_approx: float


def speedup_estimate(items: Sequence[Pair]) -> SpeedupEstimate:
    """Large-n approximation of sync/async speedup from the set's moments."""
    _check(items)
    g = np.array([p[0] for p in items], dtype=float)
    e = np.array([p[1] for p in items], dtype=float)
    n = len(items)
    sigma = float(e.std())
    max_e = float(e.mean()) + sigma * math.sqrt(2 * math.log(n)) if n >= 2 else float(e.mean())
    return SpeedupEstimate(
        mean_e=float(e.mean()),
        mean_g=float(g.mean()),
        sigma_e=sigma,
        n=n,
        predicted_ratio=1.0 + float(e.mean()) / float(g.mean()),
        max_e_approx=max_e,
    )


ASYMPTOTIC_MIN_N = 1000
CLIP_FLOOR_MS = 0.01


@dataclass
class Theorem62Report:
    n: int
    e_mean: float
    e_sigma: float
    g_mean: float
    trials: int
    measured_ratio: float
    predicted_ratio: float
    rel_error: float
    below_asymptotic: bool
    clipped_fraction: float

    def to_json(self) -> dict:
        return asdict(self)


def check_theorem_62(
    n: int,
    e_mean: float,
    e_sigma: float,
    g_mean: float,
    trials: int = 20,
    seed: int = 0,
) -> Theorem62Report:
    """Monte-Carlo check of the ``1 + E/G`` speedup approximation.

    Execution times are drawn from Normal(e_mean, e_sigma) clipped at a small
    positive floor; generation time is fixed at ``g_mean`` for every call.
    """
    if n < 1 or trials < 1:
        raise AnalyticsError("n and trials must be positive")
    rng = np.random.default_rng(seed)
    ratios = []
    clipped = 0
    for _ in range(trials):
        e = rng.normal(e_mean, e_sigma, size=n)
        low = e < CLIP_FLOOR_MS
        clipped += int(low.sum())
        e[low] = CLIP_FLOOR_MS
        items = [(g_mean, x) for x in e.tolist()]
        ratios.append(latency_sync(items) / latency_async_lpt(items))
    frac = clipped / (n * trials)
    if frac > 0.01:
        raise DegenerateConfig(f"{frac:.1%} of execution samples clipped at {CLIP_FLOOR_MS} ms")
    measured = float(np.mean(ratios))
    predicted = 1.0 + e_mean / g_mean
    return Theorem62Report(
        n=n,
        e_mean=e_mean,
        e_sigma=e_sigma,
        g_mean=g_mean,
        trials=trials,
        measured_ratio=measured,
        predicted_ratio=predicted,
        rel_error=abs(measured - predicted) / predicted,
        below_asymptotic=n < ASYMPTOTIC_MIN_N,
        clipped_fraction=frac,
    )


@dataclass
class Theorem63Report:
    lpt_latency: float
    best_latency: float
    witness_order: list = field(default_factory=list)
    exhaustive: bool = True

    @property
    def holds(self) -> bool:
        # float summation order differs between the two paths
        return self.lpt_latency <= self.best_latency * (1 + 1e-12)


def _all_orders_min(items: Sequence[Pair]) -> tuple[float, list[int]]:
    n = len(items)
    g = np.array([p[0] for p in items])
    e = np.array([p[1] for p in items])
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    spans = np.max(np.cumsum(g[perms], axis=1) + e[perms], axis=1)
    k = int(np.argmin(spans))
    return float(spans[k]), perms[k].tolist()


def check_theorem_63(
    items: Sequence[Pair],
    max_exhaustive_n: int = 8,
    sample: Optional[int] = None,
    seed: int = 0,
) -> Theorem63Report:
    """Compare the LPT makespan against the best generation order.

    Exhaustive over all ``n!`` orders up to ``max_exhaustive_n``; beyond that a
    ``sample`` of random orders is required.
    """
    _check(items)
    lpt = latency_async_lpt(items)
    if len(items) <= max_exhaustive_n:
        best, order = _all_orders_min(items)
        return Theorem63Report(lpt, best, order, exhaustive=True)
    if not sample:
        raise TooLarge(f"n={len(items)} exceeds exhaustive bound {max_exhaustive_n}; pass sample=")
    rng = np.random.default_rng(seed)
    best, best_order = lpt, lpt_order(items)
    for _ in range(sample):
        order = rng.permutation(len(items)).tolist()
        span = order_latency(items, order)
        if span < best:
            best, best_order = span, order
    return Theorem63Report(lpt, best, best_order, exhaustive=False)


def adjacent_swap_gain(items: Sequence[Pair], order: Sequence[int], i: int) -> float:
    """Makespan change from swapping positions ``i`` and ``i+1`` of ``order``."""
    swapped = list(order)
    swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
    return order_latency(items, swapped) - order_latency(items, order)


def random_set(rng: np.random.Generator, n: int, low: float = 1.0, high: float = 1000.0) -> list[Pair]:
    g = rng.uniform(low, high, size=n)
    e = rng.uniform(low, high, size=n)
    return list(zip(g.tolist(), e.tolist()))
