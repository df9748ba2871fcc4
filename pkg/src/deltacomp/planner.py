"""Bit-budget planning: how many singular-vector ranks fit at which bit
width for a target compression ratio, the single/double/triple precision
schedule constructions, and a genetic search over per-tier rank counts.

The governing identity: storing ranks [r_begin, r_end) of the factors at
k bits costs k * (r_end - r_begin) * (h_out + h_in) payload bits, and the
total budget for ratio alpha is 16 * alpha * h_out * h_in bits (the delta
itself is 16-bit storage).
"""

import math

import numpy as np

from .errors import BUDGET_EXHAUSTED, UsageError
from .numerics import Rng
from dataclasses import dataclass, field

__all__ = [
    "Allocation",
    "GaParams",
    "GaResult",
    "PrecisionSchedule",
    "ScheduleGroup",
    "allocation_schedule",
    "avg_bitwidth",
    "budget_ranks",
    "genetic_search",
    "make_schedule",
    "parse_spec",
]

SPEC_BITS = (16, 8, 4, 3, 2, 1)
TIER_BITS = (16, 8, 4, 3, 2)  # search space tiers, highest precision first

# Rank prefixes for the multi-precision constructions: the first precision
# covers ranks [0, 2) and, in the triple form, the second covers [2, 34).
DEFAULT_PREFIX_1 = 2
DEFAULT_PREFIX_2 = 34


@dataclass(frozen=True)
class ScheduleGroup:
    bits: int
    r_begin: int
    r_end: int

    @property
    def width(self) -> int:
        return self.r_end - self.r_begin


@dataclass(frozen=True)
class PrecisionSchedule:
    """Ordered (bits, rank range) groups under a bit budget.

    Ranges are contiguous from 0 and bit widths strictly decrease, so
    leading singular vectors always get at least as many bits as trailing
    ones.
    """

    groups: tuple[ScheduleGroup, ...]
    alpha: float

    def __post_init__(self):
        prev_end = 0
        prev_bits = None
        for g in self.groups:
            if g.bits not in SPEC_BITS:
                raise UsageError(f"unsupported bit width {g.bits}")
            if g.r_begin != prev_end or g.r_end <= g.r_begin:
                raise UsageError(f"group ranges must be contiguous: {self.groups}")
            if prev_bits is not None and g.bits >= prev_bits:
                raise UsageError("bit widths must strictly decrease across groups")
            prev_end = g.r_end
            prev_bits = g.bits

    @property
    def total_ranks(self) -> int:
        return self.groups[-1].r_end if self.groups else 0

    def payload_bits(self, h_out: int, h_in: int) -> int:
        """Code bits for factors of one h_out x h_in matrix."""
        return sum(g.bits * g.width * (h_out + h_in) for g in self.groups)

    def budget_bits(self, h_out: int, h_in: int) -> float:
        return 16.0 * self.alpha * h_out * h_in

    def fits(self, h_out: int, h_in: int) -> bool:
        return self.payload_bits(h_out, h_in) <= self.budget_bits(h_out, h_in) * (
            1 + 1e-12
        )


def budget_ranks(bits: int, alpha: float, h_out: int, h_in: int) -> int:
    """Ranks affordable at ``bits`` under the alpha budget (floored)."""
    if bits < 1:
        raise UsageError(f"bits must be >= 1, got {bits}")
    if not 0 <= alpha <= 1:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    if h_out < 1 or h_in < 1:
        raise UsageError(f"dimensions must be >= 1, got {h_out}x{h_in}")
    return int(math.floor(16.0 * alpha * h_out * h_in / (bits * (h_out + h_in))))


def parse_spec(spec: str) -> tuple[int, ...]:
    """Parse a precision spec string like ``"8+3+2"``.

    Grammar: INT("+"INT)*, each INT in {16, 8, 4, 3, 2, 1}, strictly
    decreasing, at most three precisions.
    """
    parts = spec.split("+")
    try:
        bits = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"malformed precision spec {spec!r}") from None
    if not bits or any(b not in SPEC_BITS for b in bits):
        raise UsageError(f"precision spec {spec!r} must use bits from {SPEC_BITS}")
    if any(b2 >= b1 for b1, b2 in zip(bits, bits[1:])):
        raise UsageError(f"precision spec {spec!r} must be strictly decreasing")
    if len(bits) > 3:
        raise UsageError(f"at most three precisions supported, got {spec!r}")
    return bits


def make_schedule(
    spec: str,
    alpha: float,
    h_out: int,
    h_in: int,
    *,
    prefix_1: int = DEFAULT_PREFIX_1,
    prefix_2: int = DEFAULT_PREFIX_2,
) -> PrecisionSchedule:
    """Build the single/double/triple schedule for one matrix shape.

    Single precision spends the whole budget on one group starting at
    rank 0.  Double fixes the first group to [0, prefix_1) and fills the
    remaining budget with the second precision; triple additionally fixes
    the second group to [prefix_1, prefix_2).  The last group's r_end is
    floored so the budget is never exceeded; leftover bits are discarded.
    """
    bits = parse_spec(spec)
    if not 0 < alpha <= 1:
        raise UsageError(f"alpha must be in (0, 1], got {alpha}")
    if h_out < 1 or h_in < 1:
        raise UsageError(f"dimensions must be >= 1, got {h_out}x{h_in}")

    budget = 16.0 * alpha * h_out * h_in
    per_rank = h_out + h_in
    if len(bits) == 1:
        fixed = []
    elif len(bits) == 2:
        fixed = [(bits[0], 0, prefix_1)]
    else:
        if not 0 < prefix_1 < prefix_2:
            raise UsageError(f"invalid rank prefixes ({prefix_1}, {prefix_2})")
        fixed = [(bits[0], 0, prefix_1), (bits[1], prefix_1, prefix_2)]

    fixed_cost = sum(k * (e - b) * per_rank for k, b, e in fixed)
    remaining = budget - fixed_cost
    if remaining < 0:
        raise UsageError(
            f"budget {budget:.0f} bits cannot cover the fixed prefix ranges "
            f"of spec {spec!r} at {h_out}x{h_in}",
            code=BUDGET_EXHAUSTED,
        )
    last_bits = bits[-1]
    last_begin = fixed[-1][2] if fixed else 0
    last_width = int(math.floor(remaining / (last_bits * per_rank)))
    groups = [ScheduleGroup(k, b, e) for k, b, e in fixed]
    if last_width > 0:
        groups.append(ScheduleGroup(last_bits, last_begin, last_begin + last_width))
    return PrecisionSchedule(groups=tuple(groups), alpha=alpha)


def avg_bitwidth(schedule: PrecisionSchedule, h_out: int, h_in: int) -> float:
    """Average bits per original delta element implied by the schedule."""
    total = sum(g.bits * g.width for g in schedule.groups)
    return (h_out + h_in) / (h_out * h_in) * total


@dataclass(frozen=True)
class Allocation:
    """Rank counts per precision tier (16, 8, 4, 3, 2 bits)."""

    x1: int = 0  # 16-bit
    x2: int = 0  # 8-bit
    x3: int = 0  # 4-bit
    x4: int = 0  # 3-bit
    x5: int = 0  # 2-bit

    def counts(self) -> tuple[int, ...]:
        return (self.x1, self.x2, self.x3, self.x4, self.x5)

    @property
    def total_ranks(self) -> int:
        return sum(self.counts())


def allocation_schedule(alloc: Allocation, alpha: float) -> PrecisionSchedule:
    """Schedule induced by an allocation (zero-count tiers dropped)."""
    groups = []
    begin = 0
    for bits, count in zip(TIER_BITS, alloc.counts()):
        if count < 0:
            raise UsageError(f"negative tier count in {alloc}")
        if count:
            groups.append(ScheduleGroup(bits, begin, begin + count))
            begin += count
    return PrecisionSchedule(groups=tuple(groups), alpha=alpha)


def _allocation_bits(counts, h_out, h_in) -> int:
    return sum(k * c * (h_out + h_in) for k, c in zip(TIER_BITS, counts))


@dataclass(frozen=True)
class GaParams:
    population: int = 32
    generations: int = 40
    tournament: int = 3
    elitism: int = 1


@dataclass(frozen=True)
class GaResult:
    best: Allocation
    objective: float
    trace: tuple[float, ...]  # best objective after each generation


def _repair(counts, budget, rank_cap, h_out, h_in):
    """Clamp negatives, then shrink lowest-bit tiers until feasible."""
    counts = [max(0, c) for c in counts]
    for tier in reversed(range(len(TIER_BITS))):  # 2-bit tier first
        over = _allocation_bits(counts, h_out, h_in) - budget
        if over > 0:
            cut = min(counts[tier], math.ceil(over / (TIER_BITS[tier] * (h_out + h_in))))
            counts[tier] -= cut
        over_ranks = sum(counts) - rank_cap
        if over_ranks > 0:
            cut = min(counts[tier], over_ranks)
            counts[tier] -= cut
    return counts


def genetic_search(
    objective,
    alpha: float,
    h_out: int,
    h_in: int,
    params: GaParams = GaParams(),
    rng: Rng | None = None,
    *,
    seed_allocations: tuple[Allocation, ...] = (),
) -> GaResult:
    """Minimize ``objective(Allocation)`` over budget-feasible allocations.

    Tournament selection, uniform crossover, and a single-tier +-rank
    mutation followed by repair (shrink lowest-bit tiers until the bit
    budget and the rank cap min(h_out, h_in) hold).  One elite survives
    each generation unchanged, so the best objective never increases.
    Deterministic for a given rng seed; extra ``seed_allocations`` (the
    greedy schedule, say) are injected into the initial population.
    """
    if rng is None:
        rng = Rng(0)
    if not 0 < alpha <= 1:
        raise UsageError(f"alpha must be in (0, 1], got {alpha}")
    budget = 16.0 * alpha * h_out * h_in
    rank_cap = min(h_out, h_in)
    tier_caps = [
        min(budget_ranks(k, alpha, h_out, h_in), rank_cap) for k in TIER_BITS
    ]
    if max(tier_caps) == 0:
        raise UsageError(
            f"budget {budget:.0f} bits admits no ranks at any tier for "
            f"{h_out}x{h_in}",
            code=BUDGET_EXHAUSTED,
        )

    def feasible(counts):
        return Allocation(*_repair(counts, budget, rank_cap, h_out, h_in))

    population = [
        feasible([cap if i == t else 0 for i in range(len(TIER_BITS))])
        for t, cap in enumerate(tier_caps)
    ]
    population.extend(feasible(a.counts()) for a in seed_allocations)
    while len(population) < params.population:
        counts = [rng.below(cap + 1) for cap in tier_caps]
        population.append(feasible(counts))

    cache: dict[tuple[int, ...], float] = {}

    def score(alloc: Allocation) -> float:
        key = alloc.counts()
        if key not in cache:
            cache[key] = float(objective(alloc))
        return cache[key]

    def tournament() -> Allocation:
        picks = [population[rng.below(len(population))] for _ in range(params.tournament)]
        return min(picks, key=score)

    trace = []
    best = min(population, key=score)
    for _ in range(params.generations):
        nxt = [best]
        while len(nxt) < len(population):
            pa, pb = tournament(), tournament()
            child = [
                (pa.counts()[i] if rng.below(2) else pb.counts()[i])
                for i in range(len(TIER_BITS))
            ]
            tier = rng.below(len(TIER_BITS))
            span = max(1, tier_caps[tier] // 8)
            step = 1 + rng.below(span)
            child[tier] += step if rng.below(2) else -step
            nxt.append(feasible(child))
        population = nxt
        best = min(population, key=score)
        trace.append(score(best))

    return GaResult(best=best, objective=score(best), trace=tuple(trace))
