"""Cross-group sampling: entropy-weighted mixed pools for recombination.

Each behavior group gets a diversity score from the pairwise similarities of
its members; mixed pools draw more candidates from the more diverse groups.
When no group carries usable diversity the stage falls back to dealing the
whole population round-robin into the mixed pools.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import EvaluatedCandidate, EngineConfig
from .errors import ContractError
from .grouping import GroupSet, jaccard_fraction

FALLBACK_ENTROPY_THRESHOLD = 1e-12


@dataclass(frozen=True)
class MixedGroupPlan:
    per_group_allocation: dict[int, int]
    mixed_groups: tuple[tuple[str, ...], ...]
    used_fallback: bool

    def __post_init__(self) -> None:
        for group in self.mixed_groups:
            if len(set(group)) != len(group):
                raise ContractError("a mixed group may not repeat a candidate")


def group_entropy(group: Sequence[EvaluatedCandidate], eps: float) -> float:
    """Diversity score of one group; zero for singletons, clamped at zero.

    Sums -q * ln(q + eps) over unordered member pairs with q the Jaccard
    similarity of their signatures. The clamp absorbs the slightly negative
    mass contributed by near-identical pairs (q close to 1).
    """
    if eps <= 0:
        raise ContractError("eps must be > 0")
    total = 0.0
    for i, a in enumerate(group):
        for b in group[i + 1 :]:
            q = float(jaccard_fraction(a.signature, b.signature))
            if q > 0.0:
                total += -q * math.log(q + eps)
    return max(0.0, total)


def allocate_samples(
    entropies: Sequence[float], group_sizes: Sequence[int], target: int
) -> list[int] | None:
    """Per-group draw counts; None signals the even-redistribution fallback.

    Each group gets ceil(target * H_k / sum(H)) capped at its size; when the
    ceilings overshoot, draws are removed one at a time from the lowest-entropy
    group (then lowest index) until exactly `target` remain.
    """
    if target < 1:
        raise ContractError(f"target must be >= 1, got {target}")
    if len(entropies) != len(group_sizes):
        raise ContractError("entropies and group_sizes must be aligned")
    if any(not math.isfinite(h) for h in entropies):
        return None
    total = sum(entropies)
    if total <= FALLBACK_ENTROPY_THRESHOLD:
        return None

    # The 1e-9 nudge keeps float noise in the entropy sum from pushing an
    # exactly-integer share over the next ceiling step.
    counts = [
        min(size, max(0, math.ceil(target * h / total - 1e-9)))
        for h, size in zip(entropies, group_sizes)
    ]
    while sum(counts) > target:
        candidates = [i for i, c in enumerate(counts) if c > 0]
        victim = min(candidates, key=lambda i: (entropies[i], i))
        counts[victim] -= 1
    return counts


def build_mixed_groups(
    gs: GroupSet,
    candidates_by_id: Mapping[str, EvaluatedCandidate],
    cfg: EngineConfig,
    rng: random.Random,
) -> MixedGroupPlan:
    """Assemble the configured number of mixed pools from the behavior groups.

    Sampling is independent per mixed pool (a candidate may appear in several
    pools, never twice in one). Pools that end up with fewer than two members
    are discarded: they carry nothing to recombine.
    """
    mix_count = cfg.crossing_groups
    target = cfg.candidates_per_crossing_group
    if mix_count == 0 or not gs.groups:
        return MixedGroupPlan(per_group_allocation={}, mixed_groups=(), used_fallback=False)

    member_lists = [list(group) for group in gs.groups]
    entropies = [
        group_entropy([candidates_by_id[cid] for cid in members], cfg.entropy_epsilon)
        for members in member_lists
    ]
    counts = allocate_samples(entropies, [len(m) for m in member_lists], target)

    if counts is None:
        everyone = [cid for members in member_lists for cid in members]
        rng.shuffle(everyone)
        dealt: list[list[str]] = [[] for _ in range(mix_count)]
        for position, cid in enumerate(everyone):
            bucket = dealt[position % mix_count]
            if len(bucket) < target:
                bucket.append(cid)
        mixed = tuple(tuple(group) for group in dealt if len(group) >= 2)
        return MixedGroupPlan(per_group_allocation={}, mixed_groups=mixed, used_fallback=True)

    pools: list[tuple[str, ...]] = []
    for _ in range(mix_count):
        drawn: list[str] = []
        for members, n_k in zip(member_lists, counts):
            if n_k > 0:
                drawn.extend(rng.sample(members, n_k))
        if len(drawn) >= 2:
            pools.append(tuple(drawn))
    allocation = {index: n_k for index, n_k in enumerate(counts)}
    return MixedGroupPlan(
        per_group_allocation=allocation, mixed_groups=tuple(pools), used_fallback=False
    )
