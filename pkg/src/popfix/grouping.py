"""Behavioral grouping: Jaccard similarity over passed-test sets plus
average-linkage agglomerative clustering and singleton rebalancing.

Similarities are carried as exact rationals so merge-order ties resolve
identically on every platform; float projections exist for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .core import EvaluatedCandidate
from .errors import ContractError


def jaccard_fraction(a: frozenset[int] | set[int], b: frozenset[int] | set[int]) -> Fraction:
    union = len(a | b)
    if union == 0:
        # Two all-failing candidates share no observable behavior to compare,
        # so they count as maximally distant (this also holds on the diagonal).
        return Fraction(0)
    return Fraction(len(a & b), union)


def jaccard_similarity(a: frozenset[int] | set[int], b: frozenset[int] | set[int]) -> float:
    """Jaccard overlap of two passed-test sets; 0 when both are empty."""
    return float(jaccard_fraction(a, b))


@dataclass(frozen=True)
class SimilarityMatrix:
    candidate_ids: tuple[str, ...]
    values: tuple[tuple[Fraction, ...], ...]

    @property
    def n(self) -> int:
        return len(self.candidate_ids)

    def at(self, id_a: str, id_b: str) -> Fraction:
        i = self.candidate_ids.index(id_a)
        j = self.candidate_ids.index(id_b)
        return self.values[i][j]

    def as_floats(self) -> list[list[float]]:
        return [[float(v) for v in row] for row in self.values]


def similarity_matrix(candidates: Sequence[EvaluatedCandidate]) -> SimilarityMatrix:
    sigs = [c.signature for c in candidates]
    values = tuple(
        tuple(jaccard_fraction(sigs[i], sigs[j]) for j in range(len(sigs)))
        for i in range(len(sigs))
    )
    return SimilarityMatrix(candidate_ids=tuple(c.candidate_id for c in candidates), values=values)


def effective_group_count(population_size: int, k_max: int) -> int:
    """Group count clamped to [1, min(k_max, floor(n/2))]."""
    if population_size < 1 or k_max < 1:
        raise ContractError("population_size and k_max must be >= 1")
    return max(1, min(k_max, population_size // 2))


@dataclass(frozen=True)
class GroupSet:
    generation: int
    groups: tuple[tuple[str, ...], ...]
    effective_k: int

    def __post_init__(self) -> None:
        flat = [cid for group in self.groups for cid in group]
        if len(flat) != len(set(flat)):
            raise ContractError("groups must be disjoint")
        if any(not group for group in self.groups):
            raise ContractError("groups must be non-empty")

    def member_ids(self) -> frozenset[str]:
        return frozenset(cid for group in self.groups for cid in group)


class _Cluster:
    __slots__ = ("members", "key", "size")

    def __init__(self, members: list[str]):
        self.members = members
        self.key = min(members)
        self.size = len(members)


def cluster(
    candidates: Sequence[EvaluatedCandidate],
    k: int,
    rng=None,
    generation: int = 0,
) -> GroupSet:
    """Bottom-up average-linkage clustering down to k groups.

    Merges the pair with minimum average pairwise distance (1 - similarity);
    ties go to the pair containing the lowest candidate id, then the lowest
    partner id. Fully deterministic, so `rng` is accepted only for interface
    symmetry with the sampling stage.
    """
    if not 1 <= k <= len(candidates):
        raise ContractError(f"k={k} out of range for {len(candidates)} candidates")

    by_id = {c.candidate_id: c for c in candidates}
    clusters = [_Cluster([c.candidate_id]) for c in candidates]
    # Average-linkage distance between current clusters, updated incrementally:
    # d(A+B, C) = (|A| d(A,C) + |B| d(B,C)) / (|A| + |B|).
    dist: dict[tuple[str, str], Fraction] = {}
    for i, a in enumerate(clusters):
        for b in clusters[i + 1 :]:
            d = 1 - jaccard_fraction(by_id[a.key].signature, by_id[b.key].signature)
            dist[_pair(a.key, b.key)] = d

    while len(clusters) > k:
        best: tuple[Fraction, str, str] | None = None
        for i, a in enumerate(clusters):
            for b in clusters[i + 1 :]:
                lo, hi = _pair(a.key, b.key)
                entry = (dist[(lo, hi)], lo, hi)
                if best is None or entry < best:
                    best = entry
        assert best is not None
        _, lo, hi = best
        a = next(c for c in clusters if c.key == lo)
        b = next(c for c in clusters if c.key == hi)
        merged = _Cluster(a.members + b.members)
        clusters = [c for c in clusters if c is not a and c is not b]
        for other in clusters:
            d_new = (a.size * dist[_pair(a.key, other.key)] + b.size * dist[_pair(b.key, other.key)]) / (
                a.size + b.size
            )
            dist[_pair(merged.key, other.key)] = d_new
        clusters.append(merged)

    ordered = sorted(clusters, key=lambda c: c.key)
    groups = tuple(tuple(sorted(c.members)) for c in ordered)
    return GroupSet(generation=generation, groups=groups, effective_k=k)


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def rebalance_singletons(gs: GroupSet, sim: SimilarityMatrix) -> GroupSet:
    """Resolve singleton groups by borrowing from, or merging into, the nearest group.

    Nearest means highest average similarity (ties to the lowest group index).
    A singleton borrows the most-similar member when the nearest group can
    spare one (size >= 3), otherwise it dissolves into that group.
    """
    if len(gs.groups) <= 1:
        return gs

    groups: list[list[str]] = [list(g) for g in gs.groups]
    snapshot = list(groups)

    for group in snapshot:
        if group not in groups or len(group) != 1:
            continue
        lone = group[0]
        best_index = None
        best_score: Fraction | None = None
        for idx, other in enumerate(groups):
            if other is group:
                continue
            score = sum((sim.at(lone, member) for member in other), Fraction(0)) / len(other)
            if best_score is None or score > best_score:
                best_score = score
                best_index = idx
        assert best_index is not None
        nearest = groups[best_index]
        if len(nearest) >= 3:
            donor = min(nearest, key=lambda m: (-sim.at(lone, m), m))
            nearest.remove(donor)
            group.append(donor)
        else:
            nearest.append(lone)
            groups.remove(group)

    return GroupSet(
        generation=gs.generation,
        groups=tuple(tuple(g) for g in groups),
        effective_k=gs.effective_k,
    )
