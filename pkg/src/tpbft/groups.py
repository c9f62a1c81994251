"""Trust-ranked consensus group and primary group construction."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from fractions import Fraction

from .errors import MissingTrust
from .trust import TrustVector


@dataclass(frozen=True)
class GroupConfig:
    s: float = 1.0
    m: float = 0.25

    def __post_init__(self):
        for name in ("s", "m"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")


@dataclass(frozen=True)
class ConsensusGroup:
    members: tuple[int, ...]
    f: int

    def __contains__(self, node: int) -> bool:
        return node in self.members

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PrimaryGroup:
    members: tuple[int, ...]

    def __contains__(self, node: int) -> bool:
        return node in self.members

    def __len__(self) -> int:
        return len(self.members)


def fraction_size(fraction: float, total: int) -> int:
    """``max(1, ceil(fraction * total))`` evaluated on the decimal literal.

    ``0.8 * 5`` is 4.000000000000001 in binary floating point; the fraction is
    read through its shortest repr so configured values behave as written.
    """
    return max(1, math.ceil(Fraction(repr(float(fraction))) * total))


def byzantine_bound(group_size: int) -> int:
    return max(0, (group_size - 1) // 3)


def rank(nodes: Iterable[int], trust: TrustVector | Mapping[int, float]) -> list[int]:
    """Order by trust descending, NodeId ascending on ties."""
    values = trust.values if isinstance(trust, TrustVector) else trust
    nodes = list(nodes)
    missing = [n for n in nodes if n not in values]
    if missing:
        raise MissingTrust(f"no trust value for nodes {sorted(missing)}")
    return sorted(nodes, key=lambda n: (-values[n], n))


def build_consensus_group(trust: TrustVector | Mapping[int, float], config: GroupConfig, nodes: Iterable[int]) -> ConsensusGroup:
    ordered = rank(nodes, trust)
    if not ordered:
        raise ValueError("cannot build a consensus group from an empty node set")
    members = tuple(ordered[: fraction_size(config.s, len(ordered))])
    return ConsensusGroup(members, byzantine_bound(len(members)))


def build_primary_group(cg: ConsensusGroup, trust: TrustVector | Mapping[int, float], config: GroupConfig) -> PrimaryGroup:
    if not cg.members:
        raise ValueError("empty consensus group")
    ordered = rank(cg.members, trust)
    return PrimaryGroup(tuple(ordered[: fraction_size(config.m, len(ordered))]))
