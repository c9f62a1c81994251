"""SHA-256 helpers, Merkle trees and the patient-to-sponsor digest roll-up."""

from __future__ import annotations

import enum
import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

from ..errors import EmptyLeaves


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def double_sha256(data: bytes) -> bytes:
    return sha256(sha256(data))


def merkle_levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    """All tree levels, leaves first.  An odd node is paired with itself."""
    if not leaves:
        raise EmptyLeaves("a Merkle tree needs at least one leaf")
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        level = levels[-1]
        parents = []
        for k in range(0, len(level), 2):
            left = level[k]
            right = level[k + 1] if k + 1 < len(level) else left
            parents.append(sha256(left + right))
        levels.append(parents)
    return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    return merkle_levels(leaves)[-1][0]


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]

    @property
    def levels(self) -> list[list[bytes]]:
        return merkle_levels(self.leaves)

    @property
    def root(self) -> bytes:
        return merkle_root(self.leaves)


class RollupLevel(enum.IntEnum):
    PATIENT = 0
    PI = 1
    COUNTRY = 2
    CRO = 3
    SPONSOR = 4


@dataclass(frozen=True)
class RollupSignature:
    level: RollupLevel
    digest: bytes
    children: tuple[bytes, ...]

    @property
    def hex(self) -> str:
        return self.digest.hex()


def patient_signature(leaf_digests: Sequence[bytes]) -> RollupSignature:
    """Digest of one patient's wearable transactions."""
    leaves = tuple(leaf_digests)
    return RollupSignature(RollupLevel.PATIENT, merkle_root(leaves), leaves)


def rollup(children: Sequence[RollupSignature | bytes]) -> RollupSignature:
    """Combine child signatures one level up (patient -> PI -> ... -> sponsor).

    Raw digests are taken to be patient signatures, so rolling them up
    yields a PI signature.
    """
    if not children:
        raise EmptyLeaves("roll-up needs at least one child")
    levels = {c.level if isinstance(c, RollupSignature) else RollupLevel.PATIENT for c in children}
    if len(levels) != 1:
        raise ValueError(f"children mix roll-up levels: {sorted(l.name for l in levels)}")
    (child_level,) = levels
    if child_level is RollupLevel.SPONSOR:
        raise ValueError("sponsor is the top of the roll-up")
    digests = tuple(c.digest if isinstance(c, RollupSignature) else bytes(c) for c in children)
    return RollupSignature(RollupLevel(child_level + 1), merkle_root(digests), digests)
