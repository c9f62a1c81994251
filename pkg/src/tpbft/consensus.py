"""T-PBFT round logic.

A round runs through five stages.  In the group stage one primary-group
member packs the pending transactions into a pre-generated block and sends
it to the rest of the primary group, whose members re-derive it and approve
by broadcasting their own Prepare.  The primary group then sends PrePrepare
(block plus group fingerprint) to the remaining consensus-group replicas.
Every member that validated the block broadcasts Prepare; more than ``2f``
matching Prepares make a node prepared, after which it sends Reply to the
client and Commit to its peers.  The client finalizes once ``f + 1`` members
reply with the same hash.

Everything here is honest behaviour.  Byzantine behaviour is layered on
outgoing messages by the simulator.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .errors import ConflictingFinal, EmptyProposal, GroupStageIncomplete, NotPrimaryMember
from .groups import ConsensusGroup, PrimaryGroup
from .ledger import Block, Transaction, build_block, merkle_root, transaction_problem
from .trust import Outcome, TrustLedger


class Kind(enum.Enum):
    GROUP_PROPOSE = "GroupPropose"
    PRE_PREPARE = "PrePrepare"
    PREPARE = "Prepare"
    COMMIT = "Commit"
    REPLY = "Reply"
    # flat-PBFT baseline only
    VIEW_CHANGE = "ViewChange"
    NEW_VIEW = "NewView"


class Stage(enum.IntEnum):
    IDLE = 0
    GROUPED = 1
    PRE_PREPARED = 2
    PREPARED = 3
    COMMITTED = 4


class Reason(enum.Enum):
    HASH_MISMATCH = "HashMismatch"
    STALE_PARENT = "StaleParent"
    SIMULATION_MISMATCH = "SimulationMismatch"
    BAD_FINGERPRINT = "BadFingerprint"
    BAD_SENDER = "BadSender"


class Identity:
    """Secret per-node salts standing in for signatures.

    A sender fingerprint is SHA-256 over the message fields and the sender's
    salt; only the registry (the simulated membership service) can check it.
    """

    def __init__(self, salts: dict[int, bytes]):
        self._salts = dict(salts)

    @classmethod
    def from_seed(cls, seed: int, nodes: Iterable[int]) -> Identity:
        return cls({n: hashlib.sha256(f"salt:{seed}:{n}".encode()).digest() for n in nodes})

    def fingerprint(self, node: int, kind: Kind, height: int, block_hash: bytes) -> bytes:
        preimage = kind.value.encode() + struct.pack(">QQ", height, node) + block_hash + self._salts[node]
        return hashlib.sha256(preimage).digest()

    def verify(self, msg: ConsensusMessage) -> bool:
        if msg.sender not in self._salts:
            return False
        return self.fingerprint(msg.sender, msg.kind, msg.height, msg.block_hash) == msg.sender_fingerprint


@dataclass(frozen=True)
class ConsensusMessage:
    kind: Kind
    height: int
    block_hash: bytes
    sender: int
    sender_fingerprint: bytes
    group_fingerprint: bytes | None = None
    block: Block | None = field(default=None, compare=False)
    channel: str = ""


def make_message(
    identity: Identity,
    kind: Kind,
    height: int,
    block_hash: bytes,
    sender: int,
    *,
    channel: str = "",
    block: Block | None = None,
    group_fingerprint: bytes | None = None,
) -> ConsensusMessage:
    if (group_fingerprint is not None) != (kind is Kind.PRE_PREPARE):
        raise ValueError("group fingerprint is carried by PrePrepare and nothing else")
    fp = identity.fingerprint(sender, kind, height, block_hash)
    return ConsensusMessage(kind, height, block_hash, sender, fp, group_fingerprint, block, channel)


@dataclass(frozen=True)
class Send:
    to: int
    msg: ConsensusMessage


@dataclass(frozen=True)
class Verdict:
    approved: bool
    reason: Reason | None = None


APPROVE = Verdict(True)


def reject(reason: Reason) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class Finalized:
    block_hash: bytes


def group_fingerprint(pg_members: Iterable[int], block_hash: bytes) -> bytes:
    """Digest over the sorted primary-group ids and the block hash.

    The proposer's id is deliberately absent, so a valid fingerprint says the
    group produced the block without saying which member did.
    """
    ids = b"".join(struct.pack(">Q", m) for m in sorted(pg_members))
    return hashlib.sha256(ids + block_hash).digest()


def order_transactions(txs: Iterable[Transaction]) -> list[Transaction]:
    return sorted(txs, key=lambda tx: tx.tx_id)


def _simulate(block: Block, tip: Block) -> tuple[Reason | None, bytes | None]:
    """Re-execute a received block against our tip.

    Returns the failure reason (if any) and the recomputed header hash.
    """
    if block.header.previous_hash != tip.hash or block.height != tip.height + 1:
        return Reason.STALE_PARENT, None
    txs = block.transactions
    if not txs or any(transaction_problem(tx) for tx in txs):
        return Reason.SIMULATION_MISMATCH, None
    ids = [tx.tx_id for tx in txs]
    if ids != sorted(set(ids)):
        return Reason.SIMULATION_MISMATCH, None
    if merkle_root([tx.digest() for tx in txs]) != block.header.merkle_root:
        return Reason.SIMULATION_MISMATCH, None
    rebuilt = build_block(tip, txs, block.header.timestamp)
    return None, rebuilt.hash


def group_stage_propose(
    proposer: int,
    pg: PrimaryGroup,
    pending_txs: Sequence[Transaction],
    tip: Block,
    time: int,
    identity: Identity,
    channel: str = "",
) -> tuple[Block, list[Send]]:
    if proposer not in pg:
        raise NotPrimaryMember(f"node {proposer} is not in the primary group {pg.members}")
    if not pending_txs:
        raise EmptyProposal("nothing to propose")
    block = build_block(tip, order_transactions(pending_txs), time)
    sends = [
        Send(m, make_message(identity, Kind.GROUP_PROPOSE, block.height, block.hash, proposer, channel=channel, block=block))
        for m in pg.members
        if m != proposer
    ]
    return block, sends


def group_stage_verify(member: int, pg: PrimaryGroup, msg: ConsensusMessage, tip: Block, identity: Identity) -> Verdict:
    """Mutual supervision: recompute the proposed block and compare hashes."""
    if member not in pg:
        raise NotPrimaryMember(f"node {member} does not supervise primary group {pg.members}")
    if msg.sender not in pg or not identity.verify(msg) or msg.block is None:
        return reject(Reason.BAD_SENDER)
    problem, recomputed = _simulate(msg.block, tip)
    if problem is Reason.STALE_PARENT:
        return reject(Reason.STALE_PARENT)
    if problem is not None or recomputed != msg.block_hash or msg.block.hash != msg.block_hash:
        return reject(Reason.HASH_MISMATCH)
    return APPROVE


def emit_pre_prepare(
    pg: PrimaryGroup,
    cg: ConsensusGroup,
    block: Block,
    sender: int,
    identity: Identity,
    *,
    approved: bool = True,
    channel: str = "",
) -> list[Send]:
    if not approved:
        raise GroupStageIncomplete("group stage not approved by the live primary group")
    fp = group_fingerprint(pg.members, block.hash)
    return [
        Send(r, make_message(identity, Kind.PRE_PREPARE, block.height, block.hash, sender, channel=channel, block=block, group_fingerprint=fp))
        for r in cg.members
        if r not in pg
    ]


def validate_pre_prepare(msg: ConsensusMessage, pg: PrimaryGroup, cg: ConsensusGroup, tip: Block, identity: Identity) -> Verdict:
    if msg.sender not in pg or not identity.verify(msg) or msg.block is None:
        return reject(Reason.BAD_SENDER)
    if msg.group_fingerprint != group_fingerprint(pg.members, msg.block_hash):
        return reject(Reason.BAD_FINGERPRINT)
    problem, recomputed = _simulate(msg.block, tip)
    if problem is not None:
        return reject(problem)
    if recomputed != msg.block_hash or msg.block.hash != msg.block_hash:
        return reject(Reason.HASH_MISMATCH)
    return APPROVE


def prepare_broadcast(node: int, cg: ConsensusGroup, block: Block, identity: Identity, channel: str = "") -> list[Send]:
    msg = make_message(identity, Kind.PREPARE, block.height, block.hash, node, channel=channel)
    return [Send(m, msg) for m in cg.members if m != node]


def on_pre_prepare(
    replica: int,
    cg: ConsensusGroup,
    pg: PrimaryGroup,
    msg: ConsensusMessage,
    tip: Block,
    identity: Identity,
    ledger: TrustLedger | None = None,
) -> list[Send] | Verdict:
    """Replica side of PrePrepare: validate, then Prepare to every other member.

    A rejected proposal is charged to its sender as an unsatisfactory
    transaction when a trust ledger is supplied.
    """
    if replica not in cg:
        raise ValueError(f"node {replica} is not in the consensus group")
    verdict = validate_pre_prepare(msg, pg, cg, tip, identity)
    if not verdict.approved:
        if ledger is not None and msg.sender != replica and msg.sender in ledger.nodes:
            ledger.record(replica, msg.sender, Outcome.UNSATISFACTORY)
        return verdict
    return prepare_broadcast(replica, cg, msg.block, identity, msg.channel)


@dataclass
class RoundState:
    height: int
    f: int
    stage: Stage = Stage.IDLE
    pre_generated_block: Block | None = None
    prepare_votes: dict[bytes, set[int]] = field(default_factory=dict)
    commit_votes: dict[bytes, set[int]] = field(default_factory=dict)
    replies_seen: dict[bytes, set[int]] = field(default_factory=dict)
    group_size: int | None = None

    @property
    def quorum(self) -> int:
        return quorum_size(3 * self.f + 1 if self.group_size is None else self.group_size, self.f)

    def advance(self, stage: Stage) -> None:
        if stage < self.stage:
            raise ValueError(f"stage cannot regress from {self.stage.name} to {stage.name}")
        self.stage = stage


def quorum_size(group_size: int, f: int) -> int:
    """Smallest vote count that makes a Prepare or Commit quorum.

    Always more than ``2f``.  For a group of exactly ``3f + 1`` members it is
    ``2f + 1``; larger groups need ``floor((n + f) / 2) + 1`` so that any two
    quorums still share at least ``f + 1`` members.
    """
    return max(2 * f + 1, (group_size + f) // 2 + 1)


def check_prepared_quorum(state: RoundState, block_hash: bytes) -> bool:
    """More than ``2f`` distinct Prepare voters, and enough to intersect any other quorum."""
    return len(state.prepare_votes.get(block_hash, ())) >= state.quorum


class ReplyTally:
    """Incremental client-side finalization over a stream of replies."""

    def __init__(self, f: int, members: Iterable[int] | None = None):
        self.f = f
        self.members = None if members is None else frozenset(members)
        self.votes: dict[bytes, set[int]] = {}
        self.finalized: Finalized | None = None

    def add(self, sender: int, block_hash: bytes) -> Finalized | None:
        """Count one reply; raises ConflictingFinal on a second f+1 hash."""
        if self.members is not None and sender not in self.members:
            return self.finalized
        voters = self.votes.setdefault(block_hash, set())
        before = len(voters)
        voters.add(sender)
        if len(voters) >= self.f + 1 and before < self.f + 1:
            if self.finalized is None:
                self.finalized = Finalized(block_hash)
            elif self.finalized.block_hash != block_hash:
                raise ConflictingFinal(self.finalized.block_hash, block_hash)
        return self.finalized


def client_finalize(replies: Iterable[ConsensusMessage | tuple[int, bytes]], f: int, members: Iterable[int] | None = None) -> Finalized | None:
    """Finalized for the first hash with ``f + 1`` distinct repliers, else None (pending)."""
    tally = ReplyTally(f, members)
    for reply in replies:
        if isinstance(reply, ConsensusMessage):
            tally.add(reply.sender, reply.block_hash)
        else:
            tally.add(*reply)
    return tally.finalized


def replace_failed_primary(pg: PrimaryGroup, failed: int | Iterable[int], current: int | None = None) -> PrimaryGroup | None:
    """Primary group with proposer duty moved to the next live member.

    The returned group lists the live members in group order starting from
    the successor of ``current`` (the failed proposer when it is a single
    id), so ``members[0]`` proposes next.  None means every member has
    failed; the caller records a view-change fallback instead.
    """
    down = {failed} if isinstance(failed, int) else set(failed)
    if current is None:
        current = failed if isinstance(failed, int) else None
    order = list(pg.members)
    start = 0 if current is None else order.index(current) + 1
    rotated = [order[(start + k) % len(order)] for k in range(len(order))]
    live = tuple(m for m in rotated if m not in down)
    return PrimaryGroup(live) if live else None


@dataclass(frozen=True)
class RoundContext:
    channel: str
    height: int
    cg: ConsensusGroup
    pg: PrimaryGroup
    tip: Block
    block_time: int
    client: int


class ReplicaNode:
    """One node's view of one consensus round.  Messages are handled serially."""

    def __init__(self, node_id: int, ctx: RoundContext, identity: Identity, pending: Sequence[Transaction] = ()):
        self.id = node_id
        self.ctx = ctx
        self.identity = identity
        self.pending = tuple(pending)
        self.state = RoundState(ctx.height, ctx.cg.f, group_size=len(ctx.cg))
        self.state.advance(Stage.GROUPED)
        self.prepare_from: dict[int, tuple[bytes, int]] = {}
        self.rejections: list[tuple[int, Reason]] = []
        self.pre_prepare_sent = False
        self.proposed = False
        self.prepared_with: int | None = None
        self.committed: Block | None = None

    @property
    def block(self) -> Block | None:
        return self.state.pre_generated_block

    def _adopt(self, block: Block) -> list[Send]:
        self.state.pre_generated_block = block
        self.state.advance(Stage.PRE_PREPARED)
        self.state.prepare_votes.setdefault(block.hash, set()).add(self.id)
        return prepare_broadcast(self.id, self.ctx.cg, block, self.identity, self.ctx.channel)

    def _group_approved(self) -> bool:
        voters = self.state.prepare_votes.get(self.block.hash, set())
        return all(m in voters for m in self.ctx.pg.members if m != self.id)

    def _flush_pre_prepare(self) -> list[Send]:
        if self.pre_prepare_sent or not self.proposed:
            return []
        self.pre_prepare_sent = True
        return emit_pre_prepare(self.ctx.pg, self.ctx.cg, self.block, self.id, self.identity, channel=self.ctx.channel)

    def propose(self, now: int) -> list[Send]:
        """Take the proposer duty for this attempt."""
        if self.state.stage >= Stage.COMMITTED or self.proposed:
            return []
        block, sends = group_stage_propose(self.id, self.ctx.pg, self.pending, self.ctx.tip, self.ctx.block_time, self.identity, self.ctx.channel)
        self.proposed = True
        if self.block is None:
            sends += self._adopt(block)
        if self._group_approved():
            sends += self._flush_pre_prepare()
        return sends + self._try_prepare()

    def group_deadline(self, now: int) -> list[Send]:
        """Group-stage timeout: go ahead with whichever members approved."""
        return self._flush_pre_prepare() + self._try_prepare()

    def receive(self, msg: ConsensusMessage, now: int) -> list[Send]:
        if msg.height != self.ctx.height or msg.sender == self.id:
            return []
        if msg.kind is Kind.GROUP_PROPOSE:
            return self._on_group_propose(msg)
        if msg.kind is Kind.PRE_PREPARE:
            return self._on_pre_prepare(msg)
        if msg.kind is Kind.PREPARE:
            return self._on_prepare(msg, now)
        if msg.kind is Kind.COMMIT:
            return self._on_commit(msg)
        return []

    def _on_group_propose(self, msg: ConsensusMessage) -> list[Send]:
        if self.id not in self.ctx.pg:
            return []
        verdict = group_stage_verify(self.id, self.ctx.pg, msg, self.ctx.tip, self.identity)
        if not verdict.approved:
            self.rejections.append((msg.sender, verdict.reason))
            return []
        if self.block is not None:
            return []
        return self._adopt(msg.block) + self._try_prepare()

    def _on_pre_prepare(self, msg: ConsensusMessage) -> list[Send]:
        if self.id not in self.ctx.cg or self.id in self.ctx.pg:
            return []
        verdict = validate_pre_prepare(msg, self.ctx.pg, self.ctx.cg, self.ctx.tip, self.identity)
        if not verdict.approved:
            self.rejections.append((msg.sender, verdict.reason))
            return []
        if self.block is not None:
            return []
        return self._adopt(msg.block) + self._try_prepare()

    def _on_prepare(self, msg: ConsensusMessage, now: int) -> list[Send]:
        if msg.sender not in self.ctx.cg or not self.identity.verify(msg):
            return []
        if msg.sender in self.prepare_from:
            return []
        self.prepare_from[msg.sender] = (msg.block_hash, now)
        self.state.prepare_votes.setdefault(msg.block_hash, set()).add(msg.sender)
        sends = []
        if self.proposed and self.block is not None and self._group_approved():
            sends += self._flush_pre_prepare()
        return sends + self._try_prepare()

    def _on_commit(self, msg: ConsensusMessage) -> list[Send]:
        if msg.sender not in self.ctx.cg or not self.identity.verify(msg):
            return []
        self.state.commit_votes.setdefault(msg.block_hash, set()).add(msg.sender)
        return self._try_commit()

    def _try_prepare(self) -> list[Send]:
        block = self.block
        if block is None or self.state.stage != Stage.PRE_PREPARED:
            return []
        if not check_prepared_quorum(self.state, block.hash):
            return []
        self.state.advance(Stage.PREPARED)
        self.prepared_with = len(self.state.prepare_votes[block.hash])
        ctx = self.ctx
        reply = make_message(self.identity, Kind.REPLY, block.height, block.hash, self.id, channel=ctx.channel)
        commit = make_message(self.identity, Kind.COMMIT, block.height, block.hash, self.id, channel=ctx.channel)
        self.state.commit_votes.setdefault(block.hash, set()).add(self.id)
        sends = [Send(ctx.client, reply)] + [Send(m, commit) for m in ctx.cg.members if m != self.id]
        return sends + self._try_commit()

    def _try_commit(self) -> list[Send]:
        block = self.block
        if block is None or self.state.stage != Stage.PREPARED:
            return []
        if len(self.state.commit_votes.get(block.hash, ())) >= self.state.quorum:
            self.state.advance(Stage.COMMITTED)
            self.committed = block
        return []
