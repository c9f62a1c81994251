"""Byzantine behaviours, applied as filters on a node's outgoing messages.

A faulty node runs the honest state machine internally; only what it puts
on the wire changes.  Each filter returns the (send, extra delay) pairs to
deliver and whether the node deviated from the protocol.
"""

from __future__ import annotations

import hashlib
from dataclasses import replace

from ..consensus import ConsensusMessage, Identity, Kind, Send, make_message
from ..ledger import Block, reseal, tamper_transaction
from .scenario import Behavior, NodeBehavior

EQUIVOCATED_KINDS = (Kind.PREPARE, Kind.REPLY)
TAMPERED_VOTES = (Kind.PREPARE, Kind.COMMIT, Kind.REPLY)
CARRIES_BLOCK = (Kind.GROUP_PROPOSE, Kind.PRE_PREPARE)


def fabricated_hash(block_hash: bytes) -> bytes:
    return hashlib.sha256(b"equivocate" + block_hash).digest()


def tampered_block(block: Block) -> Block:
    """One payload byte flipped; header left as it was."""
    return tamper_transaction(block, 0, 0)


def _resign(identity: Identity, msg: ConsensusMessage, block_hash: bytes) -> ConsensusMessage:
    return make_message(identity, msg.kind, msg.height, block_hash, msg.sender, channel=msg.channel, block=msg.block, group_fingerprint=msg.group_fingerprint)


def apply_behavior(
    behavior: NodeBehavior,
    send: Send,
    identity: Identity,
    held_block: Block | None,
) -> tuple[list[tuple[Send, int]], bool]:
    kind = behavior.kind
    msg = send.msg
    if kind is Behavior.HONEST:
        return [(send, 0)], False
    if kind is Behavior.CRASH_SILENT:
        return [], True
    if kind is Behavior.LAGGARD:
        return [(send, behavior.delay)], behavior.delay > 0
    if kind is Behavior.EQUIVOCATOR:
        if msg.kind in EQUIVOCATED_KINDS and send.to % 2 == 1:
            return [(Send(send.to, _resign(identity, msg, fabricated_hash(msg.block_hash))), 0)], True
        return [(send, 0)], False
    if kind is Behavior.TAMPERER:
        if msg.kind in CARRIES_BLOCK and msg.block is not None:
            # the header still claims the honest hash, so receivers see a Merkle mismatch
            return [(Send(send.to, replace(msg, block=tampered_block(msg.block))), 0)], True
        if msg.kind in TAMPERED_VOTES and held_block is not None and held_block.hash == msg.block_hash:
            forged = reseal(tampered_block(held_block)).hash
            return [(Send(send.to, _resign(identity, msg, forged)), 0)], True
        return [(send, 0)], False
    raise ValueError(f"unhandled behaviour {kind}")
