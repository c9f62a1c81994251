"""Private channels: per-active-node chain copies, replication and tracing."""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import NamedTuple

from ..errors import NotFinalized
from .chain import Block, Transaction, TxKind


@dataclass
class Channel:
    name: str
    active_nodes: frozenset[int]
    client_node: int
    channel_id: int = 0
    chains: dict[int, list[Block]] = field(default_factory=dict)
    # (node, height, held hash, offered hash) for every refused conflicting append
    forks: list[tuple[int, int, bytes, bytes]] = field(default_factory=list)

    def __post_init__(self):
        self.active_nodes = frozenset(self.active_nodes)
        if self.client_node not in self.active_nodes:
            raise ValueError(f"client node {self.client_node} is not active on channel {self.name}")
        for node in self.active_nodes:
            self.chains.setdefault(node, [])

    def storage_of(self, node: int) -> list[Block]:
        """What ``node`` holds for this channel; inactive nodes hold nothing."""
        return self.chains.get(node, [])

    def tip(self, node: int | None = None) -> Block | None:
        chain = self.chains[self.reference_node if node is None else node]
        return chain[-1] if chain else None

    @property
    def reference_node(self) -> int:
        return min(self.active_nodes)

    @property
    def height(self) -> int:
        """Height the next block will take."""
        return max(len(c) for c in self.chains.values())

    def append_local(self, node: int, block: Block) -> bool:
        """Append on one node's copy.  Idempotent; refuses and records forks."""
        if node not in self.active_nodes:
            raise ValueError(f"node {node} is inactive on channel {self.name}")
        chain = self.chains[node]
        if block.height < len(chain):
            held = chain[block.height]
            if held.hash != block.hash:
                self.forks.append((node, block.height, held.hash, block.hash))
            return False
        if block.height != len(chain):
            raise ValueError(f"node {node} is at height {len(chain)}, cannot append height {block.height}")
        chain.append(block)
        return True

    def tips_agree(self) -> bool:
        tips = {c[-1].hash if c else None for c in self.chains.values()}
        return len(tips) == 1


def replicate_to_channel(channel: Channel, block: Block, certificate) -> Channel:
    """Append a finalized block to every active copy of the channel.

    ``certificate`` is the client's finalization (anything with a
    ``block_hash``); a block without one is refused.
    """
    if certificate is None or getattr(certificate, "block_hash", None) != block.hash:
        raise NotFinalized(f"block {block.hash.hex()[:16]} has no finalization certificate")
    for node in sorted(channel.active_nodes):
        channel.append_local(node, block)
    return channel


class TraceHit(NamedTuple):
    height: int
    timestamp: int
    tx: Transaction


def trace(channel: Channel, predicate: Callable[[Transaction], bool], node: int | None = None) -> list[TraceHit]:
    """Matching transactions in chain order with their block timestamps."""
    chain = channel.chains[channel.reference_node if node is None else node]
    return [
        TraceHit(block.height, block.header.timestamp, tx)
        for block in chain
        for tx in block.transactions
        if predicate(tx)
    ]


def decode_payload(tx: Transaction) -> dict | None:
    try:
        data = json.loads(tx.payload)
    except (ValueError, UnicodeDecodeError):
        return None
    return data if isinstance(data, dict) else None


def telemetry_deviation(temp_range: tuple[float, float] = (2.0, 8.0), rh_range: tuple[float, float] = (30.0, 65.0)) -> Callable[[Transaction], bool]:
    """Predicate for shipment readings outside the cold-chain envelope."""

    def predicate(tx: Transaction) -> bool:
        if tx.kind is not TxKind.TELEMETRY:
            return False
        data = decode_payload(tx)
        if data is None:
            return False
        temp = data.get("temperature_c")
        rh = data.get("humidity_rh")
        return not (temp_range[0] <= temp <= temp_range[1]) or not (rh_range[0] <= rh <= rh_range[1])

    return predicate


def by_patient(patient_id: str) -> Callable[[Transaction], bool]:
    return lambda tx: tx.origin.patient == patient_id


def channel_leaks(channels: Iterable[Channel], node_ids: Iterable[int]) -> list[tuple[str, int, int]]:
    """(channel, node, blocks held) for every inactive node holding channel data."""
    leaks = []
    for channel in channels:
        for node in node_ids:
            if node in channel.active_nodes:
                continue
            held = channel.storage_of(node)
            if held:
                leaks.append((channel.name, node, len(held)))
    return leaks
