"""Transactions, blocks and hash-chain verification.

Byte layouts are fixed so headers are reproducible across implementations:

* transaction: ``tx_id`` (u64 BE) | kind tag (u8) | country, site, patient,
  zone (each u16 BE length + UTF-8) | payload (u32 BE length + bytes) |
  timestamp (u64 BE ticks)
* header preimage: previous_hash (32) | timestamp (u64 BE) | merkle_root (32)
  | nonce (u64 BE); header_hash is SHA-256 applied twice.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from typing import IO

from ..errors import EmptyBlock
from .merkle import double_sha256, merkle_root, sha256

ZERO_HASH = bytes(32)
DEFAULT_DIFFICULTY = 2
WEARABLE_ZONES = frozenset("ABCDEFG")
TICK_EPOCH = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)


class TxKind(enum.Enum):
    VITALS = "VitalsReading"
    LAB = "LabResult"
    CONSENT = "ConsentRecord"
    TELEMETRY = "ShipmentTelemetry"
    PROTOCOL = "ProtocolEvent"


KIND_TAG = {
    TxKind.VITALS: 1,
    TxKind.LAB: 2,
    TxKind.CONSENT: 3,
    TxKind.TELEMETRY: 4,
    TxKind.PROTOCOL: 5,
}
WEARABLE_KINDS = frozenset({TxKind.VITALS})


@dataclass(frozen=True)
class Origin:
    country: str = ""
    site: str = ""
    patient: str = ""
    zone: str = ""


def _field(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


@dataclass(frozen=True)
class Transaction:
    tx_id: int
    kind: TxKind
    payload: bytes
    timestamp: int
    origin: Origin = Origin()

    def encode(self) -> bytes:
        o = self.origin
        return b"".join(
            [
                struct.pack(">QB", self.tx_id, KIND_TAG[self.kind]),
                _field(o.country),
                _field(o.site),
                _field(o.patient),
                _field(o.zone),
                struct.pack(">I", len(self.payload)),
                self.payload,
                struct.pack(">Q", self.timestamp),
            ]
        )

    def digest(self) -> bytes:
        return sha256(self.encode())


def transaction_problem(tx: Transaction) -> str | None:
    """Why a transaction would fail re-execution, or None if it is well formed."""
    if tx.tx_id < 0 or tx.timestamp < 0:
        return "negative id or timestamp"
    if tx.kind in WEARABLE_KINDS and tx.origin.zone not in WEARABLE_ZONES:
        return f"wearable reading from unknown zone {tx.origin.zone!r}"
    return None


def header_preimage(previous_hash: bytes, timestamp: int, root: bytes, nonce: int) -> bytes:
    return previous_hash + struct.pack(">Q", timestamp) + root + struct.pack(">Q", nonce)


@dataclass(frozen=True)
class BlockHeader:
    previous_hash: bytes
    timestamp: int
    merkle_root: bytes
    nonce: int
    header_hash: bytes

    @classmethod
    def seal(cls, previous_hash: bytes, timestamp: int, root: bytes, nonce: int) -> BlockHeader:
        digest = double_sha256(header_preimage(previous_hash, timestamp, root, nonce))
        return cls(previous_hash, timestamp, root, nonce, digest)

    def recompute(self) -> bytes:
        return double_sha256(header_preimage(self.previous_hash, self.timestamp, self.merkle_root, self.nonce))


@dataclass(frozen=True)
class Block:
    height: int
    header: BlockHeader
    transactions: tuple[Transaction, ...]

    @property
    def hash(self) -> bytes:
        return self.header.header_hash

    def leaves(self) -> list[bytes]:
        return [tx.digest() for tx in self.transactions]


def format_timestamp(ticks: int) -> str:
    """Display form used in block listings, one tick = one second."""
    moment = TICK_EPOCH + dt.timedelta(seconds=ticks)
    return moment.strftime("%d%m%Y, %H:%M:%S GMT")


def build_block(prev: Block | None, txs: Sequence[Transaction], time: int, difficulty: int = DEFAULT_DIFFICULTY) -> Block:
    """Chain ``txs`` onto ``prev``; ``prev=None`` builds a genesis block.

    Genesis blocks search nonces from 0 until the header hash carries
    ``difficulty`` leading zero hex digits.  Other blocks use nonce 0.
    """
    if not txs:
        raise EmptyBlock("a block needs at least one transaction")
    txs = tuple(txs)
    root = merkle_root([tx.digest() for tx in txs])
    if prev is None:
        target = "0" * difficulty
        nonce = 0
        while True:
            header = BlockHeader.seal(ZERO_HASH, time, root, nonce)
            if header.header_hash.hex().startswith(target):
                return Block(0, header, txs)
            nonce += 1
    header = BlockHeader.seal(prev.hash, time, root, 0)
    return Block(prev.height + 1, header, txs)


class BreakReason(enum.Enum):
    MERKLE_MISMATCH = "MerkleMismatch"
    HEADER_MISMATCH = "HeaderMismatch"
    LINK_MISMATCH = "LinkMismatch"


@dataclass(frozen=True)
class BrokenAt:
    index: int
    reason: BreakReason


def verify_chain(chain: Sequence[Block]) -> BrokenAt | None:
    """Walk the chain; return the first failure or None when every link holds."""
    previous = ZERO_HASH
    for index, block in enumerate(chain):
        header = block.header
        if not block.transactions or merkle_root(block.leaves()) != header.merkle_root:
            return BrokenAt(index, BreakReason.MERKLE_MISMATCH)
        if header.recompute() != header.header_hash:
            return BrokenAt(index, BreakReason.HEADER_MISMATCH)
        if header.previous_hash != previous:
            return BrokenAt(index, BreakReason.LINK_MISMATCH)
        previous = header.header_hash
    return None


# Fault injection only.  Nothing else in the library rewrites a block.

def tamper_transaction(block: Block, tx_index: int, byte_index: int, value: int | None = None) -> Block:
    """Copy of ``block`` with one payload byte replaced (XOR 0x01 by default).

    The header is left untouched, exactly what an attacker editing stored
    data without re-sealing would produce.
    """
    tx = block.transactions[tx_index]
    payload = bytearray(tx.payload)
    payload[byte_index] = payload[byte_index] ^ 0x01 if value is None else value
    txs = list(block.transactions)
    txs[tx_index] = replace(tx, payload=bytes(payload))
    return replace(block, transactions=tuple(txs))


def reseal(block: Block, previous_hash: bytes | None = None) -> Block:
    """Recompute Merkle root and header hash, keeping timestamp and nonce."""
    header = block.header
    prev = header.previous_hash if previous_hash is None else previous_hash
    root = merkle_root(block.leaves())
    return replace(block, header=BlockHeader.seal(prev, header.timestamp, root, header.nonce))


# JSON-lines export, one block per line, hashes as lowercase hex.

def transaction_to_json(tx: Transaction) -> dict:
    return {
        "tx_id": tx.tx_id,
        "kind": tx.kind.value,
        "origin": {"country": tx.origin.country, "site": tx.origin.site, "patient": tx.origin.patient, "zone": tx.origin.zone},
        "payload": tx.payload.hex(),
        "timestamp": tx.timestamp,
    }


def transaction_from_json(data: dict) -> Transaction:
    return Transaction(
        tx_id=int(data["tx_id"]),
        kind=TxKind(data["kind"]),
        payload=bytes.fromhex(data["payload"]),
        timestamp=int(data["timestamp"]),
        origin=Origin(**data.get("origin", {})),
    )


def block_to_json(block: Block) -> dict:
    h = block.header
    return {
        "height": block.height,
        "header": {
            "previous_hash": h.previous_hash.hex(),
            "timestamp": h.timestamp,
            "time": format_timestamp(h.timestamp),
            "merkle_root": h.merkle_root.hex(),
            "nonce": h.nonce,
            "header_hash": h.header_hash.hex(),
        },
        "transactions": [transaction_to_json(tx) for tx in block.transactions],
    }


def block_from_json(data: dict) -> Block:
    h = data["header"]
    header = BlockHeader(
        previous_hash=bytes.fromhex(h["previous_hash"]),
        timestamp=int(h["timestamp"]),
        merkle_root=bytes.fromhex(h["merkle_root"]),
        nonce=int(h["nonce"]),
        header_hash=bytes.fromhex(h["header_hash"]),
    )
    txs = tuple(transaction_from_json(t) for t in data["transactions"])
    return Block(int(data["height"]), header, txs)


def dump_chain(chain: Iterable[Block], fp: IO[str]) -> None:
    for block in chain:
        fp.write(json.dumps(block_to_json(block), sort_keys=True) + "\n")


def load_chain(fp: IO[str]) -> list[Block]:
    return [block_from_json(json.loads(line)) for line in fp if line.strip()]
