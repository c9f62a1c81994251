"""Zero-trust admission: device registry, ABAC decisions and a content-addressed store.

Requests enter at the enforcement point (PEP), which rejects anything that
does not come from a registered wallet with a complete attribute set.  The
decision point (PDP) looks up a policy by the exact (zone, device type,
transaction kind) pattern, refreshes the requester's trust from the current
trust vector, and grants when the trust clears the policy threshold.  On a
miss the policy engine (PE) synthesizes a policy and the request is
evaluated once more.  The trust engine hook (TE) turns finalized decisions
into satisfaction counters.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from typing import IO

from .errors import DuplicateDevice, MalformedAttributes, NotFound, StoreCorruption, UnknownPatient, UnregisteredDevice
from .ledger import TxKind
from .trust import Outcome, TrustLedger, TrustVector


class WearableType(enum.Enum):
    MEDICAL_EARBUD = "MedicalEarbud"
    ECG_PATCH = "EcgPatch"
    CHEST_STRAP = "ChestStrap"
    SMART_WATCH = "SmartWatch"
    CLOTHING = "Clothing"
    HELMET = "Helmet"
    OURA_RING = "OuraRing"


ZONE_OF = {
    WearableType.MEDICAL_EARBUD: "A",
    WearableType.ECG_PATCH: "B",
    WearableType.CHEST_STRAP: "C",
    WearableType.SMART_WATCH: "D",
    WearableType.CLOTHING: "E",
    WearableType.HELMET: "F",
    WearableType.OURA_RING: "G",
}

SESSION_TTL = 3600


def zone_for(wd_type: WearableType | str) -> str:
    return ZONE_OF[WearableType(wd_type)]


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class ContentStore:
    """In-memory store keyed by the hex SHA-256 of each value."""

    def __init__(self):
        self.entries: dict[str, bytes] = {}

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        self.entries[digest] = bytes(data)
        return digest

    def get(self, digest: str) -> bytes:
        try:
            data = self.entries[digest]
        except KeyError:
            raise NotFound(f"no entry under {digest}") from None
        if hashlib.sha256(data).hexdigest() != digest:
            raise StoreCorruption(f"entry {digest} fails its digest check")
        return data

    def __contains__(self, digest: str) -> bool:
        return digest in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def store_put(store: ContentStore, data: bytes) -> str:
    return store.put(data)


def store_get(store: ContentStore, digest: str) -> bytes:
    return store.get(digest)


@dataclass(frozen=True)
class Wallet:
    public_tag: str
    secret_tag: str


@dataclass(frozen=True)
class AttributeSet:
    wd_recognizer: str | None
    wd_type: str | None
    wd_age: int | None
    wd_priority: int | None
    wd_category: str | None
    wd_zone: str | None
    environment_timestamp: int | None
    trust_levels: tuple[float, float, float] | None = None

    def missing(self) -> list[str]:
        return [k for k, v in asdict(self).items() if v is None]

    def with_trust(self, patient: float, pi: float, global_: float) -> AttributeSet:
        return AttributeSet(
            self.wd_recognizer, self.wd_type, self.wd_age, self.wd_priority, self.wd_category,
            self.wd_zone, self.environment_timestamp, (patient, pi, global_),
        )

    def to_json(self) -> dict:
        data = asdict(self)
        data["trust_levels"] = None if self.trust_levels is None else list(self.trust_levels)
        return data


@dataclass(frozen=True)
class DeviceRegistration:
    device_id: str
    patient_id: str
    wd_type: WearableType
    zone: str
    wallet: Wallet
    attributes: AttributeSet
    owner_node: int
    attributes_digest: str


@dataclass(frozen=True)
class Policy:
    policy_id: str
    subject_attribute_pattern: tuple[str, str]  # (zone, wd_type)
    object_attribute_pattern: str  # transaction kind
    min_trust: float
    permitted_kinds: frozenset[TxKind]

    def encode(self) -> bytes:
        return _canonical(
            {
                "policy_id": self.policy_id,
                "subject": list(self.subject_attribute_pattern),
                "object": self.object_attribute_pattern,
                "min_trust": repr(self.min_trust),
                "permitted_kinds": sorted(k.value for k in self.permitted_kinds),
            }
        )

    @classmethod
    def decode(cls, data: bytes) -> Policy:
        d = json.loads(data)
        return cls(d["policy_id"], tuple(d["subject"]), d["object"], float(d["min_trust"]), frozenset(TxKind(k) for k in d["permitted_kinds"]))

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()

    @property
    def pattern(self) -> tuple[str, str, str]:
        return (*self.subject_attribute_pattern, self.object_attribute_pattern)


@dataclass(frozen=True)
class PolicyRequest:
    request_id: int
    wallet_tag: str
    kind: TxKind
    attributes: AttributeSet
    timestamp: int = 0

    @property
    def pattern(self) -> tuple[str, str, str]:
        return (self.attributes.wd_zone, self.attributes.wd_type, self.kind.value)


class DecisionOutcome(enum.Enum):
    GRANTED = "AccessGranted"
    DENIED = "AccessDenied"
    GENERATED_GRANTED = "PolicyGenerated-then-Granted"
    GENERATED_DENIED = "PolicyGenerated-then-Denied"

    @property
    def granted(self) -> bool:
        return self in (DecisionOutcome.GRANTED, DecisionOutcome.GENERATED_GRANTED)

    @property
    def generated(self) -> bool:
        return self in (DecisionOutcome.GENERATED_GRANTED, DecisionOutcome.GENERATED_DENIED)


@dataclass(frozen=True)
class PolicyDecision:
    request_id: int
    outcome: DecisionOutcome
    matched_policy: str | None
    decision_hash: str
    device_id: str
    patient_id: str
    owner_node: int
    session_token: str | None = None
    timestamp: int = 0

    def to_json(self) -> dict:
        return {
            "request_id": self.request_id,
            "outcome": self.outcome.value,
            "matched_policy": self.matched_policy,
            "decision_hash": self.decision_hash,
            "device_id": self.device_id,
            "patient_id": self.patient_id,
            "owner_node": self.owner_node,
            "session_token": self.session_token,
            "timestamp": self.timestamp,
        }


@dataclass
class Gateway:
    """PEP, PDP, PE and TE over one registry and one content store.

    ``patients`` maps each enrolled patient id to the node that hosts it.
    ``events`` collects (kind, record) pairs the caller must put on a ledger:
    registrations, policy generations and every decision.
    """

    node_count: int
    pi_node: int
    patients: dict[str, int] = field(default_factory=dict)
    store: ContentStore = field(default_factory=ContentStore)
    registry: dict[str, DeviceRegistration] = field(default_factory=dict)
    policies: dict[tuple[str, str, str], str] = field(default_factory=dict)
    decisions: list[PolicyDecision] = field(default_factory=list)
    events: list[tuple[str, dict]] = field(default_factory=list)
    generations: int = 0
    _devices: set[tuple[str, str]] = field(default_factory=set)
    _applied: set[str] = field(default_factory=set)
    _forwarded: list[PolicyRequest] = field(default_factory=list)

    def enroll(self, patient_id: str, node: int) -> None:
        self.patients[patient_id] = node

    # registration

    def register_device(self, patient_id: str, wd_type: WearableType | str, device_id: str | None = None, timestamp: int = 0) -> DeviceRegistration:
        if patient_id not in self.patients:
            raise UnknownPatient(f"patient {patient_id} is not enrolled on any channel")
        wd_type = WearableType(wd_type)
        device_id = device_id or f"{patient_id}-{wd_type.value}"
        if (patient_id, device_id) in self._devices:
            raise DuplicateDevice(f"device {device_id} already registered for {patient_id}")
        zone = ZONE_OF[wd_type]
        seed = f"{patient_id}|{device_id}|{len(self.registry)}"
        wallet = Wallet(
            hashlib.sha256(f"wallet-pub:{seed}".encode()).hexdigest()[:24],
            hashlib.sha256(f"wallet-sec:{seed}".encode()).hexdigest(),
        )
        attrs = AttributeSet(
            wd_recognizer=device_id,
            wd_type=wd_type.value,
            wd_age=0,
            wd_priority=1 + "ABCDEFG".index(zone) % 3,
            wd_category="wearable",
            wd_zone=zone,
            environment_timestamp=timestamp,
        )
        digest = self.store.put(_canonical(attrs.to_json()))
        reg = DeviceRegistration(device_id, patient_id, wd_type, zone, wallet, attrs, self.patients[patient_id], digest)
        self._devices.add((patient_id, device_id))
        self.registry[wallet.public_tag] = reg
        self.events.append(
            ("registration", {"event": "DeviceRegistered", "patient_id": patient_id, "device_id": device_id, "zone": zone, "wallet": wallet.public_tag, "attributes": digest})
        )
        return reg

    def request_for(self, reg: DeviceRegistration, request_id: int, kind: TxKind = TxKind.VITALS, timestamp: int = 0) -> PolicyRequest:
        """A well-formed request carrying the device's registered attributes."""
        attrs = AttributeSet(**{**reg.attributes.to_json(), "environment_timestamp": timestamp, "trust_levels": None})
        return PolicyRequest(request_id, reg.wallet.public_tag, kind, attrs, timestamp)

    # enforcement point

    def pep_receive(self, request: PolicyRequest) -> PolicyRequest:
        """Edge check; returns the request unchanged when forwarded to the PDP."""
        reg = self.registry.get(request.wallet_tag)
        if reg is None:
            raise UnregisteredDevice(f"wallet {request.wallet_tag!r} is not registered")
        missing = [m for m in request.attributes.missing() if m != "trust_levels"]
        if missing:
            raise MalformedAttributes(f"request {request.request_id} lacks {', '.join(missing)}")
        if request.attributes.wd_zone != reg.zone or request.attributes.wd_type != reg.wd_type.value:
            raise MalformedAttributes(f"request {request.request_id} attributes disagree with the registry")
        self._forwarded.append(request)
        return request

    # decision point and policy engine

    def _trust_levels(self, reg: DeviceRegistration, trust: TrustVector) -> tuple[float, float, float]:
        owner = trust.values.get(reg.owner_node, 0.0)
        return owner, trust.values.get(self.pi_node, 0.0), owner

    def fetch_policy(self, pattern: tuple[str, str, str]) -> Policy | None:
        digest = self.policies.get(pattern)
        return None if digest is None else Policy.decode(self.store.get(digest))

    def pe_generate_policy(self, request: PolicyRequest, trust: TrustVector) -> Policy:
        reg = self.registry[request.wallet_tag]
        zone, wd_type, kind = request.pattern
        floor = 1.0 / self.node_count
        min_trust = max(trust.values.get(reg.owner_node, 0.0), floor)
        policy_id = "pol-" + hashlib.sha256(f"{zone}|{wd_type}|{kind}".encode()).hexdigest()[:12]
        policy = Policy(policy_id, (zone, wd_type), kind, min_trust, frozenset({request.kind}))
        self.store.put(policy.encode())
        self.policies[policy.pattern] = policy.content_hash
        self.generations += 1
        self.events.append(("policy", {"event": "PolicyGenerated", "policy_id": policy_id, "content_hash": policy.content_hash}))
        return policy

    def pdp_evaluate(self, request: PolicyRequest, trust: TrustVector) -> PolicyDecision:
        reg = self.registry[request.wallet_tag]
        levels = self._trust_levels(reg, trust)
        attrs = request.attributes.with_trust(*levels)
        policy = self.fetch_policy(request.pattern)
        generated = policy is None
        if generated:
            policy = self.pe_generate_policy(request, trust)
        permission = attrs.trust_levels[2] >= policy.min_trust and request.kind in policy.permitted_kinds
        if generated:
            outcome = DecisionOutcome.GENERATED_GRANTED if permission else DecisionOutcome.GENERATED_DENIED
        else:
            outcome = DecisionOutcome.GRANTED if permission else DecisionOutcome.DENIED
        token = None
        if permission:
            expiry = request.timestamp + SESSION_TTL
            token = hashlib.sha256(f"session|{reg.device_id}|{self.pi_node}|{expiry}".encode()).hexdigest()
        body = {
            "request_id": request.request_id,
            "wallet": request.wallet_tag,
            "kind": request.kind.value,
            "outcome": outcome.value,
            "policy": policy.policy_id,
            "timestamp": request.timestamp,
        }
        decision_hash = hashlib.sha256(_canonical(body)).hexdigest()
        decision = PolicyDecision(request.request_id, outcome, policy.policy_id, decision_hash, reg.device_id, reg.patient_id, reg.owner_node, token, request.timestamp)
        self.decisions.append(decision)
        self.events.append(("decision", {"event": "PolicyDecision", **body, "decision_hash": decision_hash}))
        return decision

    def admit(self, request: PolicyRequest, trust: TrustVector) -> PolicyDecision:
        """PEP then PDP in one call."""
        return self.pdp_evaluate(self.pep_receive(request), trust)

    # trust engine hook

    def te_update(self, decision: PolicyDecision, ledger: TrustLedger) -> TrustLedger:
        """Turn a finalized decision into one counter update; replays are ignored."""
        if decision.decision_hash in self._applied:
            return ledger
        self._applied.add(decision.decision_hash)
        if decision.owner_node == self.pi_node:
            return ledger
        outcome = Outcome.SATISFACTORY if decision.outcome.granted else Outcome.UNSATISFACTORY
        ledger.record(decision.owner_node, self.pi_node, outcome)
        return ledger

    # exports

    def write_registry_csv(self, fp: IO[str]) -> None:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["patient_id", "device_id", "wd_type", "zone", "wallet"])
        for reg in sorted(self.registry.values(), key=lambda r: (r.patient_id, r.device_id)):
            writer.writerow([reg.patient_id, reg.device_id, reg.wd_type.value, reg.zone, reg.wallet.public_tag])

    def write_policies_jsonl(self, fp: IO[str]) -> None:
        for pattern in sorted(self.policies):
            policy = self.fetch_policy(pattern)
            record = json.loads(policy.encode())
            record["content_hash"] = policy.content_hash
            fp.write(json.dumps(record, sort_keys=True) + "\n")

    def write_decisions_jsonl(self, fp: IO[str], decisions: Iterable[PolicyDecision] | None = None) -> None:
        for d in self.decisions if decisions is None else decisions:
            fp.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
