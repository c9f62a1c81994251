"""Run metrics and their JSON / CSV serializations."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .scenario import SCHEMA_VERSION


@dataclass
class InstanceRecord:
    """One consensus instance: one channel, one height, one round."""

    round: int
    channel: str
    height: int
    cg: list[int]
    pg: list[int]
    f: int
    byzantine_in_cg: int
    finalized: bool
    block_hash: str | None
    messages: int
    latency: int
    attempts: int
    view_changes: int = 0
    prepare_quorum_sizes: list[int] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)


@dataclass
class Metrics:
    scenario: str
    seed: int
    mode: str
    rounds: int
    schema_version: int = SCHEMA_VERSION
    rounds_finalized: int = 0
    rounds_aborted: int = 0
    safety_violations: int = 0
    view_change_fallbacks: int = 0
    view_changes: int = 0
    messages_total: int = 0
    messages_by_kind: dict[str, int] = field(default_factory=dict)
    messages_dropped: int = 0
    replication_messages: int = 0
    latency_per_round: list[int] = field(default_factory=list)
    trust_trajectory: list[dict[str, float]] = field(default_factory=list)
    trust_converged: list[bool] = field(default_factory=list)
    group_membership_per_epoch: list[dict] = field(default_factory=list)
    policy_decisions: dict[str, int] = field(default_factory=dict)
    policy_generations: int = 0
    tamper_detections: int = 0
    telemetry_deviations_injected: int = 0
    telemetry_deviations_found: int = 0
    fault_actions: dict[str, int] = field(default_factory=dict)
    transactions_admitted: int = 0
    transactions_finalized: int = 0
    pending_at_horizon: int = 0
    unrouted_items: int = 0
    tips: dict[str, str] = field(default_factory=dict)
    instances: list[InstanceRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "channel", "height", "messages", "latency", "finalized", "violations"])
        for inst in self.instances:
            writer.writerow([inst.round, inst.channel, inst.height, inst.messages, inst.latency, int(inst.finalized), len(inst.violations)])
        return buf.getvalue()
