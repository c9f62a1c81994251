"""Epoch orchestration: workload, admission, groups, consensus, replication, trust."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import replace

from ..consensus import (
    ConflictingFinal,
    Finalized,
    Identity,
    Kind,
    ReplicaNode,
    ReplyTally,
    RoundContext,
    Send,
    make_message,
)
from ..errors import UnknownNode
from ..gateway import ContentStore, Gateway, PolicyDecision
from ..groups import ConsensusGroup, PrimaryGroup, build_consensus_group, build_primary_group, byzantine_bound
from ..ledger import (
    ZERO_HASH,
    Channel,
    Origin,
    Transaction,
    TxKind,
    build_block,
    replicate_to_channel,
    telemetry_deviation,
    trace,
)
from ..trust import Outcome, TrustLedger, TrustVector, compute_global_trust
from .faults import apply_behavior
from .metrics import InstanceRecord, Metrics
from .network import EventLoop, subsystem_rng
from .scenario import Behavior, ChannelSpec, FaultWindow, NodeBehavior, ScenarioConfig
from .workload import RH_RANGE, TEMP_RANGE, WorkloadGenerator, patient_roster

log = logging.getLogger("tpbft.sim")

OFFCHAIN_THRESHOLD = 1024


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class Simulation:
    """One deterministic scenario run.  Call :meth:`run` once."""

    def __init__(self, config: ScenarioConfig, *, trace: bool = False):
        self.config = config
        self.baseline = config.mode == "baseline"
        self.nodes = config.nodes
        self.identity = Identity.from_seed(config.seed, self.nodes)
        self.rng_latency = subsystem_rng(config.seed, "latency")
        self.rng_workload = subsystem_rng(config.seed, "workload")
        self.tracing = trace
        self.trace_records: list[dict] = []

        self.specs = {spec.name: spec for spec in config.channels}
        self.channels = {
            spec.name: Channel(spec.name, frozenset(spec.active), spec.client, channel_id=k)
            for k, spec in enumerate(config.channels)
        }
        self.route = self._routing_table()
        vitals_channel = self.route.get(TxKind.VITALS) or config.channels[0]
        self.patient_node = config.patient_node or vitals_channel.client
        self.pi_node = config.pi_node or next(
            (n for n in vitals_channel.active if n != self.patient_node), self.patient_node
        )

        self.trust_ledger = TrustLedger.for_nodes(self.nodes)
        self.trust = TrustVector.uniform(self.nodes)
        self.gateway = Gateway(config.node_count, self.pi_node, store=ContentStore())
        self.workload = WorkloadGenerator(config.workload, config.rounds, self.rng_workload)
        self.patients = patient_roster(config.workload)
        self.devices: dict[str, list] = {}

        self.pending: dict[str, list[Transaction]] = {name: [] for name in self.specs}
        self.views: dict[str, int] = {name: 0 for name in self.specs}
        self.clock = 0
        self.round = 0
        self.next_tx_id = 1
        self._event_cursor = 0
        self._request_id = 0
        self.admitted: list[int] = []
        self.decision_tx: dict[int, PolicyDecision] = {}
        self.injected_deviations: set[tuple[int, int]] = set()
        self.fault_actions: Counter = Counter()
        self.metrics = Metrics(config.name, config.seed, config.mode, config.rounds)
        self._ran = False
        self._genesis()

    # setup

    def _routing_table(self) -> dict[TxKind, ChannelSpec]:
        """First channel listing a kind; a channel with no kinds list takes anything else."""
        route = {}
        catch_all = next((s for s in self.config.channels if not s.kinds), None)
        for kind in TxKind:
            spec = next((s for s in self.config.channels if kind in s.kinds), catch_all)
            if spec is not None:
                route[kind] = spec
        return route

    def _genesis(self) -> None:
        for spec in self.config.channels:
            record = {"event": "ChannelCreated", "channel": spec.name, "active": list(spec.active), "client": spec.client}
            tx = Transaction(self._take_tx_id(), TxKind.PROTOCOL, _canonical(record), 0, Origin())
            self.admitted.append(tx.tx_id)
            block = build_block(None, [tx], 0, self.config.difficulty)
            for node in spec.active:
                self.channels[spec.name].append_local(node, block)

    def inject_fault(self, node: int, behavior: NodeBehavior | Behavior | str, window: tuple[int, int | None] = (0, None)) -> None:
        """Schedule a fault before :meth:`run`."""
        if node not in self.nodes:
            raise UnknownNode(f"node {node} is not in the network")
        if self._ran:
            raise RuntimeError("faults must be scheduled before the run starts")
        if not isinstance(behavior, NodeBehavior):
            behavior = NodeBehavior(Behavior(behavior))
        self.config = replace(self.config, fault_plan=self.config.fault_plan + (FaultWindow(node, behavior, *window),))

    # transactions

    def _take_tx_id(self) -> int:
        tx_id = self.next_tx_id
        self.next_tx_id += 1
        return tx_id

    def _submit(self, kind: TxKind, record: dict, origin: Origin = Origin(), wallet: str = "") -> Transaction | None:
        spec = self.route.get(kind)
        if spec is None:
            self.metrics.unrouted_items += 1
            return None
        payload = _canonical(record)
        if len(payload) > OFFCHAIN_THRESHOLD:
            digest = self.gateway.store.put(payload)
            payload = _canonical({"offchain": digest, "wallet": wallet, "size": len(payload)})
        tx = Transaction(self._take_tx_id(), kind, payload, self.clock, origin)
        self.pending[spec.name].append(tx)
        self.admitted.append(tx.tx_id)
        return tx

    def _flush_gateway_events(self) -> None:
        events = self.gateway.events
        while self._event_cursor < len(events):
            kind, record = events[self._event_cursor]
            self._event_cursor += 1
            tx = self._submit(TxKind.PROTOCOL, record)
            if tx is not None and kind == "decision":
                decision = next(d for d in reversed(self.gateway.decisions) if d.decision_hash == record["decision_hash"])
                self.decision_tx[tx.tx_id] = decision

    def _generate_workload(self, r: int) -> None:
        wl = self.config.workload
        gw = self.gateway
        if r == 0:
            for patient in self.patients:
                gw.enroll(patient.patient_id, self.patient_node)
                self.devices[patient.patient_id] = [
                    gw.register_device(patient.patient_id, wd, timestamp=self.clock) for wd in wl.devices
                ]
                self._flush_gateway_events()
                self._submit(TxKind.CONSENT, self.workload.consent(patient), Origin(patient.country, patient.site, patient.patient_id))
        for patient in self.patients:
            for _ in range(wl.readings_per_patient):
                reg = self.devices[patient.patient_id][self.rng_workload.randrange(len(wl.devices))]
                self._request_id += 1
                request = gw.request_for(reg, self._request_id, TxKind.VITALS, self.clock)
                decision = gw.admit(request, self.trust)
                self._flush_gateway_events()
                if decision.outcome.granted:
                    origin = Origin(patient.country, patient.site, patient.patient_id, reg.zone)
                    self._submit(TxKind.VITALS, self.workload.vitals(r, patient, reg.wd_type.value), origin, reg.wallet.public_tag)
        for k in range(wl.labs_per_round):
            patient = self.patients[k % len(self.patients)] if self.patients else None
            if patient is not None:
                self._submit(TxKind.LAB, self.workload.lab(r, k, patient), Origin(patient.country, patient.site, patient.patient_id))
        for k in range(wl.telemetry_per_round):
            self.clock += 1
            reading, deviated = self.workload.telemetry(r, k)
            tx = self._submit(TxKind.TELEMETRY, reading, Origin("sponsor", "depot"))
            if deviated and tx is not None:
                self.injected_deviations.add((tx.tx_id, tx.timestamp))
        self.clock += 1

    # consensus

    def _groups(self, spec: ChannelSpec, trust: TrustVector) -> tuple[ConsensusGroup, PrimaryGroup]:
        if self.baseline:
            members = tuple(sorted(spec.active))
            cg = ConsensusGroup(members, byzantine_bound(len(members)))
            view = self.views[spec.name]
            return cg, PrimaryGroup((members[view % len(members)],))
        cg = build_consensus_group(trust, self.config.group_config, spec.active)
        return cg, build_primary_group(cg, trust, self.config.group_config)

    def _count(self, send: Send, now: int, instance: list[int]) -> None:
        kind = send.msg.kind.value
        self.metrics.messages_total += 1
        self.metrics.messages_by_kind[kind] = self.metrics.messages_by_kind.get(kind, 0) + 1
        instance[0] += 1
        if self.tracing:
            msg = send.msg
            self.trace_records.append(
                {"channel": msg.channel, "kind": kind, "height": msg.height, "sender": msg.sender, "receiver": send.to, "tick": now, "block_hash": msg.block_hash.hex()}
            )

    def _run_instance(self, spec: ChannelSpec, r: int) -> None:
        cfg = self.config
        channel = self.channels[spec.name]
        tip = channel.tip()
        txs = list(self.pending[spec.name])
        height = tip.height + 1
        behaviors = {n: cfg.behavior(n, r) for n in self.nodes}
        cg, pg = self._groups(spec, self.trust)
        self.metrics.group_membership_per_epoch.append(
            {"round": r, "channel": spec.name, "cg": list(cg.members), "pg": list(pg.members), "f": cg.f}
        )
        start = self.clock
        ctx = RoundContext(spec.name, height, cg, pg, tip, start, spec.client)
        replicas = {m: ReplicaNode(m, ctx, self.identity, txs) for m in cg.members}
        tally = ReplyTally(cg.f, cg.members)
        reply_from: dict[int, tuple[bytes, int]] = {}
        loop = EventLoop(cfg.latency, self.rng_latency, now=start)
        counter = [0]
        violations: list[str] = []
        state = {"attempt": 0, "done": False, "finalized_tick": None, "view_changes": 0, "aborted": False}
        members = list(cg.members)

        def dispatch(sender: int, sends: list[Send]) -> None:
            held = replicas[sender].block if sender in replicas else None
            for send in sends:
                out, deviated = apply_behavior(behaviors[sender], send, self.identity, held)
                if deviated:
                    self.fault_actions[sender] += 1
                for s, extra in out:
                    self._count(s, loop.now, counter)
                    if not loop.send(sender, s, extra):
                        self.metrics.messages_dropped += 1

        def proposer_for(attempt: int) -> int:
            if self.baseline:
                return replicas[members[0]].ctx.pg.members[0]
            return pg.members[(height + attempt) % len(pg)]

        def start_attempt(attempt: int) -> None:
            p = proposer_for(attempt)
            loop.timer(loop.now, ("propose", p, attempt))
            loop.timer(loop.now + cfg.stage_timeout, ("group_deadline", p, attempt))
            loop.timer(loop.now + cfg.attempt_timeout, ("attempt_timeout", attempt))

        def honest_committed() -> bool:
            return any(replicas[m].committed is not None and not behaviors[m].byzantine for m in members)

        def view_change() -> None:
            # classical PBFT: everyone live announces the view change, the new primary confirms
            self.views[spec.name] += 1
            state["view_changes"] += 1
            self.metrics.view_changes += 1
            new_primary = members[self.views[spec.name] % len(members)]
            for m in members:
                msg = make_message(self.identity, Kind.VIEW_CHANGE, height, ZERO_HASH, m, channel=spec.name)
                dispatch(m, [Send(o, msg) for o in members if o != m])
            nv = make_message(self.identity, Kind.NEW_VIEW, height, ZERO_HASH, new_primary, channel=spec.name)
            dispatch(new_primary, [Send(o, nv) for o in members if o != new_primary])
            new_ctx = replace(ctx, pg=PrimaryGroup((new_primary,)))
            for node in replicas.values():
                node.ctx = new_ctx

        start_attempt(0)
        while True:
            event = loop.peek()
            if event is None:
                break
            if state["done"] and event.kind == "timer":
                loop.discard()
                continue
            event = loop.pop()
            now = loop.now
            if event.kind == "timer":
                action = event.payload
                if action[-1] != state["attempt"]:
                    continue
                if action[0] == "propose":
                    dispatch(action[1], replicas[action[1]].propose(now))
                elif action[0] == "group_deadline":
                    dispatch(action[1], replicas[action[1]].group_deadline(now))
                else:
                    if honest_committed():
                        state["done"] = True
                        continue
                    state["attempt"] += 1
                    limit = len(members) if self.baseline else len(pg)
                    if state["attempt"] >= limit:
                        state["done"] = state["aborted"] = True
                        self.metrics.view_change_fallbacks += 1
                        log.info("round %d channel %s: primary group exhausted", r, spec.name)
                        continue
                    if self.baseline:
                        view_change()
                    start_attempt(state["attempt"])
                continue
            send: Send = event.payload
            msg = send.msg
            if msg.kind is Kind.REPLY:
                if send.to != spec.client or not self.identity.verify(msg) or msg.sender not in cg:
                    continue
                reply_from.setdefault(msg.sender, (msg.block_hash, now))
                try:
                    result = tally.add(msg.sender, msg.block_hash)
                except ConflictingFinal as exc:
                    violations.append("ConflictingFinal")
                    log.warning("round %d channel %s: %s", r, spec.name, exc)
                    continue
                if result is not None and state["finalized_tick"] is None:
                    state["finalized_tick"] = now
                    state["done"] = True
                continue
            replica = replicas.get(send.to)
            if replica is not None and behaviors[send.to].kind is not Behavior.CRASH_SILENT:
                dispatch(send.to, replica.receive(msg, now))

        end = loop.now
        honest = [m for m in members if not behaviors[m].byzantine]
        committed = {m: replicas[m].committed for m in honest if replicas[m].committed is not None}
        final_hash = tally.finalized.block_hash if tally.finalized else None
        if final_hash is None and committed:
            # replies were lost but an honest node already committed: the block stands
            final_hash = committed[min(committed)].hash
        block = None
        if final_hash is not None:
            holders = [replicas[m].block for m in honest if replicas[m].block is not None and replicas[m].block.hash == final_hash]
            if holders:
                block = holders[0]
            else:
                violations.append("FinalizedUnheldBlock")
        if len({b.hash for b in committed.values()}) > 1 or (final_hash and any(b.hash != final_hash for b in committed.values())):
            violations.append("DivergentCommit")

        finalized = block is not None
        if finalized:
            forks_before = len(channel.forks)
            for m in sorted(committed):
                channel.append_local(m, committed[m])
            missing = sum(1 for n in spec.active if len(channel.storage_of(n)) <= block.height)
            replicate_to_channel(channel, block, Finalized(block.hash))
            self.metrics.replication_messages += missing
            if len(channel.forks) > forks_before:
                violations.append("ChannelFork")
            included = {tx.tx_id for tx in block.transactions}
            self.pending[spec.name] = [tx for tx in self.pending[spec.name] if tx.tx_id not in included]
            self.metrics.rounds_finalized += 1
        else:
            self.metrics.rounds_aborted += 1

        if not self.baseline:
            self._record_trust(spec, cg, pg, replicas, behaviors, block, state["finalized_tick"] or end, reply_from)
        for m in members:
            self.metrics.tamper_detections += len(replicas[m].rejections)

        self.metrics.safety_violations += len(violations)
        self.metrics.latency_per_round.append(end - start)
        self.metrics.instances.append(
            InstanceRecord(
                round=r,
                channel=spec.name,
                height=height,
                cg=list(cg.members),
                pg=list(pg.members),
                f=cg.f,
                byzantine_in_cg=sum(1 for m in members if behaviors[m].byzantine),
                finalized=finalized,
                block_hash=block.hash.hex() if block else None,
                messages=counter[0],
                latency=end - start,
                attempts=state["attempt"] + 1,
                view_changes=state["view_changes"],
                prepare_quorum_sizes=[replicas[m].prepared_with for m in members if replicas[m].prepared_with is not None],
                violations=violations,
            )
        )
        self.clock = end + 1

    def _record_trust(self, spec, cg, pg, replicas, behaviors, block, finalize_tick, reply_from) -> None:
        led = self.trust_ledger
        members = cg.members
        recorders = [m for m in members if not behaviors[m].byzantine]
        if block is not None:
            deadline = finalize_tick + self.config.stage_timeout
            for i in recorders:
                seen = replicas[i].prepare_from
                for j in members:
                    if j == i:
                        continue
                    got = seen.get(j)
                    ok = got is not None and got[0] == block.hash and got[1] <= deadline
                    led.record(i, j, Outcome.SATISFACTORY if ok else Outcome.UNSATISFACTORY)
            client = spec.client
            for j in members:
                if j == client:
                    continue
                got = reply_from.get(j)
                ok = got is not None and got[0] == block.hash and got[1] <= deadline
                led.record(client, j, Outcome.SATISFACTORY if ok else Outcome.UNSATISFACTORY)
            for tx in block.transactions:
                decision = self.decision_tx.get(tx.tx_id)
                if decision is not None:
                    self.gateway.te_update(decision, led)
        else:
            for i in recorders:
                for j in pg.members:
                    if j != i:
                        led.record(i, j, Outcome.UNSATISFACTORY)
        for i in recorders:
            for sender in sorted({s for s, _ in replicas[i].rejections}):
                if sender != i:
                    led.record(i, sender, Outcome.UNSATISFACTORY)
        self.trust = compute_global_trust(led, self.trust)
        self.metrics.trust_converged.append(self.trust.converged)

    # driver

    def _snapshot_trust(self) -> None:
        self.metrics.trust_trajectory.append({str(n): self.trust.values[n] for n in self.nodes})

    def run(self) -> Metrics:
        if self._ran:
            raise RuntimeError("a simulation runs once")
        self._ran = True
        for r in range(self.config.rounds):
            self.round = r
            self._snapshot_trust()
            self._generate_workload(r)
            for spec in self.config.channels:
                if self.pending[spec.name]:
                    self._run_instance(spec, r)
        self._snapshot_trust()
        self._finish()
        return self.metrics

    def _finish(self) -> None:
        m = self.metrics
        m.policy_decisions = dict(sorted(Counter(d.outcome.value for d in self.gateway.decisions).items()))
        m.policy_generations = self.gateway.generations
        m.fault_actions = {str(n): self.fault_actions[n] for n in sorted(self.fault_actions)}
        m.transactions_admitted = len(self.admitted)
        m.transactions_finalized = sum(len(b.transactions) for ch in self.channels.values() for b in ch.storage_of(ch.reference_node))
        m.pending_at_horizon = sum(len(p) for p in self.pending.values())
        m.tips = {name: ch.tip().hash.hex() for name, ch in self.channels.items()}
        m.telemetry_deviations_injected = len(self.injected_deviations)
        m.telemetry_deviations_found = len(self.recovered_deviations())
        for name, ch in self.channels.items():
            if not ch.tips_agree():
                m.safety_violations += 1
                if m.instances:
                    m.instances[-1].violations.append(f"DivergentTips:{name}")

    # queries

    def recovered_deviations(self) -> set[tuple[int, int]]:
        predicate = telemetry_deviation(TEMP_RANGE, RH_RANGE)
        return {(hit.tx.tx_id, hit.tx.timestamp) for ch in self.channels.values() for hit in trace(ch, predicate)}

    def conservation_problems(self) -> list[str]:
        """Admitted transactions missing, duplicated, or both pending and finalized."""
        seen = Counter()
        for ch in self.channels.values():
            for b in ch.storage_of(ch.reference_node):
                seen.update(tx.tx_id for tx in b.transactions)
        pending = Counter(tx.tx_id for p in self.pending.values() for tx in p)
        problems = []
        for tx_id in self.admitted:
            total = seen[tx_id] + pending[tx_id]
            if total != 1:
                problems.append(f"tx {tx_id} appears {total} times")
        return problems

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.trace_records)


def run(config: ScenarioConfig, *, trace: bool = False) -> Metrics:
    return Simulation(config, trace=trace).run()


def baseline_pbft_mode(config: ScenarioConfig, *, trace: bool = False) -> Metrics:
    """Flat PBFT over every active node, same workload, latency and seed."""
    return Simulation(replace(config, mode="baseline"), trace=trace).run()


def trust_table(config: ScenarioConfig, metrics: Metrics) -> list[tuple[int, int, float, bool, bool]]:
    """(epoch, node, global trust, in a consensus group, in a primary group) rows.

    Epoch e holds the trust vector in force at the start of round e, with the
    groups actually formed in that round.  The last epoch is the final vector
    with the groups it would produce.
    """
    rows = []
    for epoch, snapshot in enumerate(metrics.trust_trajectory):
        groups = [g for g in metrics.group_membership_per_epoch if g["round"] == epoch]
        if epoch == config.rounds and config.mode != "baseline":
            vector = {int(k): v for k, v in snapshot.items()}
            groups = []
            for spec in config.channels:
                cg = build_consensus_group(vector, config.group_config, spec.active)
                groups.append({"cg": list(cg.members), "pg": list(build_primary_group(cg, vector, config.group_config).members)})
        in_cg = {n for g in groups for n in g["cg"]}
        in_pg = {n for g in groups for n in g["pg"]}
        for node in config.nodes:
            rows.append((epoch, node, snapshot[str(node)], node in in_cg, node in in_pg))
    return rows
