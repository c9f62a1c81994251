"""Scenario documents: JSON objects with optional ``#`` comment lines.

Every invariant is checked at load time.  Syntax problems raise ParseError
with the offending line; semantic ones raise ValidationError naming the
field path (for example ``channels[1].active``).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from ..errors import ParseError, UnknownNode, ValidationError
from ..gateway import WearableType
from ..groups import GroupConfig
from ..ledger import TxKind

SCHEMA_VERSION = 1
DEFAULT_STAGE_TIMEOUT = 10


class Behavior(enum.Enum):
    HONEST = "Honest"
    CRASH_SILENT = "CrashSilent"
    EQUIVOCATOR = "Equivocator"
    TAMPERER = "Tamperer"
    LAGGARD = "Laggard"


@dataclass(frozen=True)
class NodeBehavior:
    kind: Behavior = Behavior.HONEST
    delay: int = 0

    @property
    def byzantine(self) -> bool:
        """Counts against f.  A laggard is slow but follows the protocol."""
        return self.kind not in (Behavior.HONEST, Behavior.LAGGARD)


HONEST = NodeBehavior()


@dataclass(frozen=True)
class FaultWindow:
    """``behavior`` applies to ``node`` for rounds ``start <= r < end`` (end None = forever)."""

    node: int
    behavior: NodeBehavior
    start: int = 0
    end: int | None = None

    def active(self, round_index: int) -> bool:
        return self.start <= round_index and (self.end is None or round_index < self.end)


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    active: tuple[int, ...]
    client: int
    kinds: tuple[TxKind, ...] = ()


@dataclass(frozen=True)
class LatencyModel:
    min: int = 1
    max: int = 3
    drop: float = 0.0


@dataclass(frozen=True)
class WorkloadConfig:
    countries: int = 1
    sites_per_country: int = 1
    patients_per_site: int = 2
    readings_per_patient: int = 1
    devices: tuple[WearableType, ...] = (WearableType.SMART_WATCH, WearableType.ECG_PATCH)
    labs_per_round: int = 0
    lab_report_bytes: int = 1500
    telemetry_per_round: int = 0
    telemetry_deviations: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    node_count: int
    channels: tuple[ChannelSpec, ...]
    group_config: GroupConfig = GroupConfig()
    difficulty: int = 2
    stage_timeout: int = DEFAULT_STAGE_TIMEOUT
    attempt_timeout: int = 4 * DEFAULT_STAGE_TIMEOUT
    rounds: int = 5
    latency: LatencyModel = LatencyModel()
    fault_plan: tuple[FaultWindow, ...] = ()
    workload: WorkloadConfig = WorkloadConfig()
    patient_node: int | None = None
    pi_node: int | None = None
    mode: str = "tpbft"
    name: str = "scenario"

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(range(1, self.node_count + 1))

    def behavior(self, node: int, round_index: int) -> NodeBehavior:
        """Latest matching window wins, so later entries override earlier ones."""
        current = HONEST
        for window in self.fault_plan:
            if window.node == node and window.active(round_index):
                current = window.behavior
        return current

    def with_seed(self, seed: int) -> ScenarioConfig:
        return replace(self, seed=seed)

    def without_faults(self, nodes=None) -> ScenarioConfig:
        keep = () if nodes is None else tuple(w for w in self.fault_plan if w.node not in set(nodes))
        return replace(self, fault_plan=keep)


def inject_fault(config: ScenarioConfig, node: int, behavior: NodeBehavior | Behavior | str, window: tuple[int, int | None] = (0, None)) -> ScenarioConfig:
    """Copy of ``config`` with one more fault window scheduled."""
    if node not in config.nodes:
        raise UnknownNode(f"node {node} is not in a {config.node_count}-node network")
    if not isinstance(behavior, NodeBehavior):
        behavior = NodeBehavior(Behavior(behavior))
    start, end = window
    if start < 0 or (end is not None and end < start):
        raise ValidationError("fault_plan", f"bad window {window}")
    if start >= config.rounds:
        raise ValidationError("fault_plan", f"window {window} starts after the last round")
    return replace(config, fault_plan=config.fault_plan + (FaultWindow(node, behavior, start, end),))


# parsing

def _strip_comments(text: str) -> str:
    # blank out comment lines so JSON error line numbers still match the file
    return "\n".join("" if line.lstrip().startswith("#") else line for line in text.split("\n"))


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ValidationError(path, message)


def _int(value, path: str, minimum: int | None = None) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool), path, f"expected an integer, got {value!r}")
    if minimum is not None:
        _require(value >= minimum, path, f"must be >= {minimum}, got {value}")
    return value


def _number(value, path: str) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), path, f"expected a number, got {value!r}")
    return float(value)


def _enum(cls, value, path: str):
    try:
        return cls(value)
    except ValueError:
        options = ", ".join(m.value for m in cls)
        raise ValidationError(path, f"unknown value {value!r}; expected one of {options}") from None


def _node(value, path: str, n: int) -> int:
    _int(value, path)
    _require(1 <= value <= n, path, f"node {value} is outside the {n}-node network")
    return value


_TOP_LEVEL = {
    "schema_version", "name", "seed", "node_count", "channels", "group_config", "difficulty",
    "stage_timeout", "attempt_timeout", "rounds", "latency", "fault_plan", "workload",
    "patient_node", "pi_node", "mode",
}


def parse_scenario(doc: dict) -> ScenarioConfig:
    _require(isinstance(doc, dict), "<root>", "scenario must be a JSON object")
    unknown = sorted(set(doc) - _TOP_LEVEL)
    _require(not unknown, unknown[0] if unknown else "", "unknown field")
    version = doc.get("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, "schema_version", f"unsupported version {version!r}")
    for key in ("seed", "node_count", "channels"):
        _require(key in doc, key, "required field missing")
    seed = _int(doc["seed"], "seed", 0)
    _require(seed < 2**64, "seed", "must fit in 64 bits")
    n = _int(doc["node_count"], "node_count", 1)

    raw_channels = doc["channels"]
    _require(isinstance(raw_channels, list) and raw_channels, "channels", "need at least one channel")
    channels = []
    names = set()
    for k, ch in enumerate(raw_channels):
        p = f"channels[{k}]"
        _require(isinstance(ch, dict), p, "channel must be an object")
        name = ch.get("name")
        _require(isinstance(name, str) and name, f"{p}.name", "channel needs a name")
        _require(name not in names, f"{p}.name", f"duplicate channel {name!r}")
        names.add(name)
        active = ch.get("active")
        _require(isinstance(active, list) and active, f"{p}.active", "need a non-empty node list")
        active = tuple(sorted({_node(a, f"{p}.active", n) for a in active}))
        _require(len(active) == len(ch["active"]), f"{p}.active", "duplicate node id")
        client = _node(ch.get("client", active[0]), f"{p}.client", n)
        _require(client in active, f"{p}.client", f"client {client} is not an active node")
        kinds = tuple(_enum(TxKind, kd, f"{p}.kinds") for kd in ch.get("kinds", []))
        channels.append(ChannelSpec(name, active, client, kinds))

    gc = doc.get("group_config", {})
    s = _number(gc.get("s", 1.0), "group_config.s")
    m = _number(gc.get("m", 0.25), "group_config.m")
    _require(0 < s <= 1, "group_config.s", f"must lie in (0, 1], got {s}")
    _require(0 < m <= 1, "group_config.m", f"must lie in (0, 1], got {m}")

    lat = doc.get("latency", {})
    lmin = _int(lat.get("min", 1), "latency.min", 0)
    lmax = _int(lat.get("max", 3), "latency.max", lmin)
    drop = _number(lat.get("drop", 0.0), "latency.drop")
    _require(0 <= drop < 1, "latency.drop", f"drop probability must lie in [0, 1), got {drop}")

    rounds = _int(doc.get("rounds", 5), "rounds", 0)
    faults = []
    for k, fw in enumerate(doc.get("fault_plan", [])):
        p = f"fault_plan[{k}]"
        _require(isinstance(fw, dict), p, "fault window must be an object")
        node = _node(fw.get("node"), f"{p}.node", n)
        kind = _enum(Behavior, fw.get("behavior"), f"{p}.behavior")
        delay = _int(fw.get("delay", 0), f"{p}.delay", 0)
        start = _int(fw.get("start", 0), f"{p}.start", 0)
        end = fw.get("end")
        if end is not None:
            _int(end, f"{p}.end", start)
        faults.append(FaultWindow(node, NodeBehavior(kind, delay), start, end))

    wl = doc.get("workload", {})
    _require(isinstance(wl, dict), "workload", "must be an object")
    defaults = WorkloadConfig()
    ints = {}
    for key in ("countries", "sites_per_country", "patients_per_site", "readings_per_patient", "labs_per_round", "lab_report_bytes", "telemetry_per_round", "telemetry_deviations"):
        ints[key] = _int(wl.get(key, getattr(defaults, key)), f"workload.{key}", 0)
    devices = tuple(_enum(WearableType, d, "workload.devices") for d in wl.get("devices", [d.value for d in defaults.devices]))
    _require(bool(devices), "workload.devices", "need at least one device type")
    _require(ints["telemetry_deviations"] <= ints["telemetry_per_round"] * rounds, "workload.telemetry_deviations", "more deviations than telemetry readings")
    workload = WorkloadConfig(devices=devices, **ints)

    stage_timeout = _int(doc.get("stage_timeout", DEFAULT_STAGE_TIMEOUT), "stage_timeout", 1)
    attempt_timeout = _int(doc.get("attempt_timeout", 4 * stage_timeout), "attempt_timeout", stage_timeout)
    mode = doc.get("mode", "tpbft")
    _require(mode in ("tpbft", "baseline"), "mode", f"expected tpbft or baseline, got {mode!r}")
    patient_node = doc.get("patient_node")
    pi_node = doc.get("pi_node")
    if patient_node is not None:
        _node(patient_node, "patient_node", n)
    if pi_node is not None:
        _node(pi_node, "pi_node", n)

    return ScenarioConfig(
        seed=seed,
        node_count=n,
        channels=tuple(channels),
        group_config=GroupConfig(s, m),
        difficulty=_int(doc.get("difficulty", 2), "difficulty", 0),
        stage_timeout=stage_timeout,
        attempt_timeout=attempt_timeout,
        rounds=rounds,
        latency=LatencyModel(lmin, lmax, drop),
        fault_plan=tuple(faults),
        workload=workload,
        patient_node=patient_node,
        pi_node=pi_node,
        mode=mode,
        name=str(doc.get("name", "scenario")),
    )


def load_scenario(source: str) -> ScenarioConfig:
    """Parse and validate scenario text."""
    try:
        doc = json.loads(_strip_comments(source))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return parse_scenario(doc)


def load_scenario_file(path: str | Path) -> ScenarioConfig:
    return load_scenario(Path(path).read_text(encoding="utf-8"))


def bundled_scenarios() -> list[str]:
    root = resources.files("tpbft") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".scenario"))


def bundled_scenario(name: str) -> ScenarioConfig:
    """Load one of the scenarios shipped with the package, by file name."""
    if not name.endswith(".scenario"):
        name += ".scenario"
    text = (resources.files("tpbft") / "scenarios" / name).read_text(encoding="utf-8")
    return load_scenario(text)
