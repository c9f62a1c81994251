from .metrics import InstanceRecord, Metrics
from .network import EventLoop, subsystem_rng
from .runner import Simulation, baseline_pbft_mode, run, trust_table
from .scenario import (
    HONEST,
    SCHEMA_VERSION,
    Behavior,
    ChannelSpec,
    FaultWindow,
    LatencyModel,
    NodeBehavior,
    ScenarioConfig,
    WorkloadConfig,
    bundled_scenario,
    bundled_scenarios,
    inject_fault,
    load_scenario,
    load_scenario_file,
    parse_scenario,
)
