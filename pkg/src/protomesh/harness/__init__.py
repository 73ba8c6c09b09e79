"""Scenario harness: network construction, workloads, fault injection, probes."""

from .config import FaultSchedule, ScenarioConfig, SyntheticWorkload, Timing, Topology, service_time
from .eventlog import Event, EventLog
from .fail_storm import dead_intervals, observed_outcomes, query_schedule, reachability_oracle, run_fail_storm
from .network import AgentNetwork, build_network, plan_for
from .result import RunResult
from .safety import ProbeReport, run_safety_probes
from .streaming_queue import run_streaming_queue

__all__ = [
    "AgentNetwork",
    "Event",
    "EventLog",
    "FaultSchedule",
    "ProbeReport",
    "RunResult",
    "ScenarioConfig",
    "SyntheticWorkload",
    "Timing",
    "Topology",
    "build_network",
    "dead_intervals",
    "observed_outcomes",
    "plan_for",
    "query_schedule",
    "reachability_oracle",
    "run_fail_storm",
    "run_safety_probes",
    "run_streaming_queue",
    "service_time",
]
