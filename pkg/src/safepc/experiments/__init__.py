"""Scenario runners, configuration, and trace I/O."""
from .config import SCENARIOS, ScenarioConfig, load_config, parse_config_text
from .reference import SETPOINT_LIMIT, setpoint_reference, zero_reference
from .scenarios import (
    run_closed_loop,
    run_fl_demo,
    run_kedmd_convergence,
    run_plan_closed_loop,
    run_setpoint,
    run_stabilization,
)
from .trace import (
    TRACE_COLUMNS,
    RunTrace,
    read_trace_csv,
    validate_trace,
    write_trace_csv,
)

__all__ = [
    "SCENARIOS", "ScenarioConfig", "load_config", "parse_config_text",
    "SETPOINT_LIMIT", "setpoint_reference", "zero_reference",
    "run_closed_loop", "run_fl_demo", "run_kedmd_convergence", "run_plan_closed_loop",
    "run_setpoint", "run_stabilization",
    "TRACE_COLUMNS", "RunTrace", "read_trace_csv", "validate_trace", "write_trace_csv",
]
