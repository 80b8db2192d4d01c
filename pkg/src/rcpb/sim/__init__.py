"""Exact CTMC simulation of the n-server dispatching system."""

from .engine import (
    DEFAULT_SEED,
    EventClock,
    EventRecord,
    OccupancySampler,
    RunResult,
    SimState,
    Trajectory,
    UnderSampledError,
    WaitingTimeStats,
    dispatch_power_of_d,
    dispatch_pull,
    level_fill,
    measure_message_rate,
    run_steady_state,
    run_trajectory,
    step,
)
