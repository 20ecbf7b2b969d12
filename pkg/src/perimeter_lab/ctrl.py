"""Controller contract and the two baselines (no control, PI regulator)."""

from __future__ import annotations

from dataclasses import dataclass

from . import metrics
from .demand import DemandProfile, future_demand

MIN_RATE = 50.0
MAX_RATE = 300.0


@dataclass(frozen=True)
class Observation:
    clock: float
    inner_density: float  # veh/km
    feeder_density: float  # veh/km, meter queues included
    n2: float  # vehicles on protected links
    n2_prev: float
    q_in_prev: float  # total perimeter rate of the previous cycle, veh/h
    future: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # n12, n22, n21, n11


def make_observation(
    snap: metrics.Snapshot,
    profile: DemandProfile | None,
    T: float,
    n2_prev: float | None,
    q_in_prev: float,
) -> Observation:
    future = future_demand(profile, snap.clock, T) if profile is not None else (0.0, 0.0, 0.0, 0.0)
    n2 = float(snap.protected_count)
    return Observation(
        clock=snap.clock,
        inner_density=metrics.inner_density(snap),
        feeder_density=metrics.feeder_density(snap, include_virtual=True),
        n2=n2,
        n2_prev=n2 if n2_prev is None else float(n2_prev),
        q_in_prev=float(q_in_prev),
        future=future,
    )


def clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


class Controller:
    """Maps an observation to one metering rate (veh/h) shared by every meter."""

    name = "controller"
    bypass = False  # True: meters release without headway limits
    min_rate = MIN_RATE
    max_rate = MAX_RATE

    def reset(self) -> None:
        pass

    def decide(self, obs: Observation) -> float:
        raise NotImplementedError


class NoControl(Controller):
    name = "npc"
    bypass = True

    def decide(self, obs: Observation) -> float:
        return self.max_rate


@dataclass(frozen=True)
class PiParams:
    k_p: float = 36.88
    k_i: float = 1.24
    set_point: float = 2700.0
    meter_count: int = 24
    min_rate: float = MIN_RATE
    max_rate: float = MAX_RATE


def pi_total(params: PiParams, obs: Observation) -> float:
    """Clamped total perimeter inflow q_in(k) in veh/h."""
    q = (obs.q_in_prev
         - params.k_p * (obs.n2 - obs.n2_prev)
         + params.k_i * (params.set_point - obs.n2))
    return clamp(q, params.meter_count * params.min_rate, params.meter_count * params.max_rate)


def pi_decide(params: PiParams, obs: Observation) -> float:
    """Per-meter rate: the clamped total split evenly over the meters."""
    return pi_total(params, obs) / params.meter_count


class PiController(Controller):
    name = "pi"

    def __init__(self, params: PiParams):
        self.params = params
        self.min_rate = params.min_rate
        self.max_rate = params.max_rate

    def decide(self, obs: Observation) -> float:
        return pi_decide(self.params, obs)


class FixedRate(Controller):
    name = "fixed"

    def __init__(self, rate: float):
        self.rate = clamp(rate, self.min_rate, self.max_rate)

    def decide(self, obs: Observation) -> float:
        return self.rate
