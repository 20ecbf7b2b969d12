"""Scenario bundles: network geometry, demand, engine settings and baselines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property

from . import ctrl, demand, net, sim
from .demand import DemandProfile


@dataclass(frozen=True)
class GridSpec:
    rows: int = 5
    cols: int = 5
    link_length: float = 170.0
    lanes: int = 2
    feeder_count: int = 24
    internal_od_count: int = 100
    cycle: float = 96.0

    def build(self) -> net.Network:
        return net.build_grid(self.rows, self.cols, self.link_length, self.lanes,
                              self.feeder_count, self.internal_od_count, self.cycle)


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec = GridSpec()
    profile: DemandProfile = DemandProfile()
    sim: sim.SimConfig = sim.SimConfig()
    control_cycle: float = 96.0
    pi: ctrl.PiParams = ctrl.PiParams()
    # training episodes stop at cap_factor x demand horizon; evaluations run longer
    cap_factor: float = 2.0
    eval_cap_factor: float = 4.0

    @cached_property
    def network(self) -> net.Network:
        return self.grid.build()

    def trips(self, seed: int) -> list[demand.Trip]:
        return demand.generate_trips(self.profile, self.network, seed)

    def new_state(self, seed: int, **overrides) -> sim.SimState:
        cfg = dataclasses.replace(self.sim, seed=seed, **overrides)
        return sim.init(self.network, self.trips(seed), cfg)

    def with_profile(self, profile: DemandProfile) -> "Scenario":
        return dataclasses.replace(self, profile=profile)

    def controller(self, name: str) -> ctrl.Controller:
        if name == "npc":
            return ctrl.NoControl()
        if name == "pi":
            return ctrl.PiController(self.pi)
        raise ValueError(f"unknown baseline controller {name!r}")


def reference() -> Scenario:
    """Full-size testbed: 5x5 grid, 24 feeders, 100 OD points, 17000 trips."""
    return Scenario()


def desk() -> Scenario:
    """3x3 grid with 8 feeders, loaded so that uncontrolled inflow gridlocks it."""
    grid = GridSpec(rows=3, cols=3, feeder_count=8, internal_od_count=16)
    profile = DemandProfile(total_endogenous=11000, total_exogenous=2000)
    # gains scaled by meter count (8 of 24); set-point at the critical
    # density (35 veh/km) times 13.6 protected lane-km
    pi = ctrl.PiParams(k_p=36.88 * 8 / 24, k_i=1.24 * 8 / 24, set_point=480.0, meter_count=8)
    return Scenario(grid=grid, profile=profile, pi=pi)


PRESETS = {"reference": reference, "desk": desk}
