"""State vectors built from an observation: inner density, feeder density, future demand."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..ctrl import Observation
from ..demand import DemandProfile, TripClass

DESIGNS = {"d1": 1, "d2": 2, "d6": 6}


@dataclass(frozen=True)
class StateDesign:
    variant: str = "d6"
    density_max: float = 140.0  # veh/km, four times the critical density
    demand_max_12: float = 1.0  # vehicles per control cycle, feeder-origin class
    demand_max_22: float = 1.0  # vehicles per control cycle, internal class

    def __post_init__(self):
        if self.variant not in DESIGNS:
            raise ValueError(f"unknown state design {self.variant!r}; choose from {sorted(DESIGNS)}")

    @property
    def dim(self) -> int:
        return DESIGNS[self.variant]

    @classmethod
    def for_profile(cls, variant: str, profile: DemandProfile, T: float, density_max: float = 140.0):
        """Scale future-demand components by the profile's largest per-cycle generation."""
        peak12 = float(profile.rates(TripClass.EXOGENOUS).max()) * T
        peak22 = float(profile.rates(TripClass.ENDOGENOUS).max()) * T
        return cls(variant, density_max, max(peak12, 1.0), max(peak22, 1.0))


def _unit(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def build_state(obs: Observation, design: StateDesign) -> np.ndarray:
    values = (obs.inner_density, obs.feeder_density, *obs.future)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite observation {obs}")
    full = [
        _unit(obs.inner_density / design.density_max),
        _unit(obs.feeder_density / design.density_max),
        _unit(obs.future[0] / design.demand_max_12),
        _unit(obs.future[1] / design.demand_max_22),
        # n21 and n11 are zero in this demand structure; kept for shape
        _unit(obs.future[2] / design.demand_max_22),
        _unit(obs.future[3] / design.demand_max_12),
    ]
    return np.asarray(full[: design.dim], dtype=float)
