"""Episode adapter: one decision per control cycle, reward = scaled completion rate."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .. import ctrl, metrics, sim
from ..scenario import Scenario
from .agent import sample_action
from .state import StateDesign, build_state

R_MAX = 4.0  # veh/s; keeps per-cycle rewards inside [0, 1]


class _Given(ctrl.Controller):
    """Replays a rate chosen outside the simulator."""

    name = "given"

    def __init__(self, rate: float | None):
        self.bypass = rate is None
        self.rate = ctrl.MAX_RATE if rate is None else float(rate)

    def decide(self, obs):
        return self.rate


class PerimeterEnv:
    """Wraps a scenario and seed; ``step`` applies one rate for one control cycle."""

    def __init__(self, scenario: Scenario, design: StateDesign, seed: int = 1,
                 cap_factor: float | None = None, r_max: float = R_MAX):
        if r_max <= 0:
            raise ValueError("r_max must be positive")
        self.scenario = scenario
        self.design = design
        self.seed = seed
        self.T = scenario.control_cycle
        factor = scenario.cap_factor if cap_factor is None else cap_factor
        self.max_time = factor * scenario.profile.horizon
        self.r_max = r_max
        self._trips = scenario.trips(seed)
        self.state: sim.SimState | None = None
        self.summaries: list[sim.CycleSummary] = []

    @property
    def low(self) -> float:
        return ctrl.MIN_RATE

    @property
    def high(self) -> float:
        return ctrl.MAX_RATE

    def observe(self) -> ctrl.Observation:
        st = self.state
        return ctrl.make_observation(st.snapshot(), self.scenario.profile, self.T, st.prev_n2, st.prev_q_in)

    def reset(self) -> np.ndarray:
        cfg = dataclasses.replace(self.scenario.sim, seed=self.seed)
        self.state = sim.init(self.scenario.network, self._trips, cfg)
        self.summaries = []
        return build_state(self.observe(), self.design)

    def step(self, rate: float | None) -> tuple[np.ndarray, float, bool, dict]:
        """Apply ``rate`` (veh/h, or None for unmetered inflow) for one cycle."""
        if self.state is None:
            raise RuntimeError("call reset() first")
        s = sim.run_cycle(self.state, _Given(rate), self.T, self.scenario.profile)
        self.summaries.append(s)
        reward = s.completed / self.T / self.r_max
        finished = self.state.done
        truncated = not finished and self.state.clock >= self.max_time
        info = {"rate": s.rate, "completed": s.completed, "truncated": truncated}
        return build_state(self.observe(), self.design), reward, finished or truncated, info

    def tts(self) -> metrics.TtsBreakdown:
        st = self.state
        return metrics.tts(self._trips, st.completions(), st.clock, st.presence())


@dataclass
class Trajectory:
    states: list[np.ndarray] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)
    logp: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    truncated: bool = False
    tts_h: float = float("nan")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        g = 0.0
        for r in reversed(self.rewards):
            g = r + gamma * g
        return g

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def mean_rate(self) -> float:
        return float(np.mean(self.rates)) if self.rates else float("nan")


def episode(env, ac, rng: np.random.Generator | None = None, deterministic: bool = False,
            max_steps: int | None = None) -> Trajectory:
    """Roll one episode. Sampling needs ``rng``; ``deterministic`` uses the policy mean."""
    if not deterministic and rng is None:
        raise ValueError("stochastic rollouts need an rng")
    traj = Trajectory()
    s = env.reset()
    done = False
    while not done:
        if deterministic:
            mu = float(ac.mean(s))
            if not np.isfinite(mu):
                raise FloatingPointError(f"policy mean is not finite for state {s}")
            a, rate, lp = mu, float(ac.to_rate(mu)), 0.0
        else:
            a, rate, lp = sample_action(ac, s, rng)
        traj.states.append(s)
        traj.raw.append(a)
        traj.rates.append(rate)
        traj.logp.append(lp)
        traj.values.append(float(ac.value(s)))
        s, r, done, info = env.step(rate)
        traj.rewards.append(r)
        if info.get("truncated"):
            traj.truncated = True
        if max_steps is not None and len(traj) >= max_steps and not done:
            traj.truncated = True
            break
    if hasattr(env, "tts"):
        traj.tts_h = env.tts().total_h
    return traj
