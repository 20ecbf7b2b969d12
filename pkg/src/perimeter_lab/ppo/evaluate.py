"""Seed-sweep evaluation shared by every controller, and policy-surface sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import ctrl, metrics, sim
from ..scenario import Scenario
from .agent import ActorCritic, deterministic_action
from .state import StateDesign, build_state


class PolicyController(ctrl.Controller):
    """Deterministic (mean-action) policy behind the common controller interface."""

    name = "ppo"

    def __init__(self, ac: ActorCritic, design: StateDesign):
        if ac.state_dim != design.dim:
            raise ValueError(f"policy takes {ac.state_dim} inputs but design {design.variant} has {design.dim}")
        self.ac = ac
        self.design = design

    def decide(self, obs: ctrl.Observation) -> float:
        return deterministic_action(self.ac, build_state(obs, self.design))


@dataclass
class RunResult:
    seed: int
    tts: metrics.TtsBreakdown
    finished: bool
    clock: float
    completed: int
    gridlock_moves: int
    summaries: list[sim.CycleSummary] = field(default_factory=list, repr=False)
    trace: list[metrics.Snapshot] = field(default_factory=list, repr=False)


def run_controller(scenario: Scenario, controller: ctrl.Controller, seed: int,
                   cap_factor: float | None = None, record_trace: bool = False,
                   check_invariants: bool = False) -> RunResult:
    """Simulate one seed to completion (or the time cap) and score it."""
    factor = scenario.eval_cap_factor if cap_factor is None else cap_factor
    state = scenario.new_state(seed, record_trace=record_trace, check_invariants=check_invariants)
    summaries = sim.run(state, controller, scenario.control_cycle, scenario.profile,
                        max_time=factor * scenario.profile.horizon)
    trips = state.trips
    tts = metrics.tts(trips, state.completions(), state.clock, state.presence())
    return RunResult(seed, tts, state.done, state.clock, len(state.completed), state.gridlock_moves,
                     summaries, state.trace)


@dataclass
class EvalTable:
    controller: str
    results: list[RunResult]

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.results]

    @property
    def tts(self) -> list[float]:
        return [r.tts.total_h for r in self.results]

    @property
    def mean(self) -> float:
        return float(np.mean(self.tts)) if self.results else float("nan")

    @property
    def mean_inside(self) -> float:
        return float(np.mean([r.tts.inside_h for r in self.results]))

    @property
    def mean_outside(self) -> float:
        return float(np.mean([r.tts.outside_h for r in self.results]))


def evaluate(make_controller: Callable[[], ctrl.Controller], scenario: Scenario,
             seeds: Sequence[int] = tuple(range(1, 11)), name: str | None = None,
             cap_factor: float | None = None, **kw) -> EvalTable:
    """Run a fresh controller on each seed; the controller name labels the table."""
    results = []
    label = name
    for s in seeds:
        c = make_controller()
        label = label or c.name
        results.append(run_controller(scenario, c, s, cap_factor, **kw))
    return EvalTable(label or "controller", results)


def write_eval_csv(tables: Sequence[EvalTable], path: str | Path, header_comment: str | None = None,
                   reference: str | None = "npc") -> None:
    """Wide table: one row per controller, one column per seed, then the mean.

    When a ``reference`` controller is present, ``improvement_pct`` gives the
    relative reduction of each mean against it.
    """
    seeds = sorted({s for t in tables for s in t.seeds})
    ref = next((t for t in tables if t.controller == reference), None)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", *[f"seed_{s}" for s in seeds], "mean", "improvement_pct"])
        for t in tables:
            by_seed = dict(zip(t.seeds, t.tts))
            imp = "" if ref is None or not ref.mean > 0 else f"{100.0 * (ref.mean - t.mean) / ref.mean:.3f}"
            w.writerow([t.controller, *[f"{by_seed[s]:.4f}" if s in by_seed else "" for s in seeds],
                        f"{t.mean:.4f}", imp])


def write_tts_csv(tables: Sequence[EvalTable], path: str | Path, header_comment: str | None = None) -> None:
    """Long table: one row per (controller, seed) with the inside/outside split."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "controller", "tts_total_h", "tts_inside_h", "tts_outside_h", "finished",
                    "end_clock_s"])
        for t in tables:
            for r in t.results:
                w.writerow([r.seed, t.controller, f"{r.tts.total_h:.6f}", f"{r.tts.inside_h:.6f}",
                            f"{r.tts.outside_h:.6f}", int(r.finished), f"{r.clock:g}"])


# -- policy surfaces ------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Sweep definition: ``sweep`` component index over ``values``; others held at ``fixed``."""

    sweep: int
    values: tuple[float, ...]
    fixed: tuple[float, ...]  # raw (unscaled) component values, one per state component


COMPONENTS = ("inner_density", "feeder_density", "n12", "n22", "n21", "n11")


def _raw_to_obs(raw: Sequence[float]) -> ctrl.Observation:
    full = list(raw) + [0.0] * (6 - len(raw))
    return ctrl.Observation(clock=0.0, inner_density=full[0], feeder_density=full[1], n2=0.0, n2_prev=0.0,
                            q_in_prev=0.0, future=(full[2], full[3], full[4], full[5]))


def policy_grid(ac: ActorCritic, design: StateDesign, spec: GridSpec) -> list[tuple[tuple[float, ...], float]]:
    """Mean-action rate at each sweep point; returns ((raw components...), rate) pairs."""
    if len(spec.fixed) != design.dim or not 0 <= spec.sweep < design.dim:
        raise ValueError("grid spec does not match the state design")
    out = []
    for v in spec.values:
        raw = list(spec.fixed)
        raw[spec.sweep] = v
        s = build_state(_raw_to_obs(raw), design)
        out.append((tuple(raw), deterministic_action(ac, s)))
    return out


def density_sweep(design: StateDesign, step: float = 1.0, fixed: Sequence[float] | None = None) -> GridSpec:
    """Inner density from 0 to ``density_max``; other components at ``fixed`` (default zero)."""
    values = tuple(float(x) for x in np.arange(0.0, design.density_max + step / 2, step))
    fx = tuple(fixed) if fixed is not None else (0.0,) * design.dim
    return GridSpec(0, values, fx)


def write_policy_grid(rows, design: StateDesign, path: str | Path, header_comment: str | None = None,
                      extra_cols: Sequence[str] = (), extra: Sequence[Sequence] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*extra_cols, *COMPONENTS[: design.dim], "rate"])
        for i, (raw, rate) in enumerate(rows):
            pre = list(extra[i]) if extra is not None else []
            w.writerow([*pre, *[f"{x:g}" for x in raw], f"{rate:.4f}"])


def violation_mass(rates: Sequence[float], low: float = ctrl.MIN_RATE, high: float = ctrl.MAX_RATE) -> float:
    """Total upward movement of a sequence that should be non-increasing, as a fraction of the range."""
    r = np.asarray(rates, dtype=float)
    return float(np.sum(np.clip(np.diff(r), 0.0, None)) / (high - low))
