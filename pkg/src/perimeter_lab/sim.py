"""Fixed-step spatial-queue simulator with signals, meters and spill-back.

Each link holds vehicles in two places: a traversing FIFO (vehicles still
covering the link at free-flow speed) and an exit queue that discharges at
saturation flow while the downstream signal is green and the next link has
storage left. A full downstream link blocks the whole exit queue.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctrl as ctrl_mod
from .demand import DemandProfile, Trip, TripClass
from .metrics import Snapshot, inner_density, feeder_density
from .net import Network, Region


class InvariantBreach(RuntimeError):
    """Vehicle conservation or storage bound violated inside the engine."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0
    saturation_flow: float = 0.5  # veh/s/lane
    seed: int = 1
    route_noise: float = 0.3
    # seconds between checks for circular spill-back (gridlock); each found
    # cycle advances its head vehicles by one simultaneous move
    gridlock_interval: float = 30.0
    check_invariants: bool = False
    record_trace: bool = False


@dataclass
class StepEvents:
    released: int = 0
    moved: int = 0
    completed: int = 0


@dataclass
class CycleSummary:
    index: int
    clock_start: float
    rate: float
    bypass: bool
    steps: int
    completed: int
    before: Snapshot
    after: Snapshot
    observation: ctrl_mod.Observation | None = None


class Vehicle:
    __slots__ = ("trip", "route", "idx", "mark", "inside", "outside", "in_protected")

    def __init__(self, trip: Trip, route: tuple[int, ...], in_protected: bool):
        self.trip = trip
        self.route = route
        self.idx = 0
        self.mark = trip.generation_time
        self.inside = 0.0
        self.outside = 0.0
        self.in_protected = in_protected

    def switch_region(self, t: float, protected: bool) -> None:
        if protected == self.in_protected:
            return
        self._accrue(t)
        self.in_protected = protected

    def _accrue(self, t: float) -> None:
        if self.in_protected:
            self.inside += t - self.mark
        else:
            self.outside += t - self.mark
        self.mark = t


class MeterState:
    __slots__ = ("link", "min_rate", "max_rate", "rate", "headway", "next_release",
                 "last_release", "pending", "credit")

    def __init__(self, link: int, min_rate: float, max_rate: float):
        self.link = link
        self.min_rate = min_rate
        self.max_rate = max_rate
        self.rate = max_rate
        self.headway = 3600.0 / max_rate
        self.next_release = 0.0
        self.last_release: float | None = None
        self.pending: deque[Vehicle] = deque()
        self.credit = 0.0


def _adjacency(net: Network) -> list[list[tuple[int, int]]]:
    adj: list[list[tuple[int, int]]] = [[] for _ in net.nodes]
    for link in net.links:
        adj[link.from_node].append((link.id, link.to_node))
    return adj


def shortest_route(
    net: Network,
    origin: int,
    destination: int,
    costs: Sequence[float],
    adjacency: list[list[tuple[int, int]]] | None = None,
) -> tuple[int, ...]:
    """Least-cost link sequence from ``origin`` to ``destination`` (Dijkstra)."""
    adj = adjacency if adjacency is not None else _adjacency(net)
    dist = {origin: 0.0}
    back: dict[int, int] = {}
    heap = [(0.0, origin)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == destination:
            break
        done.add(u)
        for lid, v in adj[u]:
            nd = d + costs[lid]
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                back[v] = lid
                heapq.heappush(heap, (nd, v))
    if destination not in dist:
        raise ValueError(f"node {destination} unreachable from {origin}")
    route = []
    u = destination
    while u != origin:
        lid = back[u]
        route.append(lid)
        u = net.links[lid].from_node
    return tuple(reversed(route))


def assign_route(
    net: Network,
    origin: int,
    destination: int,
    rng: np.random.Generator,
    noise: float = 0.3,
    adjacency=None,
    free_flow_times: Sequence[float] | None = None,
) -> tuple[int, ...]:
    """Shortest path under free-flow times perturbed by (1 + U(0, noise)) per link."""
    fft = free_flow_times if free_flow_times is not None else [l.free_flow_time for l in net.links]
    eps = rng.uniform(0.0, noise, size=len(fft)) if noise > 0 else np.zeros(len(fft))
    costs = [f * (1.0 + e) for f, e in zip(fft, eps)]
    return shortest_route(net, origin, destination, costs, adjacency)


class SimState:
    """Complete mutable world state; advance it with :meth:`step`."""

    def __init__(self, net: Network, trips: Sequence[Trip], config: SimConfig = SimConfig()):
        if config.dt <= 0:
            raise ValueError("dt must be positive")
        self.net = net
        self.config = config
        self.trips = sorted(trips, key=lambda tr: (tr.generation_time, tr.id))
        self.clock = 0.0
        self.rng = np.random.default_rng(config.seed)
        self._adj = _adjacency(net)
        links = net.links
        n = len(links)
        self.cap = [l.storage_capacity for l in links]
        self.fft = [l.free_flow_time for l in links]
        self.rate = [config.saturation_flow * l.lanes * config.dt for l in links]
        self.protected = [l.region is Region.PROTECTED for l in links]
        self.length_km = [l.length / 1000.0 for l in links]
        self.trav: list[deque] = [deque() for _ in range(n)]
        self.queue: list[deque] = [deque() for _ in range(n)]
        self.occ = [0] * n
        self.credit = [0.0] * n
        self.protected_lane_km = net.lane_km(Region.PROTECTED)
        self.feeder_lane_km = net.lane_km(Region.FEEDER)
        self.protected_count = 0
        self.feeder_count = 0
        self.protected_vkt = 0.0

        self._dest_stub = {od: net.destination_stub_of(od) for od in net.od_points}
        self._origin_stub = {od: net.origin_stub_of(od) for od in net.od_points}
        self._feeder_origin = set(net.feeder_origins)
        self.meters = [MeterState(m.link, m.min_rate, m.max_rate) for m in net.meters]
        self._meter_of_origin = {}
        for i, m in enumerate(net.meters):
            self._meter_of_origin[links[m.link].from_node] = i
        self.bypass = False
        self.origin_wait: dict[int, deque[Vehicle]] = {od: deque() for od in net.od_points}
        self._origin_credit = {od: 0.0 for od in net.od_points}

        # signals: per plan, cumulative phase ends; per link, its plan index
        self._plans = list(net.signals)
        self._phase = [-1] * len(self._plans)
        self.green = [True] * n
        controlled = set()
        for plan in self._plans:
            for _, ls in plan.phases:
                controlled |= ls
        self._controlled = controlled
        for lid in controlled:
            self.green[lid] = False
        self._plan_links = [sorted(set().union(*(ls for _, ls in p.phases))) for p in self._plans]
        self._update_signals()

        self.next_trip = 0
        self.completed: list[tuple[int, float]] = []
        self.presence_done: dict[int, tuple[float, float]] = {}
        self.vehicles_in_system: dict[int, Vehicle] = {}
        self.trace: list[Snapshot] = []
        self.cycle_index = 0
        self.prev_n2: float | None = None
        self.prev_q_in = sum(m.max_rate for m in self.meters)
        self.last_rate = max((m.max_rate for m in self.meters), default=0.0)
        self.gridlock_moves = 0
        self.steps_taken = 0
        if config.check_invariants:
            self.audit()

    # -- signals -----------------------------------------------------------
    def _update_signals(self) -> None:
        t = self.clock
        for k, plan in enumerate(self._plans):
            tc = t % plan.cycle
            acc = 0.0
            idx = len(plan.phases)
            for i, (d, _) in enumerate(plan.phases):
                acc += d
                if tc < acc:
                    idx = i
                    break
            if idx != self._phase[k]:
                self._phase[k] = idx
                permitted = plan.phases[idx][1] if idx < len(plan.phases) else frozenset()
                for lid in self._plan_links[k]:
                    self.green[lid] = lid in permitted

    # -- control surface -----------------------------------------------------
    def set_meter_rate(self, rate: float) -> float:
        """Clamp ``rate`` into each meter's bounds and apply it; returns the applied rate."""
        self.bypass = False
        applied = rate
        for m in self.meters:
            applied = min(max(rate, m.min_rate), m.max_rate)
            m.rate = applied
            m.headway = 3600.0 / applied
            if m.last_release is not None:
                m.next_release = m.last_release + m.headway
        self.last_rate = applied
        return applied

    def set_bypass(self) -> None:
        """Meters stop gating; release is limited only by feeder storage and saturation flow."""
        self.bypass = True
        for m in self.meters:
            m.credit = 0.0
        self.last_rate = max((m.max_rate for m in self.meters), default=0.0)

    # -- movement helpers ------------------------------------------------------
    def _enter(self, veh: Vehicle, lid: int, t: float) -> None:
        self.trav[lid].append((t + self.fft[lid], veh))
        self.occ[lid] += 1
        if self.protected[lid]:
            self.protected_count += 1
            veh.switch_region(t, True)
        else:
            self.feeder_count += 1

    def _leave(self, lid: int) -> None:
        self.occ[lid] -= 1
        if self.protected[lid]:
            self.protected_count -= 1
        else:
            self.feeder_count -= 1

    def _complete(self, veh: Vehicle, t: float) -> None:
        veh._accrue(t)
        tid = veh.trip.id
        self.completed.append((tid, t))
        self.presence_done[tid] = (veh.inside, veh.outside)
        del self.vehicles_in_system[tid]

    # -- the step ---------------------------------------------------------------
    def step(self) -> StepEvents:
        ev = StepEvents()
        t = self.clock
        cap, occ = self.cap, self.occ

        # (1) inject newly generated trips
        trips = self.trips
        while self.next_trip < len(trips) and trips[self.next_trip].generation_time <= t:
            trip = trips[self.next_trip]
            self.next_trip += 1
            route = assign_route(self.net, trip.origin, trip.destination, self.rng,
                                 self.config.route_noise, self._adj, self.fft)
            from_feeder = trip.origin in self._feeder_origin
            veh = Vehicle(trip, route, in_protected=not from_feeder)
            self.vehicles_in_system[trip.id] = veh
            if from_feeder:
                self.meters[self._meter_of_origin[trip.origin]].pending.append(veh)
            else:
                self.origin_wait[trip.origin].append(veh)
        for od, wait in self.origin_wait.items():
            if not wait:
                self._origin_credit[od] = 0.0
                continue
            stub = self._origin_stub[od]
            c = min(self._origin_credit[od] + self.rate[stub], max(self.rate[stub], 1.0))
            while c >= 1.0 and wait and occ[stub] < cap[stub]:
                self._enter(wait.popleft(), stub, t)
                c -= 1.0
            self._origin_credit[od] = c

        # (2) meters
        for m in self.meters:
            pend = m.pending
            lid = m.link
            if self.bypass:
                if not pend:
                    m.credit = 0.0
                    continue
                c = min(m.credit + self.rate[lid], max(self.rate[lid], 1.0))
                while c >= 1.0 and pend and occ[lid] < cap[lid]:
                    self._enter(pend.popleft(), lid, t)
                    ev.released += 1
                    c -= 1.0
                m.credit = c
                m.last_release = t
                m.next_release = t
            else:
                # tolerance: repeated headway addition drifts by ulps
                while pend and t >= m.next_release - 1e-9 and occ[lid] < cap[lid]:
                    self._enter(pend.popleft(), lid, t)
                    ev.released += 1
                    m.last_release = t
                    m.next_release += m.headway
                if t >= m.next_release - 1e-9:
                    m.next_release = t  # idle or blocked meters bank no releases

        # (3) traversal -> exit queue
        prot, lkm = self.protected, self.length_km
        for lid, dq in enumerate(self.trav):
            if dq and dq[0][0] <= t:
                q = self.queue[lid]
                while dq and dq[0][0] <= t:
                    q.append(dq.popleft()[1])
                    if prot[lid]:
                        self.protected_vkt += lkm[lid]

        # (4) discharge
        green, rate, credit = self.green, self.rate, self.credit
        for lid, q in enumerate(self.queue):
            if not q:
                credit[lid] = 0.0
                continue
            if not green[lid]:
                credit[lid] = 0.0
                continue
            c = min(credit[lid] + rate[lid], max(rate[lid], 1.0))
            while c >= 1.0 and q:
                veh = q[0]
                nxt = veh.route[veh.idx + 1]
                if veh.idx + 2 == len(veh.route):
                    # next link is the destination stub: trip ends here
                    q.popleft()
                    self._leave(lid)
                    self._complete(veh, t)
                    ev.completed += 1
                elif occ[nxt] < cap[nxt]:
                    q.popleft()
                    self._leave(lid)
                    veh.idx += 1
                    self._enter(veh, nxt, t)
                    ev.moved += 1
                else:
                    break
                c -= 1.0
            credit[lid] = c

        gi = self.config.gridlock_interval
        if gi > 0 and t % gi < self.config.dt:
            ev.moved += self._resolve_gridlock(t)

        # (5) advance
        self.clock = t + self.config.dt
        self.steps_taken += 1
        self._update_signals()
        if self.config.check_invariants:
            self.audit()
        if self.config.record_trace:
            self.trace.append(self.snapshot())
        return ev

    def _resolve_gridlock(self, t: float) -> int:
        cap, occ = self.cap, self.occ
        wants: dict[int, int] = {}
        for lid, q in enumerate(self.queue):
            if q and occ[lid] >= cap[lid]:
                veh = q[0]
                if veh.idx + 2 < len(veh.route):
                    nxt = veh.route[veh.idx + 1]
                    if occ[nxt] >= cap[nxt] and self.queue[nxt]:
                        wants[lid] = nxt
        if not wants:
            return 0
        state: dict[int, int] = {}
        cycles = []
        for start in sorted(wants):
            if start in state:
                continue
            path = []
            u = start
            while u in wants and u not in state:
                state[u] = 1
                path.append(u)
                u = wants[u]
            if u in path:
                cycles.append(path[path.index(u):])
            for v in path:
                state[v] = 2
        moved = 0
        for cyc in cycles:
            heads = [self.queue[lid].popleft() for lid in cyc]
            for lid, veh in zip(cyc, heads):
                nxt = wants[lid]
                self._leave(lid)
                veh.idx += 1
                self._enter(veh, nxt, t)
                moved += 1
        self.gridlock_moves += moved
        return moved

    # -- observation & audit -------------------------------------------------------
    @property
    def meter_pending(self) -> int:
        return sum(len(m.pending) for m in self.meters)

    @property
    def origin_waiting(self) -> int:
        return sum(len(w) for w in self.origin_wait.values())

    @property
    def generated(self) -> int:
        return self.next_trip

    @property
    def done(self) -> bool:
        return self.next_trip == len(self.trips) and not self.vehicles_in_system

    def snapshot(self) -> Snapshot:
        return Snapshot(
            clock=self.clock,
            protected_count=self.protected_count,
            protected_lane_km=self.protected_lane_km,
            feeder_count=self.feeder_count,
            feeder_lane_km=self.feeder_lane_km,
            meter_pending=self.meter_pending,
            origin_waiting=self.origin_waiting,
            completed=len(self.completed),
            protected_vkt=self.protected_vkt,
        )

    def audit(self) -> None:
        """Raise :class:`InvariantBreach` unless conservation and storage bounds hold."""
        in_net = sum(self.occ)
        for lid, (o, c) in enumerate(zip(self.occ, self.cap)):
            if o > c:
                raise InvariantBreach(f"link {lid} holds {o} vehicles, storage {c}")
            if o != len(self.trav[lid]) + len(self.queue[lid]):
                raise InvariantBreach(f"link {lid} occupancy counter out of sync")
        total = in_net + self.meter_pending + self.origin_waiting + len(self.completed)
        if total != self.generated:
            raise InvariantBreach(
                f"conservation: generated={self.generated} in_network={in_net} "
                f"pending={self.meter_pending} waiting={self.origin_waiting} "
                f"completed={len(self.completed)} at t={self.clock}"
            )
        if len(self.vehicles_in_system) + len(self.completed) != self.generated:
            raise InvariantBreach("vehicle registry out of sync")

    def presence(self, horizon_end: float | None = None) -> dict[int, tuple[float, float]]:
        """Per-trip seconds (inside, outside) the protected region up to exit or horizon_end."""
        h = self.clock if horizon_end is None else horizon_end
        out = dict(self.presence_done)
        for tid, veh in self.vehicles_in_system.items():
            extra = max(0.0, h - veh.mark)
            if veh.in_protected:
                out[tid] = (veh.inside + extra, veh.outside)
            else:
                out[tid] = (veh.inside, veh.outside + extra)
        for trip in self.trips[self.next_trip:]:
            extra = max(0.0, h - trip.generation_time)
            if trip.cls is TripClass.EXOGENOUS:
                out[trip.id] = (0.0, extra)
            else:
                out[trip.id] = (extra, 0.0)
        return out

    def completions(self) -> dict[int, float]:
        return dict(self.completed)


def init(net: Network, trips: Sequence[Trip], config: SimConfig = SimConfig()) -> SimState:
    return SimState(net, trips, config)


def run_cycle(
    state: SimState,
    controller: ctrl_mod.Controller,
    T: float,
    profile: DemandProfile | None = None,
) -> CycleSummary:
    """Query the controller once, apply its rate, and advance T seconds."""
    steps = T / state.config.dt
    if abs(steps - round(steps)) > 1e-9 or steps < 1:
        raise ValueError(f"cycle length {T} is not a positive multiple of dt={state.config.dt}")
    steps = int(round(steps))
    before = state.snapshot()
    obs = ctrl_mod.make_observation(before, profile, T, state.prev_n2, state.prev_q_in)
    rate = controller.decide(obs)
    if controller.bypass:
        state.set_bypass()
        applied = state.last_rate
    else:
        applied = state.set_meter_rate(rate)
    done0 = len(state.completed)
    for _ in range(steps):
        state.step()
    summary = CycleSummary(
        index=state.cycle_index, clock_start=before.clock, rate=applied, bypass=controller.bypass,
        steps=steps, completed=len(state.completed) - done0, before=before, after=state.snapshot(),
        observation=obs,
    )
    state.cycle_index += 1
    state.prev_n2 = obs.n2
    state.prev_q_in = applied * len(state.meters)
    return summary


def run(
    state: SimState,
    controller: ctrl_mod.Controller,
    T: float,
    profile: DemandProfile | None = None,
    max_time: float | None = None,
) -> list[CycleSummary]:
    """Run cycles until every trip has been generated and completed, or ``max_time``."""
    controller.reset()
    out = []
    while not state.done and (max_time is None or state.clock < max_time):
        out.append(run_cycle(state, controller, T, profile))
    return out


def write_state_trace(summaries: Sequence[CycleSummary], path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cycle", "clock", "inner_density", "feeder_density", "completed", "meter_rate"))
        for s in summaries:
            w.writerow((s.index, f"{s.clock_start:g}", f"{inner_density(s.before):.6f}",
                        f"{feeder_density(s.before, include_virtual=True):.6f}", s.completed,
                        "bypass" if s.bypass else f"{s.rate:.4f}"))
