"""Densities, completion rate, total time spent and MFD point series."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class Snapshot:
    clock: float
    protected_count: int
    protected_lane_km: float
    feeder_count: int
    feeder_lane_km: float
    meter_pending: int  # vehicles held at feeder origins
    origin_waiting: int  # vehicles held at internal origins
    completed: int
    protected_vkt: float = 0.0  # cumulative veh-km travelled on protected links


@dataclass(frozen=True)
class MfdPoint:
    window_start: float
    density: float
    production: float
    phase: str  # "loading" | "unloading"


@dataclass(frozen=True)
class TtsBreakdown:
    total_h: float
    inside_h: float
    outside_h: float


def inner_density(snap: Snapshot) -> float:
    """Vehicles per lane-km on protected links."""
    if not snap.protected_lane_km > 0:
        raise ValueError("protected region has no length")
    return snap.protected_count / snap.protected_lane_km


def feeder_density(snap: Snapshot, include_virtual: bool = False) -> float:
    if not snap.feeder_lane_km > 0:
        raise ValueError("feeder links have no length")
    n = snap.feeder_count + (snap.meter_pending if include_virtual else 0)
    return n / snap.feeder_lane_km


def completion_rate(completed: int, window: float) -> float:
    if not window > 0:
        raise ValueError("window must be positive")
    return completed / window


def completion_rate_series(exit_times: Sequence[float], window: float, end: float) -> np.ndarray:
    """Completions per second in consecutive windows covering [0, end)."""
    n = max(1, int(np.ceil(end / window)))
    counts = np.zeros(n)
    for t in exit_times:
        k = min(int(t // window), n - 1)
        counts[k] += 1
    return counts / window


def tts(
    trips,
    completions: Mapping[int, float],
    horizon_end: float,
    presence: Mapping[int, tuple[float, float]] | None = None,
) -> TtsBreakdown:
    """Total time spent in hours, with an inside/outside split when presence is given.

    ``completions`` maps trip id to exit time. Unfinished trips accrue
    ``horizon_end - generation_time``. ``presence`` maps trip id to seconds
    spent (inside, outside) the protected region up to exit or horizon_end.
    """
    total = 0.0
    for trip in trips:
        exit_t = completions.get(trip.id)
        if exit_t is None:
            total += max(0.0, horizon_end - trip.generation_time)
        else:
            if exit_t < trip.generation_time:
                raise ValueError(f"trip {trip.id} exits at {exit_t} before generation {trip.generation_time}")
            total += exit_t - trip.generation_time
    inside = outside = float("nan")
    if presence is not None:
        inside = sum(p[0] for p in presence.values()) / 3600.0
        outside = sum(p[1] for p in presence.values()) / 3600.0
    return TtsBreakdown(total / 3600.0, inside, outside)


def mfd_series(trace: Sequence[Snapshot], aggregation: float) -> list[MfdPoint]:
    """Aggregate a per-step snapshot trace into MFD points.

    Density is the window mean of inner density; production is protected
    veh-km in the window per protected lane-km per hour. Points up to and
    including the densest window are tagged loading, later ones unloading.
    """
    if not trace:
        return []
    lane_km = trace[0].protected_lane_km
    t0 = trace[0].clock
    buckets: dict[int, list[Snapshot]] = {}
    for s in trace:
        buckets.setdefault(int((s.clock - t0) // aggregation), []).append(s)
    keys = sorted(buckets)
    dens, prod = [], []
    prev_vkt = trace[0].protected_vkt
    for k in keys:
        snaps = buckets[k]
        dens.append(float(np.mean([s.protected_count for s in snaps])) / lane_km)
        vkt = snaps[-1].protected_vkt
        span_h = aggregation / 3600.0
        prod.append(max(0.0, vkt - prev_vkt) / (lane_km * span_h))
        prev_vkt = vkt
    peak = int(np.argmax(dens)) if any(dens) else len(dens) - 1
    return [
        MfdPoint(t0 + k * aggregation, d, p, "loading" if i <= peak else "unloading")
        for i, (k, d, p) in enumerate(zip(keys, dens, prod))
    ]


def hysteresis_gap(points: Sequence[MfdPoint], bins: int = 10) -> float:
    """Mean (unloading - loading) production over density bins both phases visit.

    Negative values mean the network produces less on the way down.
    """
    load = [(p.density, p.production) for p in points if p.phase == "loading"]
    unload = [(p.density, p.production) for p in points if p.phase == "unloading"]
    if not load or not unload:
        return float("nan")
    lo = max(min(d for d, _ in load), min(d for d, _ in unload))
    hi = min(max(d for d, _ in load), max(d for d, _ in unload))
    if not hi > lo:
        return float("nan")
    edges = np.linspace(lo, hi, bins + 1)
    gaps = []
    for a, b in zip(edges[:-1], edges[1:]):
        lp = [p for d, p in load if a <= d <= b]
        up = [p for d, p in unload if a <= d <= b]
        if lp and up:
            gaps.append(np.mean(up) - np.mean(lp))
    return float(np.mean(gaps)) if gaps else float("nan")


def write_mfd_csv(points: Sequence[MfdPoint], path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window_start", "density", "production", "phase"))
        for p in points:
            w.writerow((f"{p.window_start:g}", f"{p.density:.6f}", f"{p.production:.6f}", p.phase))
