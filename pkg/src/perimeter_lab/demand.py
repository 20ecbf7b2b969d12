"""Peaked demand profile, seeded trip tables and future-demand integrals."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .net import Network

N_INTERVALS = 9


class TripClass(str, Enum):
    EXOGENOUS = "q12"  # feeder origin -> protected region
    ENDOGENOUS = "q22"  # protected region -> protected region


@dataclass(frozen=True)
class Trip:
    id: int
    origin: int
    destination: int
    generation_time: float
    cls: TripClass


def interval_weights(r: float) -> list[float]:
    """Symmetric weights ``r**k`` rising to a peak at index 4 and back."""
    if not r >= 1.0:
        raise ValueError(f"peakedness r must be >= 1, got {r}")
    return [float(r) ** k for k in (0, 1, 2, 3, 4, 3, 2, 1, 0)]


@dataclass(frozen=True)
class DemandProfile:
    total_endogenous: float = 11000
    total_exogenous: float = 6000
    peakedness: float = 2.0
    interval_length: float = 900.0

    def __post_init__(self) -> None:
        interval_weights(self.peakedness)
        if self.interval_length <= 0:
            raise ValueError("interval_length must be positive")
        if self.total_endogenous < 0 or self.total_exogenous < 0:
            raise ValueError("demand totals must be non-negative")

    @property
    def weights(self) -> list[float]:
        return interval_weights(self.peakedness)

    @property
    def horizon(self) -> float:
        return N_INTERVALS * self.interval_length

    def rates(self, cls: TripClass) -> np.ndarray:
        """Piecewise-constant generation rate (veh/s) per interval."""
        w = np.asarray(self.weights)
        total = self.total_exogenous if cls is TripClass.EXOGENOUS else self.total_endogenous
        return total * w / w.sum() / self.interval_length

    def interval_counts(self, cls: TripClass) -> list[int]:
        total = self.total_exogenous if cls is TripClass.EXOGENOUS else self.total_endogenous
        return largest_remainder(int(round(total)), self.weights)

    def max_cycle_demand(self, T: float) -> float:
        """Largest number of trips of either class generated within one window of length T."""
        if T <= self.interval_length:
            # a window no longer than one interval fits inside the peak interval
            return float(max(self.rates(TripClass.EXOGENOUS).max(),
                             self.rates(TripClass.ENDOGENOUS).max()) * T)
        starts = np.arange(0.0, self.horizon, self.interval_length / 8)
        return max(max(future_demand(self, s, T)[:2]) for s in starts)


def scale(profile: DemandProfile, factor: float) -> DemandProfile:
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return dataclasses.replace(
        profile,
        total_endogenous=profile.total_endogenous * factor,
        total_exogenous=profile.total_exogenous * factor,
    )


def with_peakedness(profile: DemandProfile, r: float) -> DemandProfile:
    interval_weights(r)
    return dataclasses.replace(profile, peakedness=float(r))


def largest_remainder(total: int, weights) -> list[int]:
    """Apportion ``total`` integer units proportionally to ``weights`` (Hamilton method).

    Ties in the fractional parts go to the lower index.
    """
    w = np.asarray(weights, dtype=float)
    if total == 0 or w.sum() == 0:
        return [0] * len(w)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return [int(x) for x in base]


def future_demand(profile: DemandProfile, t: float, T: float) -> tuple[float, float, float, float]:
    """Vehicles generated in [t, t+T) per class: (n12, n22, n21, n11).

    The last two are identically zero: no trips leave the protected region.
    """
    if not T > 0:
        raise ValueError(f"window length must be positive, got {T}")
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    L = profile.interval_length
    out = []
    for cls in (TripClass.EXOGENOUS, TripClass.ENDOGENOUS):
        rates = profile.rates(cls)
        acc = 0.0
        for i, q in enumerate(rates):
            lo, hi = max(t, i * L), min(t + T, (i + 1) * L)
            if hi > lo:
                acc += q * (hi - lo)
        out.append(float(acc))
    return out[0], out[1], 0.0, 0.0


def generate_trips(profile: DemandProfile, net: Network, seed: int) -> list[Trip]:
    """Seeded trip table with exact per-class totals.

    Interval counts come from largest-remainder rounding of the weights; each
    interval's count is spread evenly over the class's OD pairs, the remainder
    going to a seeded random subset of pairs. Generation times are uniform
    within the interval.
    """
    rng = np.random.default_rng(seed)
    od = np.asarray(net.od_points, dtype=np.int64)
    feeders = np.asarray(net.feeder_origins, dtype=np.int64)
    pairs = {
        TripClass.EXOGENOUS: np.array([(o, d) for o in feeders for d in od], dtype=np.int64).reshape(-1, 2),
        TripClass.ENDOGENOUS: np.array([(o, d) for o in od for d in od if o != d], dtype=np.int64).reshape(-1, 2),
    }
    L = profile.interval_length
    rows = []
    for cls in (TripClass.EXOGENOUS, TripClass.ENDOGENOUS):
        counts = profile.interval_counts(cls)
        if sum(counts) and len(pairs[cls]) == 0:
            raise ValueError(f"no OD pairs available for class {cls.value}")
        P = len(pairs[cls])
        for i, c in enumerate(counts):
            if c == 0:
                continue
            per_pair = np.full(P, c // P, dtype=np.int64)
            extra = c % P
            if extra:
                per_pair[rng.choice(P, size=extra, replace=False)] += 1
            chosen = np.repeat(np.arange(P), per_pair)
            times = rng.uniform(i * L, (i + 1) * L, size=len(chosen))
            for k, tt in zip(chosen, times):
                rows.append((float(tt), cls, int(pairs[cls][k, 0]), int(pairs[cls][k, 1])))
    rows.sort(key=lambda r: (r[0], r[1].value, r[2], r[3]))
    return [Trip(i, o, d, tt, cls) for i, (tt, cls, o, d) in enumerate(rows)]


# -- CSV ---------------------------------------------------------------------

TRIP_FIELDS = ("id", "origin", "destination", "generation_time_s", "class")


def write_trips(trips, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trips_to_csv(trips))


def trips_to_csv(trips) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_FIELDS)
    for t in trips:
        w.writerow((t.id, t.origin, t.destination, repr(t.generation_time), t.cls.value))
    return buf.getvalue()


def trips_from_csv(text: str) -> list[Trip]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TRIP_FIELDS:
        raise ValueError(f"unexpected trip table header {reader.fieldnames}")
    return [
        Trip(int(r["id"]), int(r["origin"]), int(r["destination"]),
             float(r["generation_time_s"]), TripClass(r["class"]))
        for r in reader
    ]


def read_trips(path: str | Path) -> list[Trip]:
    return trips_from_csv(Path(path).read_text())
