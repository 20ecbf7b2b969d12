"""Grid network with one protected region, metered feeder links and signals.

Node ids are laid out as: grid intersections (row-major), then one external
origin node per feeder link, then one node per internal OD point. Link ids
are dense in this order: grid links, OD stubs (origin stub then destination
stub per point), feeder links. The simulator processes links in ascending id,
so this order also fixes discharge priority.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

NETWORK_FORMAT = "perimeter-lab/network"
NETWORK_VERSION = 1

EFFECTIVE_VEHICLE_LENGTH = 7.0  # m per vehicle per lane at jam spacing
FREE_FLOW_SPEED = 13.89  # m/s, 50 km/h
MAX_OD_PER_NODE = 4
MAX_FEEDERS_PER_SIDE_NODE = 2
GREEN = 45.0
LOST_TIME = 3.0


class Region(str, Enum):
    PROTECTED = "protected"
    FEEDER = "feeder"


class NodeKind(str, Enum):
    GRID = "grid"
    FEEDER_ORIGIN = "feeder_origin"
    OD = "od"


class NetworkError(ValueError):
    """Raised when grid parameters cannot produce a legal network."""


def storage_capacity(length: float, lanes: int) -> int:
    return int(math.floor(length * lanes / EFFECTIVE_VEHICLE_LENGTH))


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    x: float
    y: float


@dataclass(frozen=True)
class Link:
    id: int
    from_node: int
    to_node: int
    length: float
    lanes: int
    region: Region
    free_flow_speed: float = FREE_FLOW_SPEED
    # signal group at the downstream node: "NS", "EW" or "" for none
    approach: str = ""

    @property
    def storage_capacity(self) -> int:
        return storage_capacity(self.length, self.lanes)

    @property
    def free_flow_time(self) -> float:
        return self.length / self.free_flow_speed


@dataclass(frozen=True)
class SignalPlan:
    node: int
    cycle: float
    phases: tuple[tuple[float, frozenset[int]], ...]

    def permitted(self, t: float) -> frozenset[int]:
        """Incoming links with green at time ``t``."""
        tc = t % self.cycle
        acc = 0.0
        for duration, links in self.phases:
            acc += duration
            if tc < acc:
                return links
        return frozenset()


@dataclass(frozen=True)
class Meter:
    link: int
    min_rate: float = 50.0
    max_rate: float = 300.0


@dataclass(frozen=True)
class Network:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    signals: tuple[SignalPlan, ...]
    meters: tuple[Meter, ...]
    od_points: tuple[int, ...]
    feeder_origins: tuple[int, ...]
    rows: int = 0
    cols: int = 0

    def out_links(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for link in self.links:
            out[link.from_node].append(link.id)
        return out

    def in_links(self) -> list[list[int]]:
        inc: list[list[int]] = [[] for _ in self.nodes]
        for link in self.links:
            inc[link.to_node].append(link.id)
        return inc

    @property
    def meter_count(self) -> int:
        return len(self.meters)

    def feeder_link_of(self, origin: int) -> int:
        for link in self.links:
            if link.from_node == origin and link.region is Region.FEEDER:
                return link.id
        raise KeyError(f"node {origin} has no feeder link")

    def origin_stub_of(self, od: int) -> int:
        for link in self.links:
            if link.from_node == od:
                return link.id
        raise KeyError(f"OD point {od} has no origin stub")

    def destination_stub_of(self, od: int) -> int:
        for link in self.links:
            if link.to_node == od:
                return link.id
        raise KeyError(f"OD point {od} has no destination stub")

    def lane_km(self, region: Region) -> float:
        return sum(l.length * l.lanes for l in self.links if l.region is region) / 1000.0


def region_links(net: Network, region: Region) -> set[int]:
    return {link.id for link in net.links if link.region is region}


def _side_nodes(rows: int, cols: int) -> dict[str, list[int]]:
    return {
        "N": [c for c in range(cols)],
        "S": [(rows - 1) * cols + c for c in range(cols)],
        "W": [r * cols for r in range(rows)],
        "E": [r * cols + cols - 1 for r in range(rows)],
    }


def build_grid(
    rows: int = 5,
    cols: int = 5,
    link_length: float = 170.0,
    lanes: int = 2,
    feeder_count: int = 24,
    internal_od_count: int = 100,
    cycle: float = 96.0,
    free_flow_speed: float = FREE_FLOW_SPEED,
) -> Network:
    """Build a rows x cols signalized grid with metered feeders on all four sides.

    Feeders are split evenly over the four sides and placed round-robin along
    each side's boundary nodes. OD points hang off grid nodes round-robin via
    a pair of single-lane stubs.
    """
    if rows < 2 or cols < 2:
        raise NetworkError(f"rows and cols must be >= 2, got {rows}x{cols}")
    if link_length <= 0:
        raise NetworkError(f"link_length must be > 0, got {link_length}")
    if lanes < 1:
        raise NetworkError(f"lanes must be >= 1, got {lanes}")
    if feeder_count <= 0 or feeder_count % 4:
        raise NetworkError(f"feeder_count must be a positive multiple of 4, got {feeder_count}")
    per_side = feeder_count // 4
    max_per_side = MAX_FEEDERS_PER_SIDE_NODE * min(rows, cols)
    if per_side > max_per_side:
        raise NetworkError(
            f"feeder_count {feeder_count} exceeds boundary capacity {4 * max_per_side}"
        )
    n_grid = rows * cols
    if internal_od_count < 1 or internal_od_count > MAX_OD_PER_NODE * n_grid:
        raise NetworkError(
            f"internal_od_count must be in [1, {MAX_OD_PER_NODE * n_grid}], got {internal_od_count}"
        )
    link_length = float(link_length)
    green = (cycle - 2 * LOST_TIME) / 2.0
    if green <= 0:
        raise NetworkError(f"cycle {cycle} leaves no green time")

    nodes: list[Node] = [
        Node(r * cols + c, NodeKind.GRID, c * link_length, r * link_length)
        for r in range(rows)
        for c in range(cols)
    ]
    links: list[Link] = []

    def add_link(u: int, v: int, n_lanes: int, region: Region, approach: str) -> int:
        lid = len(links)
        links.append(Link(lid, u, v, float(link_length), n_lanes, region, free_flow_speed, approach))
        return lid

    # grid links, sorted by (from, to) for a stable id order
    pairs = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    pairs.append((u, rr * cols + cc, "NS" if dr else "EW"))
    for u, v, approach in sorted(pairs):
        add_link(u, v, lanes, Region.PROTECTED, approach)

    # feeder origin nodes
    sides = _side_nodes(rows, cols)
    offsets = {"N": (0.0, -1.0), "S": (0.0, 1.0), "W": (-1.0, 0.0), "E": (1.0, 0.0)}
    feeder_plan: list[tuple[int, str]] = []
    for side in ("N", "E", "S", "W"):
        side_nodes = sides[side]
        for k in range(per_side):
            feeder_plan.append((side_nodes[k % len(side_nodes)], side))
    feeder_origins = []
    for attach, side in feeder_plan:
        base = nodes[attach]
        dx, dy = offsets[side]
        nid = len(nodes)
        nodes.append(Node(nid, NodeKind.FEEDER_ORIGIN, base.x + dx * link_length, base.y + dy * link_length))
        feeder_origins.append(nid)

    # OD points: origin stub into the grid, destination stub out of it
    od_points = []
    for j in range(internal_od_count):
        attach = j % n_grid
        slot = j // n_grid
        base = nodes[attach]
        nid = len(nodes)
        angle = math.pi / 4 + slot * math.pi / 2
        nodes.append(
            Node(nid, NodeKind.OD, base.x + 0.25 * link_length * math.cos(angle),
                 base.y + 0.25 * link_length * math.sin(angle))
        )
        od_points.append(nid)
        # connectors join unsignalized; only grid and feeder approaches see the signal
        add_link(nid, attach, 1, Region.PROTECTED, "")
        add_link(attach, nid, 1, Region.PROTECTED, "")

    meters = []
    for origin, (attach, side) in zip(feeder_origins, feeder_plan):
        lid = add_link(origin, attach, lanes, Region.FEEDER, "NS" if side in ("N", "S") else "EW")
        meters.append(Meter(lid))

    signals = []
    for node in range(n_grid):
        incoming = [l for l in links if l.to_node == node]
        ns = frozenset(l.id for l in incoming if l.approach == "NS")
        ew = frozenset(l.id for l in incoming if l.approach == "EW")
        signals.append(
            SignalPlan(node, float(cycle),
                       ((green, ns), (LOST_TIME, frozenset()), (green, ew), (LOST_TIME, frozenset())))
        )

    return Network(tuple(nodes), tuple(links), tuple(signals), tuple(meters),
                   tuple(od_points), tuple(feeder_origins), rows, cols)


def _reachable(adj: list[list[int]], start: int) -> set[int]:
    seen = {start}
    todo = deque([start])
    while todo:
        u = todo.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return seen


def validate(net: Network) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems: list[str] = []
    n = len(net.nodes)
    if [node.id for node in net.nodes] != list(range(n)):
        problems.append("node ids not dense and zero-based")
    if [link.id for link in net.links] != list(range(len(net.links))):
        problems.append("link ids not dense and zero-based")
    for link in net.links:
        if not (0 <= link.from_node < n and 0 <= link.to_node < n):
            problems.append(f"link {link.id}: endpoint out of range")
        if link.length <= 0:
            problems.append(f"link {link.id}: non-positive length")
        if link.lanes < 1:
            problems.append(f"link {link.id}: fewer than one lane")
        if link.free_flow_speed <= 0:
            problems.append(f"link {link.id}: non-positive free-flow speed")
        elif link.storage_capacity < 1:
            problems.append(f"link {link.id}: storage capacity below one vehicle")
    if problems:
        return problems

    metered: dict[int, int] = {}
    for meter in net.meters:
        metered[meter.link] = metered.get(meter.link, 0) + 1
        if not 0 < meter.min_rate <= meter.max_rate:
            problems.append(f"meter on link {meter.link}: bad rate bounds")
        if meter.link >= len(net.links) or net.links[meter.link].region is not Region.FEEDER:
            problems.append(f"meter on link {meter.link}: not a feeder link")
    for lid in sorted(region_links(net, Region.FEEDER)):
        count = metered.get(lid, 0)
        if count == 0:
            problems.append(f"unmetered feeder: link {lid}")
        elif count > 1:
            problems.append(f"feeder link {lid} carries {count} meters")

    for plan in net.signals:
        total = sum(d for d, _ in plan.phases)
        if abs(total - plan.cycle) > 1e-9:
            problems.append(f"signal at node {plan.node}: phases sum to {total}, cycle {plan.cycle}")

    # protected sub-graph (grid + OD nodes) must be strongly connected
    protected_nodes = sorted(
        {l.from_node for l in net.links if l.region is Region.PROTECTED}
        | {l.to_node for l in net.links if l.region is Region.PROTECTED}
        | {node.id for node in net.nodes if node.kind is not NodeKind.FEEDER_ORIGIN}
    )
    fwd: list[list[int]] = [[] for _ in range(n)]
    rev: list[list[int]] = [[] for _ in range(n)]
    for l in net.links:
        if l.region is Region.PROTECTED:
            fwd[l.from_node].append(l.to_node)
            rev[l.to_node].append(l.from_node)
    if protected_nodes:
        root = protected_nodes[0]
        reach_f = _reachable(fwd, root)
        reach_r = _reachable(rev, root)
        unreached = [u for u in protected_nodes if u not in reach_f or u not in reach_r]
        if unreached:
            problems.append(f"protected region not strongly connected: nodes {unreached}")

    all_adj: list[list[int]] = [[] for _ in range(n)]
    for l in net.links:
        all_adj[l.from_node].append(l.to_node)
    dests = set(net.od_points)
    for origin in net.feeder_origins:
        if not (_reachable(all_adj, origin) - {origin}) & dests:
            problems.append(f"feeder origin {origin} reaches no internal destination")
    return problems


# -- serialization -----------------------------------------------------------

def to_dict(net: Network) -> dict:
    return {
        "format": NETWORK_FORMAT,
        "version": NETWORK_VERSION,
        "grid": {"rows": net.rows, "cols": net.cols},
        "nodes": [[n.id, n.kind.value, n.x, n.y] for n in net.nodes],
        "links": [
            {
                "id": l.id, "from": l.from_node, "to": l.to_node, "length": l.length,
                "lanes": l.lanes, "region": l.region.value,
                "free_flow_speed": l.free_flow_speed, "approach": l.approach,
            }
            for l in net.links
        ],
        "meters": [{"link": m.link, "min_rate": m.min_rate, "max_rate": m.max_rate} for m in net.meters],
        "signals": [
            {"node": s.node, "cycle": s.cycle,
             "phases": [{"green": d, "links": sorted(ls)} for d, ls in s.phases]}
            for s in net.signals
        ],
        "od_points": list(net.od_points),
        "feeder_origins": list(net.feeder_origins),
    }


def from_dict(doc: dict) -> Network:
    if doc.get("format") != NETWORK_FORMAT:
        raise ValueError(f"not a network document: format={doc.get('format')!r}")
    if doc.get("version") != NETWORK_VERSION:
        raise ValueError(f"unsupported network version {doc.get('version')!r}")
    nodes = tuple(Node(i, NodeKind(k), float(x), float(y)) for i, k, x, y in doc["nodes"])
    links = tuple(
        Link(d["id"], d["from"], d["to"], float(d["length"]), int(d["lanes"]), Region(d["region"]),
             float(d["free_flow_speed"]), d["approach"])
        for d in doc["links"]
    )
    meters = tuple(Meter(d["link"], float(d["min_rate"]), float(d["max_rate"])) for d in doc["meters"])
    signals = tuple(
        SignalPlan(d["node"], float(d["cycle"]),
                   tuple((float(p["green"]), frozenset(p["links"])) for p in d["phases"]))
        for d in doc["signals"]
    )
    return Network(nodes, links, signals, meters, tuple(doc["od_points"]),
                   tuple(doc["feeder_origins"]), doc["grid"]["rows"], doc["grid"]["cols"])


def dumps(net: Network) -> str:
    return json.dumps(to_dict(net), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> Network:
    return from_dict(json.loads(text))


def without_meter(net: Network, link_id: int) -> Network:
    """Copy of ``net`` with the meter on ``link_id`` removed (for fault checks)."""
    return dataclasses.replace(net, meters=tuple(m for m in net.meters if m.link != link_id))
