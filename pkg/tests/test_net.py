import dataclasses

import networkx as nx
import pytest
from hypothesis import given, strategies as st

from perimeter_lab import net as N
from perimeter_lab.net import NodeKind, Region


def as_digraph(network, region=None):
    g = nx.DiGraph()
    g.add_nodes_from(n.id for n in network.nodes)
    for l in network.links:
        if region is None or l.region is region:
            g.add_edge(l.from_node, l.to_node)
    return g


@pytest.fixture(scope="module")
def reference():
    return N.build_grid()


def test_reference_build_counts(reference):
    assert N.validate(reference) == []
    assert len(reference.meters) == 24
    assert len(reference.od_points) == 100
    assert len(N.region_links(reference, Region.FEEDER)) == 24
    metered = {m.link for m in reference.meters}
    assert metered == N.region_links(reference, Region.FEEDER)


def test_smallest_instance_validates():
    small = N.build_grid(2, 2, 170, 2, 4, 4, 96)
    assert N.validate(small) == []
    feeders = N.region_links(small, Region.FEEDER)
    assert len(feeders) == 4
    assert feeders | N.region_links(small, Region.PROTECTED) == set(range(len(small.links)))


def test_desk_lane_length_by_resummation():
    desk = N.build_grid(3, 3, 150, 2, 8, 16, 96)
    by_hand = 0.0
    for link in desk.links:
        if link.region is Region.PROTECTED:
            by_hand += link.length * link.lanes
    assert desk.lane_km(Region.PROTECTED) == pytest.approx(by_hand / 1000.0, rel=1e-12)
    # 24 grid links of 2 lanes plus 32 single-lane stubs, all 150 m
    assert by_hand == pytest.approx(150 * (24 * 2 + 32))


def test_region_sets_disjoint_by_pairwise_scan():
    desk = N.build_grid(3, 3, 170, 2, 8, 16, 96)
    prot = sorted(N.region_links(desk, Region.PROTECTED))
    feed = sorted(N.region_links(desk, Region.FEEDER))
    assert all(p != f for p in prot for f in feed)
    assert len(prot) + len(feed) == len(desk.links)


def test_link_geometry_defaults(reference):
    grid_links = [l for l in reference.links if l.region is Region.PROTECTED and l.lanes == 2]
    stubs = [l for l in reference.links if l.region is Region.PROTECTED and l.lanes == 1]
    assert all(l.length == 170 for l in reference.links)
    assert len(grid_links) == 2 * 2 * 5 * 4
    assert len(stubs) == 200
    assert grid_links[0].storage_capacity == 48
    assert stubs[0].storage_capacity == 24
    # every stub touches an OD point
    od = set(reference.od_points)
    assert all(l.from_node in od or l.to_node in od for l in stubs)


def test_signals_two_phase_at_every_grid_node(reference):
    grid_nodes = [n.id for n in reference.nodes if n.kind is NodeKind.GRID]
    assert sorted(p.node for p in reference.signals) == grid_nodes
    for plan in reference.signals:
        assert plan.cycle == 96
        greens = [ls for d, ls in plan.phases if ls]
        assert len(greens) == 2 and not greens[0] & greens[1]
        assert sum(d for d, _ in plan.phases) == pytest.approx(96)
        assert plan.permitted(0.0) == greens[0]
        assert plan.permitted(46.0) == frozenset()
        assert plan.permitted(48.0) == greens[1]
        assert plan.permitted(96.0 + 10) == greens[0]


def test_removed_meter_reported(reference):
    lid = reference.meters[3].link
    problems = N.validate(N.without_meter(reference, lid))
    assert problems == [f"unmetered feeder: link {lid}"]


def test_isolated_internal_node_reported():
    desk = N.build_grid(3, 3, 170, 2, 8, 16, 96)
    lonely = N.Node(len(desk.nodes), NodeKind.OD, 0.0, 0.0)
    broken = dataclasses.replace(desk, nodes=desk.nodes + (lonely,), od_points=desk.od_points + (lonely.id,))
    problems = N.validate(broken)
    assert any("not strongly connected" in p for p in problems)
    # oracle: networkx agrees the protected graph is no longer strongly connected
    g = as_digraph(broken, Region.PROTECTED)
    g.add_node(lonely.id)
    sub = g.subgraph([n.id for n in broken.nodes if n.kind is not NodeKind.FEEDER_ORIGIN])
    assert not nx.is_strongly_connected(sub)


def test_unreachable_destination_reported():
    desk = N.build_grid(2, 2, 170, 2, 4, 4, 96)
    # drop every link leaving the first feeder origin
    origin = desk.feeder_origins[0]
    links = [l for l in desk.links if l.from_node != origin]
    relinked = tuple(dataclasses.replace(l, id=i) for i, l in enumerate(links))
    remap = {old.id: new.id for old, new in zip(links, relinked)}
    meters = tuple(dataclasses.replace(m, link=remap[m.link]) for m in desk.meters if m.link in remap)
    signals = tuple(
        dataclasses.replace(p, phases=tuple((d, frozenset(remap[x] for x in ls if x in remap)) for d, ls in p.phases))
        for p in desk.signals
    )
    broken = dataclasses.replace(desk, links=relinked, meters=meters, signals=signals)
    assert N.validate(broken) == [f"feeder origin {origin} reaches no internal destination"]


@pytest.mark.parametrize("args, fragment", [
    ((1, 3), "rows and cols"),
    ((3, 3, 170, 2, 6), "multiple of 4"),
    ((2, 2, 170, 2, 20), "boundary capacity"),
    ((2, 2, 170, 2, 4, 17), "internal_od_count"),
    ((2, 2, -1.0), "link_length"),
    ((2, 2, 170, 0), "lanes"),
])
def test_infeasible_builds_name_the_bound(args, fragment):
    with pytest.raises(N.NetworkError, match=fragment):
        N.build_grid(*args)


grid_args = st.tuples(
    st.integers(2, 5), st.integers(2, 5), st.sampled_from([100.0, 170.0, 250.0]), st.integers(1, 3),
    st.integers(1, 4), st.integers(1, 40),
)


@given(grid_args)
def test_constructible_networks_partition_and_connect(args):
    rows, cols, length, lanes, per_side, od = args
    per_side = min(per_side, 2 * min(rows, cols))
    od = min(od, 4 * rows * cols)
    network = N.build_grid(rows, cols, length, lanes, 4 * per_side, od, 96)
    assert N.validate(network) == []
    prot = N.region_links(network, Region.PROTECTED)
    feed = N.region_links(network, Region.FEEDER)
    assert not prot & feed and prot | feed == set(range(len(network.links)))
    # networkx oracle: protected strongly connected, every feeder origin reaches every OD point
    g = as_digraph(network, Region.PROTECTED)
    inner = [n.id for n in network.nodes if n.kind is not NodeKind.FEEDER_ORIGIN]
    assert nx.is_strongly_connected(g.subgraph(inner))
    full = as_digraph(network)
    for origin in network.feeder_origins:
        assert set(network.od_points) <= nx.descendants(full, origin)


@given(st.floats(1.0, 500.0), st.floats(1.0, 500.0), st.integers(1, 4), st.integers(1, 4))
def test_storage_monotone(l1, l2, n1, n2):
    lo_l, hi_l = sorted((l1, l2))
    lo_n, hi_n = sorted((n1, n2))
    assert N.storage_capacity(lo_l, lo_n) <= N.storage_capacity(hi_l, lo_n) <= N.storage_capacity(hi_l, hi_n)


def test_build_is_deterministic_and_round_trips():
    a = N.dumps(N.build_grid(3, 4, 160, 2, 8, 20, 96))
    b = N.dumps(N.build_grid(3, 4, 160, 2, 8, 20, 96))
    assert a == b
    assert N.dumps(N.loads(a)) == a
    assert N.loads(a) == N.build_grid(3, 4, 160, 2, 8, 20, 96)


def test_loads_rejects_foreign_documents():
    with pytest.raises(ValueError, match="not a network"):
        N.loads('{"format": "other"}')
    doc = N.to_dict(N.build_grid(2, 2, 170, 2, 4, 4, 96))
    doc["version"] = 99
    with pytest.raises(ValueError, match="version"):
        N.from_dict(doc)
