import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfflab.errors import DomainError
from gfflab.lattice import (
    BoxSpec,
    Edge,
    MetricPoint,
    Site,
    as_metric_point,
    boundary,
    edge_arrays,
    edge_index,
    graph_distance,
    neighbors,
    origin,
)


def test_box_site_count():
    assert BoxSpec(3, 2).n_sites == 125
    assert BoxSpec(4, 1).n_sites == 81
    assert BoxSpec(3, 8).n_sites == 17 ** 3


def test_box_rejects_bad_dimension():
    with pytest.raises(DomainError):
        BoxSpec(2, 3)
    with pytest.raises(DomainError):
        BoxSpec(3, 0)


def test_index_site_roundtrip():
    box = BoxSpec(3, 2)
    for i in range(box.n_sites):
        assert box.index(box.site(i)) == i


def test_contains():
    box = BoxSpec(3, 2)
    assert box.contains(Site((2, -2, 0)))
    assert not box.contains(Site((3, 0, 0)))


def test_neighbors_center_and_corner():
    box = BoxSpec(3, 2)
    assert len(neighbors(origin(3), box)) == 6
    assert len(neighbors(Site((2, 2, 2)), box)) == 3
    assert len(neighbors(Site((2, 0, 0)), box)) == 5


def test_neighbors_are_distance_one():
    box = BoxSpec(3, 3)
    for nb in neighbors(Site((1, -2, 0)), box):
        assert nb.l1_distance(Site((1, -2, 0))) == 1
        assert box.contains(nb)


def test_boundary_size():
    box = BoxSpec(3, 2)
    shell = boundary(box)
    assert len(shell) == 5 ** 3 - 3 ** 3
    assert all(s.cheb_norm() == 2 for s in shell)


def test_edge_canonical_order():
    a, b = Site((1, 0, 0)), Site((0, 0, 0))
    e = Edge(a, b)
    assert e.a == b and e.b == a
    with pytest.raises(DomainError):
        Edge(a, Site((2, 1, 0)))


def test_edge_arrays_count():
    # interior edges of B(N): 2N(2N+1)^(d-1) per axis
    for d, N in ((3, 2), (4, 1)):
        tails, heads, axes = edge_arrays(d, N)
        side = 2 * N + 1
        expected = d * (side - 1) * side ** (d - 1)
        assert len(tails) == expected
        assert len(set(zip(tails.tolist(), heads.tolist()))) == expected


def test_edge_index_consistent():
    box = BoxSpec(3, 2)
    tails, heads, _ = edge_arrays(3, 2)
    for k in (0, 17, 101, len(tails) - 1):
        e = Edge(box.site(int(tails[k])), box.site(int(heads[k])))
        assert edge_index(box, e) == k


def test_metric_point_validation():
    e = Edge(origin(3), Site((1, 0, 0)))
    MetricPoint(e, 1.5)
    with pytest.raises(DomainError):
        MetricPoint(e, 3.5)
    with pytest.raises(DomainError):
        MetricPoint(e, -0.1)


def test_metric_point_endpoints_are_sites():
    e = Edge(origin(3), Site((1, 0, 0)))
    assert MetricPoint(e, 0.0).as_site() == e.a
    assert MetricPoint(e, 3.0).as_site() == e.b
    assert MetricPoint(e, 1.0).as_site() is None


def test_graph_distance_same_edge():
    d = 3
    e = Edge(origin(3), Site((1, 0, 0)))
    p = MetricPoint(e, 0.5)
    q = MetricPoint(e, 2.0)
    assert graph_distance(p, q) == pytest.approx(1.5)


def test_graph_distance_sites_is_scaled_l1():
    d = 3
    p = as_metric_point(origin(3))
    q = as_metric_point(Site((2, -1, 1)))
    assert graph_distance(p, q) == pytest.approx(d * 4)


def test_graph_distance_cross_edges():
    d = 3
    e1 = Edge(origin(3), Site((1, 0, 0)))
    e2 = Edge(Site((0, 1, 0)), Site((1, 1, 0)))
    p = MetricPoint(e1, 1.0)
    q = MetricPoint(e2, 1.0)
    # best route: p -> (0,0,0) [1] -> (0,1,0) [3] -> q [1]
    assert graph_distance(p, q) == pytest.approx(5.0)


@settings(max_examples=200, deadline=None)
@given(
    d=st.integers(3, 5),
    coords=st.lists(st.integers(-3, 3), min_size=5, max_size=5),
    coords2=st.lists(st.integers(-3, 3), min_size=5, max_size=5),
    offs=st.floats(0.0, 1.0),
    offs2=st.floats(0.0, 1.0),
)
def test_graph_distance_triangle_inequality(d, coords, coords2, offs, offs2):
    a = Site(tuple(coords[:d]))
    b = Site(tuple(coords2[:d]))
    shift = list(a.coords)
    shift[0] += 1
    a2 = Site(tuple(shift))
    shift2 = list(b.coords)
    shift2[1] += 1
    b2 = Site(tuple(shift2))
    p = MetricPoint(Edge(a, a2), offs * d)
    q = MetricPoint(Edge(b, b2), offs2 * d)
    r = as_metric_point(origin(d))
    dpq = graph_distance(p, q)
    assert dpq >= 0
    assert dpq == pytest.approx(graph_distance(q, p))
    assert dpq <= graph_distance(p, r) + graph_distance(r, q) + 1e-9


def test_cheb_norm():
    assert Site((2, -3, 1)).cheb_norm() == 3
    assert origin(4).cheb_norm() == 0
