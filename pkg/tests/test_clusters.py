import numpy as np
import pytest

from gfflab.clusters import (
    InteriorHandle,
    bfs_components,
    cluster_capacity,
    cluster_volume,
    hetero_two_arm,
    label,
    one_arm,
    touching_edges,
    two_point,
)
from gfflab.errors import DomainError
from gfflab.gff import EdgeOpenness, FieldSample, open_edges, sample_field, sample_interior
from gfflab.greens import dirichlet_green
from gfflab.lattice import BoxSpec, Edge, Site, edge_arrays, edge_index, origin


def _labeling(box, seed, replica=0, tag="clusters"):
    fs = sample_field(box, (seed, tag, replica))
    op = open_edges(fs, (seed, tag, replica))
    return fs, op, label(fs, op)


def test_label_against_bfs_oracle():
    for trial in range(150):
        box = BoxSpec(3, 1 + trial % 2)
        fs, op, lab = _labeling(box, 100, trial)
        tails, heads, _ = edge_arrays(box.dimension, box.radius)
        for sign, opn, mask in (("+", op.plus_open, fs.values > 0),
                                ("-", op.minus_open, fs.values < 0)):
            openset = set()
            for e in np.nonzero(opn)[0]:
                openset.add((int(tails[e]), int(heads[e])))
                openset.add((int(heads[e]), int(tails[e])))
            oracle = bfs_components(box, mask, lambda a, b: (a, b) in openset)
            comp = lab.sign_components(sign)
            # identical partitions of the in-sign sites
            mapping = {}
            for i in range(box.n_sites):
                if not mask[i]:
                    assert comp.labels[i] == -1
                    continue
                key = oracle[i]
                if key in mapping:
                    assert comp.labels[i] == mapping[key]
                else:
                    mapping[key] = comp.labels[i]
            assert len(set(mapping.values())) == len(mapping)


def test_label_determinism():
    box = BoxSpec(3, 2)
    _, _, a = _labeling(box, 4, 7)
    _, _, b = _labeling(box, 4, 7)
    assert np.array_equal(a.plus.labels, b.plus.labels)
    assert np.array_equal(a.minus.labels, b.minus.labels)


def test_label_rejects_mismatched_replicas():
    box = BoxSpec(3, 1)
    fs = sample_field(box, (1, "a", 0))
    op = open_edges(sample_field(box, (1, "a", 1)), (1, "a", 1))
    with pytest.raises(DomainError):
        label(fs, op)


def test_arm_implications_per_replica():
    box = BoxSpec(3, 4)
    v, vp = origin(3), Site((1, 0, 0))
    for r in range(40):
        _, _, lab = _labeling(box, 9, r)
        for N in (1, 2, 3):
            if hetero_two_arm(lab, v, vp, N):
                assert one_arm(lab, v, N, "+")
                assert one_arm(lab, vp, N, "-")
            # monotone in N
            if one_arm(lab, v, N + 1, "+"):
                assert one_arm(lab, v, N, "+")


def test_one_arm_rejects_oversized_n():
    box = BoxSpec(3, 2)
    _, _, lab = _labeling(box, 2)
    with pytest.raises(DomainError):
        one_arm(lab, origin(3), 3)


def test_two_arm_rejects_equal_points():
    box = BoxSpec(3, 2)
    _, _, lab = _labeling(box, 2)
    with pytest.raises(DomainError):
        hetero_two_arm(lab, origin(3), origin(3), 1)


def test_two_point_symmetric():
    box = BoxSpec(3, 2)
    v, w = origin(3), Site((1, 1, 0))
    for r in range(20):
        _, _, lab = _labeling(box, 5, r)
        assert two_point(lab, v, w) == two_point(lab, w, v)


def test_cluster_volume_window_and_bounds():
    box = BoxSpec(3, 3)
    v = origin(3)
    for r in range(20):
        fs, _, lab = _labeling(box, 6, r)
        if fs.value_at(v) <= 0:
            assert cluster_volume(lab, v, 2, "+") == 0
            continue
        v1 = cluster_volume(lab, v, 1, "+")
        v2 = cluster_volume(lab, v, 2, "+")
        assert 1 <= v1 <= 27
        assert v1 <= v2
    with pytest.raises(DomainError):
        cluster_volume(lab, Site((2, 0, 0)), 2, "+")


def _manual_labeling(box, values, open_pairs):
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    plus = np.zeros(len(tails), dtype=bool)
    minus = np.zeros(len(tails), dtype=bool)
    for a, b in open_pairs:
        i = edge_index(box, Edge(a, b))
        if values[box.index(a)] > 0 and values[box.index(b)] > 0:
            plus[i] = True
        else:
            minus[i] = True
    fs = FieldSample(box, values, None)
    op = EdgeOpenness(box, plus, minus, None)
    return label(fs, op)


def test_touching_edges_constructed_instance():
    box = BoxSpec(3, 1)
    values = np.full(box.n_sites, 0.0)
    # tiny alternating filler so no site is exactly zero
    for i in range(box.n_sites):
        values[i] = 0.01 if i % 2 == 0 else -0.01
    plus_sites = [Site((-1, 0, 0)), origin(3)]
    minus_sites = [Site((0, 1, 0)), Site((1, 1, 0))]
    for s in plus_sites:
        values[box.index(s)] = 1.0
    for s in minus_sites:
        values[box.index(s)] = -1.0
    lab = _manual_labeling(box, values, [
        (plus_sites[0], plus_sites[1]),
        (minus_sites[0], minus_sites[1]),
    ])
    # exactly one interface edge ((0,0,0)-(0,1,0)) joins two diameter-1 clusters
    assert touching_edges(lab, 1) == 1


def test_touching_edges_rejects_oversized_n():
    box = BoxSpec(3, 1)
    _, _, lab = _labeling(box, 3)
    with pytest.raises(DomainError):
        touching_edges(lab, 2)


def test_cluster_capacity_single_site():
    box = BoxSpec(3, 4)
    values = np.full(box.n_sites, -0.01)
    values[box.index(origin(3))] = 1.0
    lab = _manual_labeling(box, values, [])
    cap, se = cluster_capacity(lab, origin(3), 2, "+")
    assert se == 0.0
    g00 = dirichlet_green(box, [], origin(3), origin(3))
    assert cap == pytest.approx(1.0 / g00, rel=1e-9)


def test_interior_override_blocks_edge():
    box = BoxSpec(3, 1)
    values = np.full(box.n_sites, -0.01)
    e = Edge(origin(3), Site((1, 0, 0)))
    values[box.index(e.a)] = 1.0
    values[box.index(e.b)] = 1.0
    fs = FieldSample(box, values, None)
    sample = None
    # find a replica whose midpoint bridge value is negative: edge must close
    for r in range(200):
        out = sample_interior(fs, e, [1.5], (8, "cut", r))
        if out.values[0] < 0:
            sample = out
            break
    assert sample is not None
    lab = label(fs, open_edges(fs, np.random.default_rng(0)), [sample])
    assert lab.plus.labels[box.index(e.a)] != lab.plus.labels[box.index(e.b)]
    # and a handle at that point belongs to no plus cluster
    handle = InteriorHandle(sample, 0)
    assert not one_arm(lab, handle, 1, "+")


def test_interior_handle_connects_when_chain_open():
    box = BoxSpec(3, 1)
    values = np.full(box.n_sites, -0.01)
    e = Edge(origin(3), Site((1, 0, 0)))
    values[box.index(e.a)] = 2.0
    values[box.index(e.b)] = 2.0
    fs = FieldSample(box, values, None)
    for r in range(300):
        out = sample_interior(fs, e, [1.5], (9, "join", r))
        if out.values[0] > 0 and out.subsegment_open_plus.all():
            handle = InteriorHandle(out, 0)
            lab = label(fs, open_edges(fs, np.random.default_rng(1)), [out])
            assert two_point(lab, e.a, e.b, "+")
            assert (cluster_volume(lab, handle, 1, "+") >= 2)
            return
    pytest.fail("no replica with a fully open positive chain")
