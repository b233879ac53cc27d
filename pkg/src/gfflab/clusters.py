"""Sign-cluster labeling and arm/volume observables.

Components are computed per sign over the open-edge subgraph (union-find via
scipy's connected-components routine).  Labels are deterministic: components
are numbered by their smallest site index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DomainError
from .greens import capacity
from .lattice import (
    BoxSpec,
    Edge,
    Site,
    cheb_norms,
    coordinate_grid,
    edge_arrays,
    edge_index,
)


@dataclass
class SignComponents:
    """Per-sign component labels and statistics (label -1 = wrong-sign site)."""

    labels: np.ndarray = field(repr=False)
    volumes: np.ndarray = field(repr=False)
    max_cheb: np.ndarray = field(repr=False)
    min_cheb: np.ndarray = field(repr=False)
    bbox_min: np.ndarray = field(repr=False)
    bbox_max: np.ndarray = field(repr=False)

    @property
    def n_components(self) -> int:
        return len(self.volumes)

    def diameters(self) -> np.ndarray:
        """Coordinate bounding-box diameter (largest side) per component."""
        if self.n_components == 0:
            return np.zeros(0, dtype=int)
        return (self.bbox_max - self.bbox_min).max(axis=0)


@dataclass
class ClusterLabeling:
    box: BoxSpec
    plus: SignComponents
    minus: SignComponents
    field_values: np.ndarray = field(repr=False)
    seed_path: tuple = None

    def sign_components(self, sign) -> SignComponents:
        if sign in ("+", 1, "plus"):
            return self.plus
        if sign in ("-", -1, "minus"):
            return self.minus
        raise DomainError(f"unknown sign {sign!r}")


def _components_for_sign(box: BoxSpec, site_mask, tails, heads, open_mask):
    n = box.n_sites
    keep = open_mask & site_mask[tails] & site_mask[heads]
    graph = sp.coo_matrix(
        (np.ones(int(keep.sum())), (tails[keep], heads[keep])), shape=(n, n)
    )
    _, raw = connected_components(graph, directed=False)
    # keep only components of in-sign sites; renumber by smallest site index
    labels = np.where(site_mask, raw, -1)
    in_sign = np.nonzero(site_mask)[0]
    if in_sign.size == 0:
        empty = np.zeros(0, dtype=int)
        return SignComponents(labels=np.full(n, -1),
                              volumes=empty, max_cheb=empty, min_cheb=empty,
                              bbox_min=np.zeros((box.dimension, 0), dtype=int),
                              bbox_max=np.zeros((box.dimension, 0), dtype=int))
    uniq, compact = np.unique(raw[in_sign], return_inverse=True)
    labels = np.full(n, -1, dtype=np.int64)
    labels[in_sign] = compact
    k = uniq.size
    volumes = np.bincount(compact, minlength=k)
    norms = cheb_norms(box.dimension, box.radius)[in_sign]
    max_cheb = np.full(k, -1)
    min_cheb = np.full(k, box.radius + 1)
    np.maximum.at(max_cheb, compact, norms)
    np.minimum.at(min_cheb, compact, norms)
    coords = coordinate_grid(box.dimension, box.radius)[:, in_sign]
    bbox_min = np.full((box.dimension, k), box.radius + 1, dtype=int)
    bbox_max = np.full((box.dimension, k), -box.radius - 1, dtype=int)
    for axis in range(box.dimension):
        np.minimum.at(bbox_min[axis], compact, coords[axis])
        np.maximum.at(bbox_max[axis], compact, coords[axis])
    return SignComponents(labels=labels, volumes=volumes, max_cheb=max_cheb,
                          min_cheb=min_cheb, bbox_min=bbox_min, bbox_max=bbox_max)


def label(fs, openness, interior_samples=()) -> ClusterLabeling:
    """Connected components of each sign's open subgraph.

    ``interior_samples`` carry instrumented edges whose lattice-to-lattice
    openness is replaced by the conjunction of their sub-segment flags
    (the exact law of full-edge bridge positivity given the interior values).
    """
    box = fs.box
    if openness.box != box:
        raise DomainError("field and openness boxes differ")
    if (fs.seed_path is not None and openness.seed_path is not None
            and fs.seed_path != openness.seed_path):
        raise DomainError("field and openness come from different replicas")
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    plus_open = openness.plus_open
    minus_open = openness.minus_open
    if interior_samples:
        plus_open = plus_open.copy()
        minus_open = minus_open.copy()
        for ips in interior_samples:
            i = edge_index(box, ips.edge)
            plus_open[i] = bool(ips.subsegment_open_plus.all())
            minus_open[i] = bool(ips.subsegment_open_minus.all())
    plus = _components_for_sign(box, fs.values > 0, tails, heads, plus_open)
    minus = _components_for_sign(box, fs.values < 0, tails, heads, minus_open)
    return ClusterLabeling(box=box, plus=plus, minus=minus,
                           field_values=fs.values, seed_path=fs.seed_path)


@dataclass
class InteriorHandle:
    """One instrumented interior point: sample plus its index among offsets."""

    sample: object   # InteriorPointSample
    index: int

    def chain_open(self, sign, toward_first: bool) -> bool:
        flags = (self.sample.subsegment_open_plus if sign == "+"
                 else self.sample.subsegment_open_minus)
        if toward_first:
            return bool(flags[: self.index + 1].all())
        return bool(flags[self.index + 1:].all())

    def value(self) -> float:
        return float(self.sample.values[self.index])


def _point_label(labeling: ClusterLabeling, p, sign) -> int:
    """Component label reached by ``p`` (Site or InteriorHandle), or -1."""
    comp = labeling.sign_components(sign)
    if isinstance(p, Site):
        return int(comp.labels[labeling.box.index(p)])
    val = p.value()
    if (sign == "+" and val <= 0) or (sign == "-" and val >= 0):
        return -1
    edge = p.sample.edge
    for toward_first, endpoint in ((True, edge.a), (False, edge.b)):
        if p.chain_open(sign, toward_first):
            lab = int(comp.labels[labeling.box.index(endpoint)])
            if lab >= 0:
                return lab
    return -1


def one_arm(labeling: ClusterLabeling, v, N: int, sign="+") -> bool:
    """Does v's ``sign`` cluster touch the shell of B(N)?"""
    if N > labeling.box.radius:
        raise DomainError(f"N={N} exceeds the sampled box")
    lab = _point_label(labeling, v, sign)
    if lab < 0:
        return False
    comp = labeling.sign_components(sign)
    return bool(comp.max_cheb[lab] >= N)


def hetero_two_arm(labeling: ClusterLabeling, v, v_prime, N: int) -> bool:
    """v reaches the shell in the plus field and v' in the minus field."""
    if isinstance(v, Site) and isinstance(v_prime, Site) and v == v_prime:
        raise DomainError("v and v' must differ")
    return one_arm(labeling, v, N, sign="+") and one_arm(labeling, v_prime, N, sign="-")


def two_point(labeling: ClusterLabeling, v: Site, w: Site, sign="+") -> bool:
    la = _point_label(labeling, v, sign)
    return la >= 0 and la == _point_label(labeling, w, sign)


def cluster_volume(labeling: ClusterLabeling, v, M: int, sign="+") -> int:
    """Number of lattice sites of v's sign cluster within B_v(M)."""
    box = labeling.box
    center = v if isinstance(v, Site) else _nearest_site(v)
    if center.cheb_norm() + M > box.radius:
        raise DomainError("volume window exceeds the sampled box")
    lab = _point_label(labeling, v, sign)
    if lab < 0:
        return 0
    comp = labeling.sign_components(sign)
    coords = coordinate_grid(box.dimension, box.radius)
    offset = np.abs(coords - np.asarray(center.coords)[:, None]).max(axis=0)
    return int(np.count_nonzero((comp.labels == lab) & (offset <= M)))


def _nearest_site(handle: InteriorHandle) -> Site:
    off = handle.sample.offsets[handle.index]
    d = handle.sample.edge.a.dimension
    return handle.sample.edge.a if off <= d / 2 else handle.sample.edge.b


def touching_edges(labeling: ClusterLabeling, N: int) -> int:
    """Edges inside B(N) joining two opposite-sign clusters, each of
    bounding-box diameter at least N."""
    box = labeling.box
    if N > box.radius:
        raise DomainError(f"N={N} exceeds the sampled box")
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    norms = cheb_norms(box.dimension, box.radius)
    inside = (norms[tails] <= N) & (norms[heads] <= N)
    lp, lm = labeling.plus.labels, labeling.minus.labels
    dp, dm = labeling.plus.diameters(), labeling.minus.diameters()

    count = 0
    for la, lb in ((lp, lm), (lm, lp)):
        da = dp if la is lp else dm
        db = dm if lb is lm else dp
        sel = inside & (la[tails] >= 0) & (lb[heads] >= 0)
        if sel.any():
            big_a = da[la[tails[sel]]] >= N
            big_b = db[lb[heads[sel]]] >= N
            count += int(np.count_nonzero(big_a & big_b))
    return count


def cluster_capacity(labeling: ClusterLabeling, v, M: int, sign="+",
                     solve_limit: int = 5000, mc_walkers: int = 2000,
                     rng=None):
    """Capacity of v's sign component restricted to B_v(M).

    Linear solve up to ``solve_limit`` component sites; Monte Carlo walker
    escape estimate (with standard error) above.
    Returns (value, standard_error); the error is 0 for the exact solve.
    """
    box = labeling.box
    center = v if isinstance(v, Site) else _nearest_site(v)
    lab = _point_label(labeling, v, sign)
    if lab < 0:
        raise DomainError("v is not in a cluster of the requested sign")
    comp = labeling.sign_components(sign)
    coords = coordinate_grid(box.dimension, box.radius)
    offset = np.abs(coords - np.asarray(center.coords)[:, None]).max(axis=0)
    member = np.nonzero((comp.labels == lab) & (offset <= M))[0]
    if member.size == 0:
        raise DomainError("component empty within the window")
    sites = [box.site(int(i)) for i in member]
    if member.size <= solve_limit:
        return capacity(box, sites).total, 0.0
    return _mc_capacity(box, member, mc_walkers, rng)


def _mc_capacity(box: BoxSpec, member: np.ndarray, n_walkers: int, rng):
    """Walker escape estimate of the capacity of a site set."""
    if rng is None:
        rng = np.random.default_rng(0)
    d = box.dimension
    in_D = np.zeros(box.n_sites, dtype=bool)
    in_D[member] = True
    coords = coordinate_grid(box.dimension, box.radius)
    # starting points: outside neighbours of D, weighted 1/(2d) each
    starts = []
    for i in member:
        c = coords[:, i]
        for axis in range(d):
            for step in (-1, 1):
                nb = c.copy()
                nb[axis] += step
                if np.abs(nb).max() > box.radius:
                    continue
                j = int(np.ravel_multi_index(nb + box.radius, (box.side,) * d))
                if not in_D[j]:
                    starts.append(j)
    starts = np.asarray(starts)
    if starts.size == 0:
        return 0.0, 0.0
    walks_per = max(1, n_walkers // starts.size)
    escapes = np.zeros(starts.size)
    side = box.side
    for k, s0 in enumerate(starts):
        pos = np.full(walks_per, s0)
        c0 = np.stack(np.unravel_index(pos, (side,) * d)) - box.radius
        pos_c = c0.T.copy()
        alive = np.ones(walks_per, dtype=bool)
        escaped = np.zeros(walks_per, dtype=bool)
        while alive.any():
            steps = rng.integers(0, 2 * d, size=alive.sum())
            axes, signs = steps // 2, 2 * (steps % 2) - 1
            pc = pos_c[alive]
            pc[np.arange(len(pc)), axes] += signs
            out = np.abs(pc).max(axis=1) > box.radius
            idx_alive = np.nonzero(alive)[0]
            escaped[idx_alive[out]] = True
            alive[idx_alive[out]] = False
            stay = ~out
            if stay.any():
                flat = np.ravel_multi_index((pc[stay] + box.radius).T, (side,) * d)
                hit = in_D[flat]
                idx_stay = idx_alive[stay]
                alive[idx_stay[hit]] = False
                pos_c[idx_stay] = pc[stay]
        escapes[k] = escaped.mean()
    per_start = escapes / (2.0 * d)
    total = float(per_start.sum())
    se = float(np.sqrt(np.sum(escapes * (1 - escapes) / walks_per)) / (2.0 * d))
    return total, se


def bfs_components(box: BoxSpec, site_mask, open_lookup) -> np.ndarray:
    """Brute-force BFS labeling oracle (tests only).

    ``open_lookup(i, j)`` says whether the edge between flat site indices
    i < j is open. Returns labels aligned with ``label()``'s convention.
    """
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    adj = {}
    for t, h in zip(tails, heads):
        if site_mask[t] and site_mask[h] and open_lookup(int(t), int(h)):
            adj.setdefault(int(t), []).append(int(h))
            adj.setdefault(int(h), []).append(int(t))
    labels = np.full(box.n_sites, -1, dtype=np.int64)
    nxt = 0
    for start in np.nonzero(site_mask)[0]:
        if labels[start] >= 0:
            continue
        stack = [int(start)]
        labels[start] = nxt
        while stack:
            cur = stack.pop()
            for nb in adj.get(cur, ()):
                if labels[nb] < 0:
                    labels[nb] = nxt
                    stack.append(nb)
        nxt += 1
    return labels
