"""Geometry of boxes in Z^d and the metric graph.

Unit conventions (used consistently across the package):

* box radii N, M are in *coordinate* units: B(N) = [-N, N]^d cap Z^d;
* distances between points of the metric graph are in *graph* units,
  where every nearest-neighbour edge is an interval of length d.

A ``MetricPoint`` lives on an ``Edge`` at an offset in [0, d] measured from
the edge's first (canonical) endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class BoxSpec:
    """The box B(N) = [-N, N]^d cap Z^d."""

    dimension: int
    radius: int

    def __post_init__(self):
        if self.dimension < 3:
            raise DomainError(f"dimension must be >= 3, got {self.dimension}")
        if self.radius < 1:
            raise DomainError(f"radius must be >= 1, got {self.radius}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.dimension

    def contains(self, site: "Site") -> bool:
        return len(site.coords) == self.dimension and all(
            abs(c) <= self.radius for c in site.coords
        )

    def index(self, site: "Site") -> int:
        """Row-major index over coordinates shifted to [0, 2N]."""
        if not self.contains(site):
            raise DomainError(f"site {site.coords} outside B({self.radius})")
        idx = 0
        for c in site.coords:
            idx = idx * self.side + (c + self.radius)
        return idx

    def site(self, index: int) -> "Site":
        if not 0 <= index < self.n_sites:
            raise DomainError(f"index {index} out of range")
        coords = []
        for _ in range(self.dimension):
            coords.append(index % self.side - self.radius)
            index //= self.side
        return Site(tuple(reversed(coords)))


@dataclass(frozen=True)
class Site:
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    @property
    def dimension(self) -> int:
        return len(self.coords)

    def l1_distance(self, other: "Site") -> int:
        return sum(abs(a - b) for a, b in zip(self.coords, other.coords))

    def cheb_norm(self) -> int:
        return max(abs(c) for c in self.coords)


def origin(d: int) -> Site:
    return Site((0,) * d)


@dataclass(frozen=True)
class Edge:
    """Unordered lattice edge, stored with the lexicographically smaller endpoint first."""

    a: Site
    b: Site

    def __post_init__(self):
        if self.a.l1_distance(self.b) != 1:
            raise DomainError(f"{self.a.coords} and {self.b.coords} are not adjacent")
        if self.b.coords < self.a.coords:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    def endpoints(self):
        return self.a, self.b


@dataclass(frozen=True)
class MetricPoint:
    """A point on an edge interval; offset in [0, d] from the first endpoint."""

    edge: Edge
    offset: float

    def __post_init__(self):
        d = self.edge.a.dimension
        if not 0.0 <= self.offset <= d:
            raise DomainError(f"offset {self.offset} outside [0, {d}]")

    @property
    def dimension(self) -> int:
        return self.edge.a.dimension

    def as_site(self):
        """The lattice site this point coincides with, or None if interior."""
        d = self.dimension
        if self.offset == 0.0:
            return self.edge.a
        if self.offset == d:
            return self.edge.b
        return None


def as_metric_point(p) -> MetricPoint:
    """Lift a Site to a MetricPoint on one of its incident edges."""
    if isinstance(p, MetricPoint):
        return p
    step = p.coords[:-1] + (p.coords[-1] + 1,)
    edge = Edge(p, Site(step))
    offset = 0.0 if edge.a == p else float(p.dimension)
    return MetricPoint(edge, offset)


def neighbors(site: Site, box: BoxSpec) -> list:
    """Lattice neighbours of ``site`` clipped to the box, in a fixed order."""
    if not box.contains(site):
        raise DomainError(f"site {site.coords} outside B({box.radius})")
    out = []
    for axis in range(box.dimension):
        for step in (-1, 1):
            coords = list(site.coords)
            coords[axis] += step
            if abs(coords[axis]) <= box.radius:
                out.append(Site(tuple(coords)))
    return out


def boundary(box: BoxSpec) -> list:
    """Sites of B(N) having a lattice neighbour outside B(N)."""
    side, N, d = box.side, box.radius, box.dimension
    grid = np.indices((side,) * d).reshape(d, -1) - N
    on_shell = (np.abs(grid) == N).any(axis=0)
    return [Site(tuple(grid[:, i])) for i in np.nonzero(on_shell)[0]]


def graph_distance(p, q) -> float:
    """Metric-graph distance (graph units; each edge has length d).

    Accepts Sites or MetricPoints.  For lattice sites the distance is
    d times the L^1 coordinate distance; same-edge pairs use the offset
    difference directly, other pairs route through edge endpoints.
    """
    p = as_metric_point(p)
    q = as_metric_point(q)
    d = p.dimension
    if q.dimension != d:
        raise DomainError("dimension mismatch")

    best = np.inf
    if p.edge == q.edge:
        best = abs(p.offset - q.offset)
    p_ends = ((p.edge.a, p.offset), (p.edge.b, d - p.offset))
    q_ends = ((q.edge.a, q.offset), (q.edge.b, d - q.offset))
    for ps, pdist in p_ends:
        for qs, qdist in q_ends:
            via = pdist + d * ps.l1_distance(qs) + qdist
            best = min(best, via)
    return float(best)


# ---------------------------------------------------------------------------
# vectorized geometry shared by the samplers and estimators


@lru_cache(maxsize=32)
def coordinate_grid(d: int, radius: int):
    """Array of shape (d, n_sites) of site coordinates in row-major index order."""
    side = 2 * radius + 1
    return np.indices((side,) * d).reshape(d, -1) - radius


@lru_cache(maxsize=32)
def cheb_norms(d: int, radius: int):
    """Chebyshev norm of every site, aligned with the row-major index."""
    return np.abs(coordinate_grid(d, radius)).max(axis=0)


@lru_cache(maxsize=32)
def edge_arrays(d: int, radius: int):
    """All lattice edges of B(N) as index arrays.

    Returns (tails, heads, axes): flat site indices with heads = tails + one
    step along ``axes``.  Order is fixed (axis-major, then row-major tail),
    so serialized openness arrays are portable.
    """
    side = 2 * radius + 1
    shape = (side,) * d
    idx = np.arange(side ** d).reshape(shape)
    tails, heads, axes = [], [], []
    for axis in range(d):
        sl_lo = [slice(None)] * d
        sl_hi = [slice(None)] * d
        sl_lo[axis] = slice(0, side - 1)
        sl_hi[axis] = slice(1, side)
        t = idx[tuple(sl_lo)].ravel()
        h = idx[tuple(sl_hi)].ravel()
        tails.append(t)
        heads.append(h)
        axes.append(np.full(t.shape, axis, dtype=np.int8))
    return np.concatenate(tails), np.concatenate(heads), np.concatenate(axes)


def edge_index(box: BoxSpec, edge: Edge) -> int:
    """Position of ``edge`` in the ``edge_arrays`` ordering."""
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    ia, ib = box.index(edge.a), box.index(edge.b)
    hit = np.nonzero((tails == ia) & (heads == ib))[0]
    if hit.size == 0:
        raise DomainError("edge not inside box")
    return int(hit[0])
