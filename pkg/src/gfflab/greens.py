"""Deterministic potential theory on the box and the metric graph.

Everything here is exact linear algebra (or quadrature):

* ``free_green`` -- Green's function of the simple random walk on infinite Z^d;
* ``GreenTable`` / ``dirichlet_green`` -- Green's function in a box, with the
  walk killed on exiting the box and on an absorbing site set D (entries are
  expected visit counts);
* ``metric_green`` -- extension to interior edge points by endpoint
  interpolation plus the same-edge bridge covariance;
* ``hitting_probability`` / ``excursion_kernel`` / ``capacity`` -- harmonic
  solves on the metric network with per-edge conductance 1/(2d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.fft import dstn
from scipy.special import ive

from .errors import ConvergenceError, DomainError, NumericError, PlanningError
from .lattice import (
    BoxSpec,
    Edge,
    MetricPoint,
    Site,
    as_metric_point,
    cheb_norms,
    edge_arrays,
    graph_distance,
)

DENSE_TABLE_LIMIT = 6000          # live sites; beyond this GreenTable refuses
DIRECT_SOLVE_LIMIT = 100_000      # live sites; beyond this use CG
CG_TOL = 1e-10


# ---------------------------------------------------------------------------
# free-lattice Green's function


def free_green(d: int, x, y=None, tol: float = 1e-10) -> float:
    """Expected visits of the SRW from x to y on infinite Z^d.

    Evaluates the Fourier integral of 1/(1 - (1/d) sum cos k_i) coordinate-wise,
    which reduces to the Bessel-product representation
    G(x - y) = int_0^inf prod_i e^{-t/d} I_{|x_i - y_i|}(t/d) dt.
    """
    if d < 3:
        raise DomainError("free_green requires d >= 3")
    if tol <= 0:
        raise DomainError("tol must be positive")
    xc = np.asarray(x.coords if isinstance(x, Site) else x, dtype=int)
    if y is not None:
        yc = np.asarray(y.coords if isinstance(y, Site) else y, dtype=int)
        xc = xc - yc
    orders = np.abs(xc)

    def integrand(t):
        return float(np.prod(ive(orders, t / d)))

    # the integrand peaks near t ~ d * |x|^2; beyond T it decays like t^{-d/2}
    T = float(d * (20 + 2 * int(np.sum(orders)) ** 2))
    head, e1 = scipy.integrate.quad(integrand, 0.0, T, epsabs=tol / 4,
                                    epsrel=1e-12, limit=400)
    tail, e2 = scipy.integrate.quad(lambda u: integrand(T / u) * T / u ** 2,
                                    0.0, 1.0, epsabs=tol / 4, epsrel=1e-12,
                                    limit=400, points=[0.0])
    achieved = e1 + e2
    if achieved > tol:
        raise ConvergenceError(
            f"free_green quadrature reached {achieved:.2e} > tol {tol:.2e}",
            achieved=achieved,
        )
    return head + tail


# ---------------------------------------------------------------------------
# box Green's function (expected visits, killed on exiting the box and on D)


def _dirichlet_eigenvalues(box: BoxSpec):
    """Eigenvalues 2d - 2 sum cos(pi k_i / (2N+2)) of the killed-walk Laplacian."""
    d, n = box.dimension, box.side
    k = np.arange(1, n + 1)
    mu_axis = 2.0 * np.cos(np.pi * k / (n + 1))
    mu = np.full((n,) * d, float(2 * d))
    for axis in range(d):
        shape = [1] * d
        shape[axis] = n
        mu = mu - mu_axis.reshape(shape)
    return mu


def spectral_green_column(box: BoxSpec, y_index: int) -> np.ndarray:
    """Column G(., y) of the empty-D box Green's function via sine transforms."""
    d, n = box.dimension, box.side
    e = np.zeros((n,) * d)
    e[np.unravel_index(y_index, e.shape)] = 1.0
    mu = _dirichlet_eigenvalues(box)
    coef = dstn(e, type=1) * (2.0 * d / mu)
    # DST-I is involutive up to the factor (2(n+1))^d
    col = dstn(coef, type=1) / (2.0 * (n + 1)) ** d
    return col.ravel()


def _killed_operator(box: BoxSpec, absorbed_mask: np.ndarray) -> sp.csr_matrix:
    """I - P on live sites, walk killed on exiting the box and on absorbed sites."""
    d = box.dimension
    live = ~absorbed_mask
    n_live = int(live.sum())
    live_index = -np.ones(box.n_sites, dtype=np.int64)
    live_index[live] = np.arange(n_live)
    tails, heads, _ = edge_arrays(d, box.radius)
    keep = live[tails] & live[heads]
    r = live_index[tails[keep]]
    c = live_index[heads[keep]]
    w = np.full(r.shape, -1.0 / (2 * d))
    rows = np.concatenate([r, c, np.arange(n_live)])
    cols = np.concatenate([c, r, np.arange(n_live)])
    data = np.concatenate([w, w, np.ones(n_live)])
    return sp.csr_matrix((data, (rows, cols)), shape=(n_live, n_live))


@dataclass
class GreenTable:
    """Dense Green's matrix of a box with an absorbing set D (visit-count units)."""

    box: BoxSpec
    absorbing: frozenset
    values: np.ndarray = field(repr=False)
    live_index: np.ndarray = field(repr=False)

    def value(self, x: Site, y: Site) -> float:
        ix, iy = self.box.index(x), self.box.index(y)
        lx, ly = self.live_index[ix], self.live_index[iy]
        if lx < 0 or ly < 0:
            raise DomainError("site is absorbed")
        return float(self.values[lx, ly])

    def save(self, path):
        """Binary matrix with a JSON header (dimension, radius, absorbing, units)."""
        import json

        header = {
            "dimension": self.box.dimension,
            "radius": self.box.radius,
            "absorbing": sorted(self.absorbing),
            "units": "expected visits of the killed walk",
            "dtype": "float64",
            "shape": list(self.values.shape),
        }
        blob = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.values).tobytes())

    @staticmethod
    def load(path):
        import json

        with open(path, "rb") as fh:
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n).decode())
            box = BoxSpec(header["dimension"], header["radius"])
            values = np.frombuffer(fh.read(), dtype=np.float64)
        values = values.reshape(header["shape"])
        absorbing = frozenset(header["absorbing"])
        mask = np.zeros(box.n_sites, dtype=bool)
        mask[list(absorbing)] = True
        live_index = -np.ones(box.n_sites, dtype=np.int64)
        live_index[~mask] = np.arange((~mask).sum())
        return GreenTable(box, absorbing, values, live_index)


def _absorbed_mask(box: BoxSpec, D) -> np.ndarray:
    mask = np.zeros(box.n_sites, dtype=bool)
    for s in D:
        idx = s if isinstance(s, (int, np.integer)) else box.index(s)
        mask[idx] = True
    return mask


def green_table(box: BoxSpec, D=()) -> GreenTable:
    """Build the full Green's matrix; intended for small boxes."""
    mask = _absorbed_mask(box, D)
    n_live = int((~mask).sum())
    if n_live > DENSE_TABLE_LIMIT:
        raise PlanningError(
            f"GreenTable would hold {n_live} live sites (> {DENSE_TABLE_LIMIT}); "
            "use dirichlet_green for single entries"
        )
    A = _killed_operator(box, mask).toarray()
    values = np.linalg.inv(A)
    values = 0.5 * (values + values.T)
    live_index = -np.ones(box.n_sites, dtype=np.int64)
    live_index[~mask] = np.arange(n_live)
    absorbing = frozenset(int(i) for i in np.nonzero(mask)[0])
    return GreenTable(box, absorbing, values, live_index)


def green_column(box: BoxSpec, D, y: Site) -> np.ndarray:
    """G_D(., y) over all box sites (zeros at absorbed sites)."""
    mask = _absorbed_mask(box, D)
    iy = box.index(y)
    if mask[iy]:
        raise DomainError("y is absorbed")
    if not mask.any():
        return spectral_green_column(box, iy)
    A = _killed_operator(box, mask)
    live_index = -np.ones(box.n_sites, dtype=np.int64)
    live_index[~mask] = np.arange(A.shape[0])
    rhs = np.zeros(A.shape[0])
    rhs[live_index[iy]] = 1.0
    if A.shape[0] <= DIRECT_SOLVE_LIMIT:
        sol = spl.spsolve(A.tocsc(), rhs)
    else:
        sol, info = spl.cg(A, rhs, rtol=CG_TOL, atol=0.0, maxiter=20000)
        if info != 0:
            raise NumericError(f"CG failed to converge (info={info})")
    out = np.zeros(box.n_sites)
    out[~mask] = sol
    return out


def dirichlet_green(box: BoxSpec, D, x: Site, y: Site) -> float:
    """Green's function entry G_D(x, y) in the box (expected visits)."""
    mask = _absorbed_mask(box, D)
    if mask[box.index(x)] or mask[box.index(y)]:
        raise DomainError("x or y is absorbed")
    return float(green_column(box, D, y)[box.index(x)])


def metric_green(box: BoxSpec, D, p, q) -> float:
    """Green's function between metric points: endpoint interpolation plus,
    for same-edge pairs, the centred bridge covariance 2 s (d - t) / d."""
    p = as_metric_point(p)
    q = as_metric_point(q)
    d = box.dimension
    mask = _absorbed_mask(box, D)

    def entry(a: Site, b: Site) -> float:
        if mask[box.index(a)] or mask[box.index(b)]:
            return 0.0
        return dirichlet_green(box, D, a, b)

    px = (p.edge.a, p.edge.b)
    qx = (q.edge.a, q.edge.b)
    pw = (d - p.offset, p.offset)      # weight of endpoint j is |p - x_{3-j}| / d
    qw = (d - q.offset, q.offset)
    total = 0.0
    for j in range(2):
        for k in range(2):
            if pw[j] == 0.0 or qw[k] == 0.0:
                continue
            total += pw[j] * qw[k] * entry(px[j], qx[k])
    total /= d ** 2
    if p.edge == q.edge:
        s, t = sorted((p.offset, q.offset))
        if 0.0 < s and t < d:
            total += 2.0 * s * (d - t) / d
    return total


# ---------------------------------------------------------------------------
# metric network solves


class MetricNetwork:
    """Electrical network of a box: conductance 1/(2d) per lattice edge,
    edges split exactly at registered interior points.

    ``outer='ground'`` connects the box shell to a grounded exterior node
    through the missing half-edges (walk killed on exit); ``outer='reflect'``
    omits them.  ``restrict_edges`` keeps only the listed lattice edges
    (used for isolated-segment and star oracles).
    """

    def __init__(self, box: BoxSpec, interior_points=(), restrict_edges=None,
                 outer="ground"):
        self.box = box
        d = box.dimension
        tails, heads, _ = edge_arrays(d, box.radius)
        if restrict_edges is not None:
            wanted = {(box.index(e.a), box.index(e.b)) for e in restrict_edges}
            keep = np.array([(int(t), int(h)) in wanted
                             for t, h in zip(tails, heads)])
            tails, heads = tails[keep], heads[keep]
            self._restricted = True
        else:
            self._restricted = False

        self.n_sites = box.n_sites
        self.outer_node = None

        # group interior points by edge
        by_edge = {}
        self.point_node = {}
        for mp in interior_points:
            mp = as_metric_point(mp)
            site = mp.as_site()
            if site is not None:
                self.point_node[mp] = box.index(site)
                continue
            by_edge.setdefault(mp.edge, []).append(mp)

        base = 1.0 / (2 * d)
        if by_edge:
            split = {(box.index(e.a), box.index(e.b)) for e in by_edge}
            keep = np.array([(int(t), int(h)) not in split
                             for t, h in zip(tails, heads)])
            tails, heads = tails[keep], heads[keep]
        rows = [tails.astype(np.int64)]
        cols = [heads.astype(np.int64)]
        conds = [np.full(tails.shape, base)]

        next_node = self.n_sites
        extra_r, extra_c, extra_g = [], [], []
        for e, pts in by_edge.items():
            pts = sorted(pts, key=lambda m: m.offset)
            offs = [0.0] + [m.offset for m in pts] + [float(d)]
            if len(set(offs)) != len(offs):
                raise DomainError("duplicate interior offsets on one edge")
            chain = [box.index(e.a)]
            for m in pts:
                self.point_node[m] = next_node
                chain.append(next_node)
                next_node += 1
            chain.append(box.index(e.b))
            for (u, v, l0, l1) in zip(chain[:-1], chain[1:], offs[:-1], offs[1:]):
                extra_r.append(u)
                extra_c.append(v)
                extra_g.append(1.0 / (2.0 * (l1 - l0)))

        if outer == "ground" and not self._restricted:
            self.outer_node = next_node
            next_node += 1
            deg = np.zeros(self.n_sites)
            t_all, h_all, _ = edge_arrays(d, box.radius)
            np.add.at(deg, t_all, 1)
            np.add.at(deg, h_all, 1)
            missing = 2 * d - deg
            shell = np.nonzero(missing > 0)[0]
            extra_r.extend(int(s) for s in shell)
            extra_c.extend([self.outer_node] * shell.size)
            extra_g.extend(float(missing[s]) * base for s in shell)
        elif outer not in ("ground", "reflect"):
            raise DomainError(f"unknown outer treatment {outer!r}")

        if extra_r:
            rows.append(np.asarray(extra_r, dtype=np.int64))
            cols.append(np.asarray(extra_c, dtype=np.int64))
            conds.append(np.asarray(extra_g, dtype=float))
        self.n_nodes = next_node
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._conds = np.concatenate(conds)

        if self._restricted:
            used = np.zeros(self.n_nodes, dtype=bool)
            used[self._rows] = True
            used[self._cols] = True
            self._used = used
        else:
            self._used = np.ones(self.n_nodes, dtype=bool)

    def node(self, p) -> int:
        """Network node id of a Site or MetricPoint."""
        if isinstance(p, Site):
            return self.box.index(p)
        p = as_metric_point(p)
        site = p.as_site()
        if site is not None:
            return self.box.index(site)
        if p not in self.point_node:
            raise DomainError("metric point was not registered with the network")
        return self.point_node[p]

    def solve(self, fixed: dict) -> np.ndarray:
        """Potentials at all nodes given Dirichlet data {node: value}."""
        n = self.n_nodes
        W = sp.coo_matrix(
            (np.concatenate([self._conds, self._conds]),
             (np.concatenate([self._rows, self._cols]),
              np.concatenate([self._cols, self._rows]))),
            shape=(n, n),
        ).tocsr()
        deg = np.asarray(W.sum(axis=1)).ravel()
        L = sp.diags(deg) - W

        h = np.zeros(n)
        fixed_nodes = np.array(sorted(fixed), dtype=np.int64)
        for k in fixed_nodes:
            h[k] = fixed[int(k)]
        free = self._used.copy()
        free[fixed_nodes] = False
        # isolated nodes (restricted networks) stay at 0
        if not free.any():
            return h
        idx = np.nonzero(free)[0]
        A = L[idx][:, idx].tocsc()
        rhs = -L[idx][:, fixed_nodes] @ h[fixed_nodes]
        if idx.size <= DIRECT_SOLVE_LIMIT:
            sol = spl.spsolve(A, rhs)
        else:
            ml = None
            try:
                import pyamg

                ml = pyamg.smoothed_aggregation_solver(A.tocsr())
            except Exception:
                pass
            if ml is not None:
                sol = ml.solve(rhs, tol=CG_TOL, accel="cg")
            else:
                sol, info = spl.cg(A, rhs, rtol=CG_TOL, atol=0.0, maxiter=20000)
                if info != 0:
                    raise NumericError(f"CG failed to converge (info={info})")
        h[idx] = sol
        return h

    def current_into(self, node: int, h: np.ndarray) -> float:
        """Sum of conductance-weighted potential differences into ``node``."""
        at_r = self._rows == node
        at_c = self._cols == node
        total = np.sum(self._conds[at_r] * (h[self._cols[at_r]] - h[node]))
        total += np.sum(self._conds[at_c] * (h[self._rows[at_c]] - h[node]))
        return float(total)


def hitting_probability(box: BoxSpec, start, target, absorbing,
                        restrict_edges=None, outer="ground") -> float:
    """P(metric Brownian motion from ``start`` hits ``target`` before
    ``absorbing``), with exit from the box counted as failure when grounded."""
    target = [as_metric_point(p) for p in _as_iterable(target)]
    absorbing = [as_metric_point(p) for p in _as_iterable(absorbing)]
    start = as_metric_point(start)
    t_keys = {_point_key(p) for p in target}
    a_keys = {_point_key(p) for p in absorbing}
    if t_keys & a_keys:
        raise DomainError("target and absorbing sets intersect")
    if _point_key(start) in t_keys | a_keys:
        raise DomainError("start lies in target or absorbing set")

    net = MetricNetwork(box, interior_points=[start] + target + absorbing,
                        restrict_edges=restrict_edges, outer=outer)
    fixed = {}
    for p in target:
        fixed[net.node(p)] = 1.0
    for p in absorbing:
        fixed[net.node(p)] = 0.0
    if net.outer_node is not None:
        fixed.setdefault(net.outer_node, 0.0)
    h = net.solve(fixed)
    return float(h[net.node(start)])


def _as_iterable(x):
    if isinstance(x, (Site, MetricPoint)):
        return [x]
    return list(x)


def _point_key(p: MetricPoint):
    site = p.as_site()
    if site is not None:
        return ("site", site.coords)
    return ("edge", p.edge.a.coords, p.edge.b.coords, p.offset)


@dataclass
class KernelValue:
    value: float
    truncation_radius: int
    error_bound: float


def excursion_kernel(box: BoxSpec, D, v, w, outer="ground",
                     restrict_edges=None, error_check=True,
                     max_error=None) -> KernelValue:
    """Effective conductance between v and w in the metric network with D
    grounded (boundary excursion kernel K_{D u {v,w}}(v, w))."""
    v = as_metric_point(v)
    w = as_metric_point(w)
    if _point_key(v) == _point_key(w):
        raise DomainError("v and w must differ")

    def compute(b: BoxSpec) -> float:
        net = MetricNetwork(b, interior_points=[v, w],
                            restrict_edges=restrict_edges, outer=outer)
        fixed = {net.node(w): 1.0, net.node(v): 0.0}
        for s in D:
            fixed[b.index(s) if isinstance(s, Site) else int(s)] = 0.0
        if net.outer_node is not None:
            fixed.setdefault(net.outer_node, 0.0)
        h = net.solve(fixed)
        return net.current_into(net.node(v), h)

    value = compute(box)
    err = 0.0
    if error_check and restrict_edges is None and box.radius >= 4:
        smaller = BoxSpec(box.dimension, max(2, (3 * box.radius) // 4))
        try:
            err = abs(value - compute(smaller))
        except DomainError:
            err = float("nan")
    if max_error is not None and not err <= max_error:
        raise ConvergenceError(
            f"kernel truncation error {err:.3e} exceeds {max_error:.3e}",
            achieved=err,
        )
    return KernelValue(value=float(value), truncation_radius=box.radius,
                       error_bound=float(err))


@dataclass
class EquilibriumMeasure:
    support: list
    weights: np.ndarray
    total: float
    truncation_radius: int
    error_bound: float


def capacity(box: BoxSpec, D) -> EquilibriumMeasure:
    """Equilibrium measure and capacity of a site set D, computed as escape
    currents to the grounded exterior of the box."""
    sites = [s if isinstance(s, Site) else box.site(int(s)) for s in D]
    if not sites:
        raise DomainError("D must be nonempty")
    maxn = max(s.cheb_norm() for s in sites)
    if maxn >= box.radius:
        raise DomainError("D touches the box shell; use a larger box")

    def compute(b: BoxSpec):
        net = MetricNetwork(b, outer="ground")
        fixed = {b.index(s): 1.0 for s in sites}
        fixed[net.outer_node] = 0.0
        h = net.solve(fixed)
        d = b.dimension
        base = 1.0 / (2 * d)
        in_D = np.zeros(b.n_sites, dtype=bool)
        in_D[[b.index(s) for s in sites]] = True
        tails, heads, _ = edge_arrays(d, b.radius)
        out = np.zeros(b.n_sites)
        sel = in_D[tails] & ~in_D[heads]
        np.add.at(out, tails[sel], base * (1.0 - h[heads[sel]]))
        sel = in_D[heads] & ~in_D[tails]
        np.add.at(out, heads[sel], base * (1.0 - h[tails[sel]]))
        support = [s for s in sites if out[b.index(s)] > 0.0]
        weights = np.asarray([out[b.index(s)] for s in support])
        return support, weights

    support, weights = compute(box)
    total = float(weights.sum())
    err = float("nan")
    smaller_r = (box.radius + maxn) // 2
    if smaller_r > maxn and smaller_r < box.radius:
        _, w2 = compute(BoxSpec(box.dimension, smaller_r))
        err = abs(total - float(w2.sum()))
    return EquilibriumMeasure(support=support, weights=weights, total=total,
                              truncation_radius=box.radius, error_bound=err)
