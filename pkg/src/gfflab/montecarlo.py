"""Experiment drivers, streaming estimators, and formula-verification suites.

Replicas are drawn in chunks; each replica owns deterministic RNG streams
keyed by (seed_base, experiment id, replica, purpose), so results do not
depend on chunking or thread count.  Connectivity for a whole chunk is
resolved with one union-find pass over a block-diagonal open-edge graph.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.stats
from scipy.sparse.csgraph import connected_components

from . import rng as rngmod
from .errors import DomainError, InsufficiencyError, PlanningError
from .gff import (
    bridge_moments,
    conditional_mean_operator,
    conditioned_field_batch,
    open_edges_batch,
    sample_field_batch,
)
from .greens import capacity, excursion_kernel, green_table
from .lattice import (
    BoxSpec,
    Edge,
    Site,
    cheb_norms,
    coordinate_grid,
    edge_arrays,
    edge_index,
    origin,
)

CHUNK_NODE_BUDGET = 2_000_000
MEMORY_BUDGET_SITES = 40_000_000   # hard per-replica planning cap


# ---------------------------------------------------------------------------
# estimator records and small-count inference


def wald_se(successes: int, trials: int) -> float:
    if trials == 0:
        return float("nan")
    p = successes / trials
    return math.sqrt(max(p * (1.0 - p), 0.0) / trials)


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """Wilson score interval; used below 50 successes where Wald degenerates."""
    if trials == 0:
        return (float("nan"), float("nan"))
    p = successes / trials
    denom = 1.0 + z ** 2 / trials
    center = (p + z ** 2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z ** 2 / (4 * trials ** 2)) / denom
    return (center - half, center + half)


def proportion_se(successes: int, trials: int) -> float:
    """Wald SE with a Wilson-width fallback for small counts."""
    if trials == 0:
        return float("nan")
    if successes >= 50 and trials - successes >= 50:
        return wald_se(successes, trials)
    lo, hi = wilson_interval(successes, trials)
    return (hi - lo) / (2 * 1.959963984540054)


@dataclass
class EstimateRecord:
    experiment_id: str
    kind: str
    params: dict
    trials: int
    successes: int
    estimate: float
    stderr: float
    seed_base: int
    wall_time: float
    payload: dict = field(default_factory=dict)

    @staticmethod
    def from_counts(experiment_id, kind, params, trials, successes, seed_base,
                    wall_time, payload=None):
        est = successes / trials if trials > 0 else float("nan")
        return EstimateRecord(
            experiment_id=experiment_id, kind=kind, params=dict(params),
            trials=int(trials), successes=int(successes), estimate=est,
            stderr=proportion_se(successes, trials), seed_base=seed_base,
            wall_time=wall_time, payload=payload or {},
        )

    def to_json(self) -> str:
        # wall time is deliberately excluded so resumed runs reproduce an
        # uninterrupted run byte for byte
        return json.dumps({
            "experiment_id": self.experiment_id, "kind": self.kind,
            "params": self.params, "trials": self.trials,
            "successes": self.successes, "estimate": self.estimate,
            "stderr": self.stderr, "seed_base": self.seed_base,
            "payload": self.payload,
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "EstimateRecord":
        obj = json.loads(line)
        obj.setdefault("wall_time", 0.0)
        return EstimateRecord(**obj)


# ---------------------------------------------------------------------------
# exponent fits


@dataclass
class ExponentFit:
    abscissa: list
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    residuals: list
    excluded: list = field(default_factory=list)


def _wls_loglog(x, y, sigma_log):
    lx, ly = np.log(x), np.log(y)
    w = 1.0 / np.maximum(sigma_log, 1e-15) ** 2
    W = np.sum(w)
    mx, my = np.sum(w * lx) / W, np.sum(w * ly) / W
    sxx = np.sum(w * (lx - mx) ** 2)
    slope = np.sum(w * (lx - mx) * (ly - my)) / sxx
    intercept = my - slope * mx
    resid = ly - (intercept + slope * lx)
    return slope, intercept, resid


def fit_exponent(points, n_boot: int = 1000, boot_seed: int = 12345) -> ExponentFit:
    """Weighted log-log fit of event probabilities against a scale.

    ``points`` is a list of (scale, successes, trials).  Zero-success scales
    are excluded with a note; fewer than 3 usable scales is an error.
    Bootstrap resamples the per-scale counts (1000 resamples, fixed seed).
    """
    usable, excluded = [], []
    for scale, succ, trials in points:
        if succ <= 0 or trials <= 0:
            excluded.append(scale)
        else:
            usable.append((float(scale), int(succ), int(trials)))
    if len(usable) < 3:
        raise InsufficiencyError(
            f"need >= 3 scales with successes, got {len(usable)}",
            achieved_counts={s: c for s, c, _ in usable},
        )
    x = np.array([s for s, _, _ in usable])
    succ = np.array([c for _, c, _ in usable], dtype=float)
    trials = np.array([t for _, _, t in usable], dtype=float)
    p = succ / trials
    sigma_log = np.array([proportion_se(int(c), int(t)) for c, t in zip(succ, trials)]) / p
    slope, intercept, resid = _wls_loglog(x, p, sigma_log)

    rng = np.random.default_rng(boot_seed)
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        sb = rng.binomial(trials.astype(int), p) / trials
        ok = sb > 0
        if ok.sum() < 3:
            slopes[b] = np.nan
            continue
        slopes[b], _, _ = _wls_loglog(x[ok], sb[ok], sigma_log[ok])
    lo, hi = np.nanpercentile(slopes, [2.5, 97.5])
    return ExponentFit(abscissa=list(x), slope=float(slope),
                       intercept=float(intercept), ci_low=float(lo),
                       ci_high=float(hi), residuals=list(resid),
                       excluded=excluded)


def fit_value_exponent(points, n_boot: int = 1000, boot_seed: int = 12345) -> ExponentFit:
    """Log-log fit of per-scale medians; ``points`` = (scale, samples array)."""
    usable = [(float(s), np.asarray(v, dtype=float)) for s, v in points
              if len(v) > 0 and np.median(v) > 0]
    if len(usable) < 3:
        raise InsufficiencyError(f"need >= 3 usable scales, got {len(usable)}")
    x = np.array([s for s, _ in usable])
    med = np.array([np.median(v) for _, v in usable])
    rng = np.random.default_rng(boot_seed)
    boot_meds = np.empty((n_boot, len(usable)))
    for j, (_, v) in enumerate(usable):
        idx = rng.integers(0, len(v), size=(n_boot, len(v)))
        boot_meds[:, j] = np.median(v[idx], axis=1)
    sigma_log = np.maximum(np.std(np.log(np.maximum(boot_meds, 1e-12)), axis=0), 1e-6)
    slope, intercept, resid = _wls_loglog(x, med, sigma_log)
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        mb = np.maximum(boot_meds[b], 1e-12)
        slopes[b], _, _ = _wls_loglog(x, mb, sigma_log)
    lo, hi = np.nanpercentile(slopes, [2.5, 97.5])
    return ExponentFit(abscissa=list(x), slope=float(slope),
                       intercept=float(intercept), ci_low=float(lo),
                       ci_high=float(hi), residuals=list(resid))


def predicted_exponent(low, high, d: int) -> float:
    """The dimension switch: ``low`` for d <= 6, ``high`` for d > 6."""
    return low if d <= 6 else high


# ---------------------------------------------------------------------------
# batched replica engine


def chunk_size_for(box: BoxSpec, requested: int = None) -> int:
    if box.n_sites > MEMORY_BUDGET_SITES:
        raise PlanningError(
            f"box with {box.n_sites} sites exceeds the planning budget")
    size = max(1, CHUNK_NODE_BUDGET // box.n_sites)
    if requested is not None:
        size = min(size, requested)
    return size


def iter_chunks(box: BoxSpec, seed_base: int, experiment_id: str, trials: int,
                start: int = 0, chunk: int = None, threads: int = 1):
    """Yield (replica_ids, values, open_plus, open_minus) in fixed order.

    With ``threads > 1`` chunks are produced by a pool but still yielded in
    order, so any merge over chunks is deterministic.
    """
    chunk = chunk_size_for(box, chunk)

    def produce(c0):
        ids = list(range(c0, min(c0 + chunk, start + trials)))
        f_rngs = [rngmod.stream(seed_base, experiment_id, i, rngmod.PURPOSE_FIELD)
                  for i in ids]
        values = sample_field_batch(box, f_rngs)
        e_rngs = [rngmod.stream(seed_base, experiment_id, i, rngmod.PURPOSE_EDGES)
                  for i in ids]
        plus, minus = open_edges_batch(box, values, e_rngs)
        return ids, values, plus, minus

    starts = list(range(start, start + trials, chunk))
    if threads <= 1:
        for c0 in starts:
            yield produce(c0)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # keep a bounded window of in-flight chunks, yield in order
            window = 2 * threads
            futures = {}
            i = 0
            for j in range(min(window, len(starts))):
                futures[j] = pool.submit(produce, starts[j])
            nxt = min(window, len(starts))
            while i < len(starts):
                yield futures.pop(i).result()
                if nxt < len(starts):
                    futures[nxt] = pool.submit(produce, starts[nxt])
                    nxt += 1
                i += 1


def batch_components(box: BoxSpec, site_mask: np.ndarray, open_mask: np.ndarray):
    """Union-find over a whole chunk at once.

    ``site_mask``/``open_mask`` have shape (B, n_sites) / (B, n_edges).
    Returns (labels of shape (B, n_sites), n_components); labels are global
    across the chunk (blocks are disconnected).
    """
    B, S = site_mask.shape
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    keep = open_mask & site_mask[:, tails] & site_mask[:, heads]
    rep, eidx = np.nonzero(keep)
    r = rep * S + tails[eidx]
    c = rep * S + heads[eidx]
    graph = sp.coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)),
                          shape=(B * S, B * S))
    n, labels = connected_components(graph, directed=False)
    return labels.reshape(B, S), n


def component_norm_range(labels: np.ndarray, site_mask: np.ndarray,
                         norms: np.ndarray, n_comp: int):
    """Per-component (max, min) Chebyshev norms over in-sign sites."""
    rows, sites = np.nonzero(site_mask)
    flat = labels[rows, sites]
    nvals = norms[sites]
    maxn = np.full(n_comp, -1)
    minn = np.full(n_comp, norms.max() + 1)
    np.maximum.at(maxn, flat, nvals)
    np.minimum.at(minn, flat, nvals)
    comp_rep = np.zeros(n_comp, dtype=np.int64)
    comp_rep[flat] = rows
    return maxn, minn, comp_rep


def arm_radius(labels, site_mask, maxn, site_index):
    """Shell-reach radius of the cluster containing ``site_index`` (-1 if none)."""
    lab = labels[:, site_index]
    ok = site_mask[:, site_index]
    return np.where(ok, maxn[lab], -1)


# ---------------------------------------------------------------------------
# experiment drivers


def _experiment_point_id(kind: str, params: dict) -> str:
    keys = sorted(params)
    return kind + "/" + "/".join(f"{k}={params[k]}" for k in keys)


def run_one_arm_point(d, N, R, trials, seed_base, threads=1,
                      progress=None) -> list:
    """One-arm counts for both signs at scale N in a box of radius R*N."""
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R}
    exp_id = _experiment_point_id("one-arm", params)
    norms = cheb_norms(d, box.radius)
    i0 = box.index(origin(d))
    count_plus = count_minus = 0
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        for sign, op in (("+", plus), ("-", minus)):
            mask = values > 0 if sign == "+" else values < 0
            labels, n = batch_components(box, mask, op)
            maxn, _, _ = component_norm_range(labels, mask, norms, n)
            radius = arm_radius(labels, mask, maxn, i0)
            hits = int(np.count_nonzero(radius >= N))
            if sign == "+":
                count_plus += hits
            else:
                count_minus += hits
        if progress:
            progress(len(ids))
    wall = time.time() - t0
    recs = []
    for sign, cnt in (("+", count_plus), ("-", count_minus)):
        p = dict(params, sign=sign)
        recs.append(EstimateRecord.from_counts(exp_id, "one-arm", p, trials,
                                               cnt, seed_base, wall))
    return recs


def run_crossing_point(d, N, n_list, R, trials, seed_base, threads=1) -> list:
    """Crossing counts B(n) <-> shell of B(N) for every n, shared replicas."""
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R, "n_list": list(n_list)}
    exp_id = _experiment_point_id("crossing", {"d": d, "N": N, "R": R})
    norms = cheb_norms(d, box.radius)
    counts = {n: 0 for n in n_list}
    t0 = time.time()
    for ids, values, plus, _ in iter_chunks(box, seed_base, exp_id, trials,
                                            threads=threads):
        mask = values > 0
        labels, nc = batch_components(box, mask, plus)
        maxn, minn, comp_rep = component_norm_range(labels, mask, norms, nc)
        B = len(ids)
        for n in n_list:
            sel = (minn <= n) & (maxn >= N)
            ev = np.zeros(B, dtype=bool)
            ev[comp_rep[sel]] = True
            counts[n] += int(np.count_nonzero(ev))
    wall = time.time() - t0
    return [
        EstimateRecord.from_counts(exp_id, "crossing",
                                   {"d": d, "N": N, "R": R, "n": n},
                                   trials, counts[n], seed_base, wall)
        for n in n_list
    ]


def _site_at(d, coords) -> Site:
    return Site(tuple(coords) + (0,) * (d - len(coords)))


def run_two_arm_point(d, N, R, trials, seed_base, separation=1, threads=1,
                      collect_volumes=None, volume_center_minus=None) -> list:
    """Heterochromatic two-arm event for lattice points v, v' at the given
    coordinate separation along the first axis.

    When ``collect_volumes`` (an M grid) is set, conditioned cluster volumes
    around v (plus) and v' (minus) are accumulated into the record payload.
    """
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R, "sep": separation}
    exp_id = _experiment_point_id("two-arm", params)
    norms = cheb_norms(d, box.radius)
    v = origin(d)
    vp = _site_at(d, (separation,))
    iv, ivp = box.index(v), box.index(vp)
    count = 0
    volumes = {M: {"plus": [], "minus": []} for M in (collect_volumes or ())}
    coords = coordinate_grid(d, box.radius)
    windows = {}
    for M in (collect_volumes or ()):
        wv = np.abs(coords - np.asarray(v.coords)[:, None]).max(axis=0) <= M
        wvp = np.abs(coords - np.asarray(vp.coords)[:, None]).max(axis=0) <= M
        windows[M] = (np.nonzero(wv)[0], np.nonzero(wvp)[0])
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, npc = batch_components(box, pm, plus)
        lm, nmc = batch_components(box, mm, minus)
        maxp, _, _ = component_norm_range(lp, pm, norms, npc)
        maxm, _, _ = component_norm_range(lm, mm, norms, nmc)
        arm_p = arm_radius(lp, pm, maxp, iv) >= N
        arm_m = arm_radius(lm, mm, maxm, ivp) >= N
        hit = arm_p & arm_m
        count += int(np.count_nonzero(hit))
        if collect_volumes and hit.any():
            hit_rows = np.nonzero(hit)[0]
            for M, (win_v, win_vp) in windows.items():
                sub_p = lp[np.ix_(hit_rows, win_v)]
                in_p = pm[np.ix_(hit_rows, win_v)]
                lab_v = lp[hit_rows, iv][:, None]
                volumes[M]["plus"].extend(
                    ((sub_p == lab_v) & in_p).sum(axis=1).tolist())
                sub_m = lm[np.ix_(hit_rows, win_vp)]
                in_m = mm[np.ix_(hit_rows, win_vp)]
                lab_vp = lm[hit_rows, ivp][:, None]
                volumes[M]["minus"].extend(
                    ((sub_m == lab_vp) & in_m).sum(axis=1).tolist())
    wall = time.time() - t0
    payload = {}
    if collect_volumes:
        payload["volumes"] = {
            str(M): {s: volumes[M][s] for s in ("plus", "minus")}
            for M in collect_volumes
        }
    return [EstimateRecord.from_counts(exp_id, "two-arm", params, trials,
                                       count, seed_base, wall, payload)]


def run_two_arm_interior_point(d, N, chi, R, trials, seed_base, threads=1) -> list:
    """Two-arm event for interior edge points at graph distance chi <= 1,
    placed symmetrically on the edge from the origin along the first axis."""
    if not 0 < chi <= d:
        raise DomainError("chi must lie in (0, d]")
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R, "chi": chi}
    exp_id = _experiment_point_id("two-arm-interior", params)
    norms = cheb_norms(d, box.radius)
    a = origin(d)
    b = _site_at(d, (1,))
    edge = Edge(a, b)
    ie = edge_index(box, edge)
    ia, ib = box.index(a), box.index(b)
    offs = np.array([(d - chi) / 2.0, (d + chi) / 2.0])
    w_b, cov = bridge_moments(offs, d)
    chol = np.linalg.cholesky(cov)
    lengths = np.array([offs[0], chi, d - offs[1]])
    count = 0
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        B = len(ids)
        z = np.empty((B, 2))
        u = np.empty((B, 3))
        for k, rid in enumerate(ids):
            g = rngmod.stream(seed_base, exp_id, rid, rngmod.PURPOSE_INTERIOR)
            z[k] = g.standard_normal(2)
            u[k] = g.random(3)
        va, vb = values[:, ia], values[:, ib]
        mean = va[:, None] * (1 - w_b)[None, :] + vb[:, None] * w_b[None, :]
        pts = mean + z @ chol.T
        chain = np.column_stack([va, pts, vb])     # (B, 4)
        s, t = chain[:, :-1], chain[:, 1:]
        p_open = -np.expm1(-np.abs(s * t) / lengths[None, :])
        seg_open = u < p_open
        seg_p = seg_open & (s > 0) & (t > 0)
        seg_m = seg_open & (s < 0) & (t < 0)
        plus = plus.copy()
        minus = minus.copy()
        plus[:, ie] = seg_p.all(axis=1)
        minus[:, ie] = seg_m.all(axis=1)

        pm = values > 0
        mm = values < 0
        lp, npc = batch_components(box, pm, plus)
        lm, nmc = batch_components(box, mm, minus)
        maxp, _, _ = component_norm_range(lp, pm, norms, npc)
        maxm, _, _ = component_norm_range(lm, mm, norms, nmc)
        arm_site_p = {i: arm_radius(lp, pm, maxp, i) >= N for i in (ia, ib)}
        arm_site_m = {i: arm_radius(lm, mm, maxm, i) >= N for i in (ia, ib)}
        v_val, vp_val = pts[:, 0], pts[:, 1]
        # v reaches the shell in the plus field through either edge end
        v_plus = (v_val > 0) & (
            (seg_p[:, 0] & arm_site_p[ia])
            | (seg_p[:, 1] & seg_p[:, 2] & arm_site_p[ib])
        )
        vp_minus = (vp_val < 0) & (
            (seg_m[:, 2] & arm_site_m[ib])
            | (seg_m[:, 1] & seg_m[:, 0] & arm_site_m[ia])
        )
        count += int(np.count_nonzero(v_plus & vp_minus))
    wall = time.time() - t0
    return [EstimateRecord.from_counts(exp_id, "two-arm-interior", params,
                                       trials, count, seed_base, wall)]


def run_touching_point(d, N, R, trials, seed_base, threads=1) -> list:
    """Mean count of interface edges inside B(N) between two opposite-sign
    clusters of bounding-box diameter >= N."""
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R}
    exp_id = _experiment_point_id("touching", params)
    tails, heads, _ = edge_arrays(d, box.radius)
    norms = cheb_norms(d, box.radius)
    inside = (norms[tails] <= N) & (norms[heads] <= N)
    coords = coordinate_grid(d, box.radius)
    total = 0
    total_sq = 0
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, npc = batch_components(box, pm, plus)
        lm, nmc = batch_components(box, mm, minus)
        diam_p = _component_diameters(lp, pm, coords, npc)
        diam_m = _component_diameters(lm, mm, coords, nmc)
        B = len(ids)
        per = np.zeros(B, dtype=np.int64)
        for la, lb, da, db in ((lp, lm, diam_p, diam_m),
                               (lm, lp, diam_m, diam_p)):
            lt = la[:, tails]
            lh = lb[:, heads]
            sel = inside[None, :] & (lt >= 0) & (lh >= 0)
            ok = sel & (da[lt] >= N) & (db[lh] >= N)
            per += ok.sum(axis=1)
        total += int(per.sum())
        total_sq += int((per.astype(np.int64) ** 2).sum())
    wall = time.time() - t0
    mean = total / trials
    var = total_sq / trials - mean ** 2
    rec = EstimateRecord(
        experiment_id=exp_id, kind="touching", params=params, trials=trials,
        successes=total, estimate=mean,
        stderr=math.sqrt(max(var, 0.0) / trials), seed_base=seed_base,
        wall_time=wall, payload={},
    )
    return [rec]


def _component_diameters(labels, site_mask, coords, n_comp):
    rows, sites = np.nonzero(site_mask)
    flat = labels[rows, sites]
    d = coords.shape[0]
    out = np.zeros(n_comp, dtype=np.int64)
    for axis in range(d):
        mx = np.full(n_comp, np.iinfo(np.int64).min)
        mn = np.full(n_comp, np.iinfo(np.int64).max)
        np.maximum.at(mx, flat, coords[axis, sites])
        np.minimum.at(mn, flat, coords[axis, sites])
        np.maximum(out, mx - mn, out)
    # wrong-sign singleton components never appear in ``flat`` lookups we use
    return np.where(out < 0, 0, out)


def run_four_point(d, N, R, trials, seed_base, threads=1) -> list:
    """Heterochromatic four-point event: v<->w in plus and v'<->w' in minus,
    with v, v' adjacent at the centre and w, w' on opposite shell faces."""
    box = BoxSpec(d, R * N)
    params = {"d": d, "N": N, "R": R}
    exp_id = _experiment_point_id("four-point", params)
    v = origin(d)
    vp = _site_at(d, (1,))
    w = _site_at(d, (N,))
    wp = _site_at(d, (1 - N,))
    idx = [box.index(s) for s in (v, vp, w, wp)]
    count = 0
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, _ = batch_components(box, pm, plus)
        lm, _ = batch_components(box, mm, minus)
        ev = (pm[:, idx[0]] & pm[:, idx[2]] & (lp[:, idx[0]] == lp[:, idx[2]])
              & mm[:, idx[1]] & mm[:, idx[3]] & (lm[:, idx[1]] == lm[:, idx[3]]))
        count += int(np.count_nonzero(ev))
    wall = time.time() - t0
    return [EstimateRecord.from_counts(exp_id, "four-point", params, trials,
                                       count, seed_base, wall)]


def run_capacity_tail(d, box_radius, T_grid, trials, seed_base, threads=1,
                      clip_radius=None) -> list:
    """Tail P(cap of the origin's sign cluster >= T) over a T grid.

    Clusters are clipped to B(clip_radius) (default box_radius // 2) before
    the capacity solve so the grounded shell stays well separated.
    """
    box = BoxSpec(d, box_radius)
    clip = clip_radius or box_radius // 2
    params = {"d": d, "box_radius": box_radius, "clip": clip}
    exp_id = _experiment_point_id("captail", params)
    i0 = box.index(origin(d))
    coords = coordinate_grid(d, box.radius)
    inside_clip = np.abs(coords).max(axis=0) <= clip
    caps = []
    t0 = time.time()
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        sign_plus = values[:, i0] > 0
        for k in range(len(ids)):
            op = plus[k] if sign_plus[k] else minus[k]
            mask = values[k] > 0 if sign_plus[k] else values[k] < 0
            labels, _ = batch_components(box, mask[None, :], op[None, :])
            member = np.nonzero((labels[0] == labels[0, i0]) & inside_clip)[0]
            sites = [box.site(int(i)) for i in member]
            caps.append(capacity(box, sites).total)
    wall = time.time() - t0
    caps = np.asarray(caps)
    recs = []
    for T in T_grid:
        succ = int(np.count_nonzero(caps >= T))
        recs.append(EstimateRecord.from_counts(
            exp_id, "captail", dict(params, T=float(T)), trials, succ,
            seed_base, wall, payload={}))
    return recs


def run_separation_probe(d, n, N, R, delta_grid, trials, seed_base,
                         threads=1) -> dict:
    """Exploratory separation estimate: P(extremity event | coexistence).

    Coexistence: v1 <->+ w1 and v2 <->- w2 for fixed well-separated points.
    The extremity event follows the separation-event template (cluster of v_i
    enters the small neighbourhoods of the other pair, the centre box, or the
    far exterior region).
    """
    box = BoxSpec(d, R * N)
    v1 = _site_at(d, (2 * n,))
    v2 = _site_at(d, (-2 * n,))
    w1 = _site_at(d, (2 * N,))
    w2 = _site_at(d, (-2 * N,))
    exp_id = _experiment_point_id("separation", {"d": d, "n": n, "N": N, "R": R})
    norms = cheb_norms(d, box.radius)
    coords = coordinate_grid(d, box.radius)
    idx = {p: box.index(p) for p in (v1, v2, w1, w2)}

    def region_sites(delta):
        reg = {}
        for i, (vo, wo) in enumerate(((v2, w2), (v1, w1)), start=1):
            near_v = np.abs(coords - np.asarray(vo.coords)[:, None]).max(axis=0) <= max(delta * n, 0)
            near_w = np.abs(coords - np.asarray(wo.coords)[:, None]).max(axis=0) <= max(delta * N, 0)
            center = norms <= max(delta * n, 0)
            far = norms >= min(box.radius, N / max(delta, 1e-9))
            reg[i] = np.nonzero(near_v | near_w | center | far)[0] if delta > 0 else np.zeros(0, dtype=int)
        return reg

    regions = {delta: region_sites(delta) for delta in delta_grid}
    coexist = 0
    sep_counts = {delta: 0 for delta in delta_grid}
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, npc = batch_components(box, pm, plus)
        lm, nmc = batch_components(box, mm, minus)
        con1 = pm[:, idx[v1]] & pm[:, idx[w1]] & (lp[:, idx[v1]] == lp[:, idx[w1]])
        con2 = mm[:, idx[v2]] & mm[:, idx[w2]] & (lm[:, idx[v2]] == lm[:, idx[w2]])
        co = con1 & con2
        coexist += int(np.count_nonzero(co))
        if not co.any():
            continue
        rows = np.nonzero(co)[0]
        for delta in delta_grid:
            reg = regions[delta]
            hit = np.zeros(rows.size, dtype=bool)
            for i, (lab, mask, p) in enumerate(((lp, pm, v1), (lm, mm, v2)), start=1):
                sites = reg[i]
                if sites.size == 0:
                    continue
                lab_v = lab[rows, idx[p]][:, None]
                touch = ((lab[np.ix_(rows, sites)] == lab_v)
                         & mask[np.ix_(rows, sites)]).any(axis=1)
                hit |= touch
            sep_counts[delta] += int(np.count_nonzero(hit))
    return {
        "coexist": coexist,
        "trials": trials,
        "conditional": {
            str(delta): (sep_counts[delta] / coexist if coexist else float("nan"))
            for delta in delta_grid
        },
    }


def run_rigidity_probe(d, N, M, T_grid, R, trials, seed_base, threads=1) -> dict:
    """Exploratory rigidity ratio: P(V+_v(M) >= T | two-arm) / P(. | one-arm)."""
    box = BoxSpec(d, R * N)
    exp_id = _experiment_point_id("rigidity", {"d": d, "N": N, "M": M, "R": R})
    norms = cheb_norms(d, box.radius)
    v = origin(d)
    vp = _site_at(d, (1,))
    iv, ivp = box.index(v), box.index(vp)
    coords = coordinate_grid(d, box.radius)
    win = np.nonzero(np.abs(coords).max(axis=0) <= M)[0]
    vols_one, vols_two = [], []
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, npc = batch_components(box, pm, plus)
        lm, nmc = batch_components(box, mm, minus)
        maxp, _, _ = component_norm_range(lp, pm, norms, npc)
        maxm, _, _ = component_norm_range(lm, mm, norms, nmc)
        one = arm_radius(lp, pm, maxp, iv) >= N
        two = one & (arm_radius(lm, mm, maxm, ivp) >= N)
        for sel, sink in ((one, vols_one), (two, vols_two)):
            rows = np.nonzero(sel)[0]
            if rows.size == 0:
                continue
            lab_v = lp[rows, iv][:, None]
            vols = ((lp[np.ix_(rows, win)] == lab_v)
                    & pm[np.ix_(rows, win)]).sum(axis=1)
            sink.extend(vols.tolist())
    vols_one = np.asarray(vols_one)
    vols_two = np.asarray(vols_two)
    out = {"one_arm_count": int(vols_one.size), "two_arm_count": int(vols_two.size),
           "ratios": {}}
    for T in T_grid:
        p1 = float(np.mean(vols_one >= T)) if vols_one.size else float("nan")
        p2 = float(np.mean(vols_two >= T)) if vols_two.size else float("nan")
        out["ratios"][str(T)] = {
            "p_given_one_arm": p1, "p_given_two_arm": p2,
            "ratio": p2 / p1 if p1 and not math.isnan(p1) else float("nan"),
        }
    return out


# ---------------------------------------------------------------------------
# closed-form verification suites


def verify_arcsin(box: BoxSpec, pairs, trials, seed_base=0, threads=1) -> dict:
    """Empirical P(v <->+ w) against the exact arcsine two-point formula."""
    table = green_table(box)
    pairs = [(v, w) for v, w in pairs]
    for v, w in pairs:
        if v == w:
            raise DomainError("pairs must be distinct sites")
    exp_id = f"verify-arcsin/d={box.dimension}/radius={box.radius}"
    idx = [(box.index(v), box.index(w)) for v, w in pairs]
    counts = np.zeros(len(pairs), dtype=np.int64)
    for ids, values, plus, _ in iter_chunks(box, seed_base, exp_id, trials,
                                            threads=threads):
        pm = values > 0
        labels, _ = batch_components(box, pm, plus)
        for j, (i1, i2) in enumerate(idx):
            ev = pm[:, i1] & pm[:, i2] & (labels[:, i1] == labels[:, i2])
            counts[j] += int(np.count_nonzero(ev))
    rows = []
    worst = 0.0
    for j, (v, w) in enumerate(pairs):
        g_vw = table.value(v, w)
        g_vv = table.value(v, v)
        g_ww = table.value(w, w)
        target = math.asin(g_vw / math.sqrt(g_vv * g_ww)) / math.pi
        freq = counts[j] / trials
        se = max(proportion_se(int(counts[j]), trials), 1e-12)
        z = abs(freq - target) / se
        worst = max(worst, z)
        rows.append({"v": v.coords, "w": w.coords, "empirical": freq,
                     "target": target, "se": se, "z": z})
    return {"rows": rows, "max_z": worst, "pass": worst <= 4.0,
            "trials": trials}


def verify_conditional(box: BoxSpec, v: Site, w: Site, grid, trials,
                       seed_base=0, threads=1) -> dict:
    """Conditional two-point formula 1 - exp(-2ab K) under pinned values."""
    if v == w:
        raise DomainError("v and w must differ")
    kv = excursion_kernel(box, [], v, w, outer="ground", error_check=False)
    operator = conditional_mean_operator(box, [v, w])
    iv, iw = box.index(v), box.index(w)
    rows = []
    worst = 0.0
    for (a, b) in grid:
        exp_id = (f"verify-conditional/d={box.dimension}/radius={box.radius}"
                  f"/a={a}/b={b}")
        count = 0
        for ids, values, _, _ in iter_chunks(box, seed_base, exp_id, trials,
                                             threads=threads):
            values = conditioned_field_batch(box, operator, [a, b], values)
            e_rngs = [rngmod.stream(seed_base, exp_id + "/cond-edges", i,
                                    rngmod.PURPOSE_EDGES) for i in ids]
            plus, _ = open_edges_batch(box, values, e_rngs)
            pm = values > 0
            labels, _ = batch_components(box, pm, plus)
            ev = pm[:, iv] & pm[:, iw] & (labels[:, iv] == labels[:, iw])
            count += int(np.count_nonzero(ev))
        target = -math.expm1(-2.0 * a * b * kv.value)
        freq = count / trials
        se = max(proportion_se(count, trials), 1e-12)
        z = abs(freq - target) / se
        worst = max(worst, z)
        rows.append({"a": a, "b": b, "empirical": freq, "target": target,
                     "se": se, "z": z})
    return {"rows": rows, "kernel": kv.value, "max_z": worst,
            "pass": worst <= 4.0, "trials": trials}


def joint_connection_density(a, b, g_vv, g_ww, g_vw, kernel):
    """Density of (phi_v^2/2, phi_w^2/2) on the unsigned connection event."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    delta = g_vw / math.sqrt(g_vv * g_ww)
    s, t = np.sqrt(2 * a), np.sqrt(2 * b)
    quad = (s ** 2 / g_vv - 2 * delta * s * t / math.sqrt(g_vv * g_ww)
            + t ** 2 / g_ww) / (2 * (1 - delta ** 2))
    gauss = np.exp(-quad) / (2 * math.pi * math.sqrt(g_vv * g_ww * (1 - delta ** 2)))
    return (a * b) ** -0.5 * gauss * (-np.expm1(-4 * np.sqrt(a * b) * kernel))


def verify_density(box: BoxSpec, v: Site, w: Site, bin_edges, trials,
                   seed_base=0, threads=1, min_expected=5.0) -> dict:
    """Binned joint occupation density on the connection event vs the
    switching-identity formula; chi-square summary."""
    if v == w:
        raise DomainError("v and w must differ")
    table = green_table(box)
    g_vv, g_ww, g_vw = table.value(v, v), table.value(w, w), table.value(v, w)
    kernel = excursion_kernel(box, [], v, w, outer="ground",
                              error_check=False).value
    edges_a = np.asarray(bin_edges, dtype=float)
    edges_b = edges_a
    iv, iw = box.index(v), box.index(w)
    exp_id = f"verify-density/d={box.dimension}/radius={box.radius}"
    hist = np.zeros((len(edges_a) - 1, len(edges_b) - 1))
    conn_total = 0
    for ids, values, plus, minus in iter_chunks(box, seed_base, exp_id, trials,
                                                threads=threads):
        pm = values > 0
        mm = values < 0
        lp, _ = batch_components(box, pm, plus)
        lm, _ = batch_components(box, mm, minus)
        con = ((pm[:, iv] & pm[:, iw] & (lp[:, iv] == lp[:, iw]))
               | (mm[:, iv] & mm[:, iw] & (lm[:, iv] == lm[:, iw])))
        rows = np.nonzero(con)[0]
        conn_total += rows.size
        if rows.size:
            av = 0.5 * values[rows, iv] ** 2
            bv = 0.5 * values[rows, iw] ** 2
            h, _, _ = np.histogram2d(av, bv, bins=[edges_a, edges_b])
            hist += h
    # expected counts: integrate the density over each cell on a fine subgrid
    sub = 24
    expected = np.zeros_like(hist)
    for i in range(len(edges_a) - 1):
        aa = np.linspace(edges_a[i], edges_a[i + 1], sub + 1)
        am = 0.5 * (aa[1:] + aa[:-1])
        da = np.diff(aa)
        for j in range(len(edges_b) - 1):
            bb = np.linspace(edges_b[j], edges_b[j + 1], sub + 1)
            bm = 0.5 * (bb[1:] + bb[:-1])
            db = np.diff(bb)
            A, Bm = np.meshgrid(am, bm, indexing="ij")
            dens = joint_connection_density(A, Bm, g_vv, g_ww, g_vw, kernel)
            expected[i, j] = np.sum(dens * np.outer(da, db))
    expected *= trials
    usable = expected >= min_expected
    excluded = int((~usable).sum())
    chi2 = float(np.sum((hist[usable] - expected[usable]) ** 2
                        / expected[usable]))
    dof = int(usable.sum())
    p_value = float(scipy.stats.chi2.sf(chi2, dof)) if dof > 0 else float("nan")
    return {
        "observed": hist.tolist(), "expected": expected.tolist(),
        "chi2": chi2, "dof": dof, "p_value": p_value,
        "excluded_cells": excluded, "connected": int(conn_total),
        "trials": trials, "pass": bool(p_value > 0.001),
    }


# ---------------------------------------------------------------------------
# top-level experiment dispatch (used by the CLI)


def run_experiment(config, point_filter=None, progress=None) -> list:
    """Run every parameter point of a validated config; returns records.

    ``point_filter`` is an optional predicate on the point id used by resume.
    """
    kind = config["experiment"]
    d = config["d"]
    R = config["R"]
    trials = config["trials"]
    seed = config["seed"]
    threads = config.get("threads", 1)
    records = []

    def want(pid):
        return point_filter is None or point_filter(pid)

    if kind == "one-arm":
        for N in config["scales"]:
            pid = _experiment_point_id("one-arm", {"d": d, "N": N, "R": R})
            if want(pid):
                records += run_one_arm_point(d, N, R, trials, seed,
                                             threads=threads)
    elif kind == "crossing":
        N = config["N"]
        pid = _experiment_point_id("crossing", {"d": d, "N": N, "R": R})
        if want(pid):
            records += run_crossing_point(d, N, config["n_list"], R, trials,
                                          seed, threads=threads)
    elif kind == "two-arm":
        for N in config["scales"]:
            pid = _experiment_point_id("two-arm",
                                       {"d": d, "N": N, "R": R, "sep": config.get("sep", 1)})
            if want(pid):
                records += run_two_arm_point(d, N, R, trials, seed,
                                             separation=config.get("sep", 1),
                                             threads=threads)
    elif kind == "two-arm-interior":
        N = config["N"]
        for chi in config["chi_list"]:
            pid = _experiment_point_id("two-arm-interior",
                                       {"d": d, "N": N, "R": R, "chi": chi})
            if want(pid):
                records += run_two_arm_interior_point(d, N, chi, R, trials,
                                                      seed, threads=threads)
    elif kind == "two-arm-chi":
        N = config["N"]
        for chi in config["chi_list"]:
            sep = int(round(chi / d))
            pid = _experiment_point_id("two-arm",
                                       {"d": d, "N": N, "R": R, "sep": sep})
            if want(pid):
                records += run_two_arm_point(d, N, R, trials, seed,
                                             separation=sep, threads=threads)
    elif kind == "volume":
        N = config["N"]
        pid = _experiment_point_id("two-arm",
                                   {"d": d, "N": N, "R": R, "sep": 1})
        if want(pid):
            records += run_two_arm_point(d, N, R, trials, seed, separation=1,
                                         threads=threads,
                                         collect_volumes=config["M_grid"])
    elif kind == "captail":
        pid = _experiment_point_id("captail",
                                   {"d": d, "box_radius": config["box_radius"],
                                    "clip": config.get("clip") or config["box_radius"] // 2})
        if want(pid):
            records += run_capacity_tail(d, config["box_radius"],
                                         config["T_grid"], trials, seed,
                                         threads=threads,
                                         clip_radius=config.get("clip"))
    elif kind == "touching":
        for N in config["scales"]:
            pid = _experiment_point_id("touching", {"d": d, "N": N, "R": R})
            if want(pid):
                records += run_touching_point(d, N, R, trials, seed,
                                              threads=threads)
    elif kind == "four-point":
        for N in config["scales"]:
            pid = _experiment_point_id("four-point", {"d": d, "N": N, "R": R})
            if want(pid):
                records += run_four_point(d, N, R, trials, seed,
                                          threads=threads)
    else:
        raise DomainError(f"unknown experiment kind {kind!r}")
    return records


def experiment_points(config) -> list:
    """Point ids a config will run, in execution order (used by manifests)."""
    kind = config["experiment"]
    d, R = config["d"], config["R"]
    if kind == "one-arm":
        return [_experiment_point_id("one-arm", {"d": d, "N": N, "R": R})
                for N in config["scales"]]
    if kind == "crossing":
        return [_experiment_point_id("crossing",
                                     {"d": d, "N": config["N"], "R": R})]
    if kind == "two-arm":
        sep = config.get("sep", 1)
        return [_experiment_point_id("two-arm", {"d": d, "N": N, "R": R, "sep": sep})
                for N in config["scales"]]
    if kind == "two-arm-interior":
        return [_experiment_point_id("two-arm-interior",
                                     {"d": d, "N": config["N"], "R": R, "chi": chi})
                for chi in config["chi_list"]]
    if kind == "two-arm-chi":
        return [_experiment_point_id("two-arm",
                                     {"d": d, "N": config["N"], "R": R,
                                      "sep": int(round(chi / d))})
                for chi in config["chi_list"]]
    if kind == "volume":
        return [_experiment_point_id("two-arm",
                                     {"d": d, "N": config["N"], "R": R, "sep": 1})]
    if kind == "captail":
        return [_experiment_point_id("captail",
                                     {"d": d, "box_radius": config["box_radius"],
                                      "clip": config.get("clip") or config["box_radius"] // 2})]
    if kind == "touching":
        return [_experiment_point_id("touching", {"d": d, "N": N, "R": R})
                for N in config["scales"]]
    if kind == "four-point":
        return [_experiment_point_id("four-point", {"d": d, "N": N, "R": R})
                for N in config["scales"]]
    raise DomainError(f"unknown experiment kind {kind!r}")


def conditional_volume_fit(records, M_grid, min_conditioned: int = 200):
    """Median conditioned volume growth from a volume-experiment record."""
    rec = records[0] if isinstance(records, list) else records
    volumes = rec.payload["volumes"]
    points_plus, points_minus = [], []
    for M in M_grid:
        entry = volumes[str(M)]
        n = len(entry["plus"])
        if n < min_conditioned:
            raise InsufficiencyError(
                f"only {n} conditioned replicas at M={M} (< {min_conditioned})",
                achieved_counts={M: n},
            )
        points_plus.append((M, entry["plus"]))
        points_minus.append((M, entry["minus"]))
    fit_p = fit_value_exponent(points_plus)
    fit_m = fit_value_exponent(points_minus)
    med_ratio = {
        M: (np.median(volumes[str(M)]["plus"]) /
            max(np.median(volumes[str(M)]["minus"]), 1e-12))
        for M in M_grid
    }
    return fit_p, fit_m, med_ratio
