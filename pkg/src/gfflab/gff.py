"""Exact sampling of the Dirichlet GFF and of metric-graph sign connectivity.

The field on the box B(N) (zero boundary just outside the box) is sampled in
the sine eigenbasis of the killed-walk Laplacian, so its covariance equals the
box Green's function exactly in law.  Edge connectivity at lattice resolution
follows the bridge-positivity rule: an edge with endpoint values a, b of the
same strict sign is open for that sign with probability 1 - exp(-|ab| / d);
this is the conditional two-point formula specialized to a single segment of
length d with conductance kernel (2d)^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dstn

from . import rng as rngmod
from .errors import DomainError, NumericError
from .greens import _dirichlet_eigenvalues, green_column, green_table
from .lattice import BoxSpec, Edge, Site, edge_arrays, edge_index


@dataclass
class FieldSample:
    """GFF values at every site of a Dirichlet box (flat row-major order)."""

    box: BoxSpec
    values: np.ndarray = field(repr=False)
    seed_path: tuple = None

    def value_at(self, site: Site) -> float:
        return float(self.values[self.box.index(site)])


@dataclass
class EdgeOpenness:
    """Per-edge bridge-positivity indicators, aligned with ``edge_arrays``."""

    box: BoxSpec
    plus_open: np.ndarray = field(repr=False)
    minus_open: np.ndarray = field(repr=False)
    seed_path: tuple = None

    def for_edge(self, edge: Edge):
        i = edge_index(self.box, edge)
        return bool(self.plus_open[i]), bool(self.minus_open[i])


@dataclass
class InteriorPointSample:
    edge: Edge
    offsets: np.ndarray
    values: np.ndarray
    subsegment_open_plus: np.ndarray
    subsegment_open_minus: np.ndarray


def _spectral_transform(coef: np.ndarray, box: BoxSpec) -> np.ndarray:
    """Orthonormal sine synthesis along the last ``d`` axes."""
    d, n = box.dimension, box.side
    axes = tuple(range(coef.ndim - d, coef.ndim))
    scale = (2.0 * (n + 1)) ** (-d / 2.0)
    return dstn(coef, type=1, axes=axes) * scale


def _mode_scale(box: BoxSpec) -> np.ndarray:
    return np.sqrt(2.0 * box.dimension / _dirichlet_eigenvalues(box))


def sample_field(box: BoxSpec, rng_or_seed) -> FieldSample:
    """Draw one exact Dirichlet-box GFF sample.

    ``rng_or_seed`` is either a numpy Generator or a seed path tuple
    (seed_base, experiment_id, replica).
    """
    rng, seed_path = _resolve_rng(rng_or_seed, rngmod.PURPOSE_FIELD)
    z = rng.standard_normal((box.side,) * box.dimension)
    values = _spectral_transform(z * _mode_scale(box), box)
    return FieldSample(box=box, values=values.ravel(), seed_path=seed_path)


def sample_field_batch(box: BoxSpec, rngs) -> np.ndarray:
    """Stacked field samples, one row of shape (n_sites,) per generator.

    Per-replica noise is drawn from each generator separately (replica
    determinism); the sine synthesis runs once over the whole batch.
    """
    shape = (box.side,) * box.dimension
    z = np.empty((len(rngs),) + shape)
    for i, rng in enumerate(rngs):
        z[i] = rng.standard_normal(shape)
    out = _spectral_transform(z * _mode_scale(box), box)
    return out.reshape(len(rngs), -1)


def _resolve_rng(rng_or_seed, purpose):
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed, None
    seed_base, experiment_id, replica = rng_or_seed
    return rngmod.stream(seed_base, experiment_id, replica, purpose), tuple(rng_or_seed)


def edge_open_probability(a, b, d: int):
    """P(bridge keeps the endpoints' common sign) for endpoint values a, b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    same_sign = ((a > 0) & (b > 0)) | ((a < 0) & (b < 0))
    return np.where(same_sign, -np.expm1(-np.abs(a * b) / d), 0.0)


def open_edges(fs: FieldSample, rng_or_seed) -> EdgeOpenness:
    """Sample per-edge bridge positivity given the discrete field."""
    rng, seed_path = _resolve_rng(rng_or_seed, rngmod.PURPOSE_EDGES)
    box = fs.box
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    a = fs.values[tails]
    b = fs.values[heads]
    u = rng.random(tails.shape)
    open_mask = u < edge_open_probability(a, b, box.dimension)
    plus = open_mask & (a > 0) & (b > 0)
    minus = open_mask & (a < 0) & (b < 0)
    return EdgeOpenness(box=box, plus_open=plus, minus_open=minus,
                        seed_path=seed_path)


def open_edges_batch(box: BoxSpec, values: np.ndarray, rngs):
    """Batched openness masks (plus, minus) of shape (batch, n_edges)."""
    tails, heads, _ = edge_arrays(box.dimension, box.radius)
    a = values[:, tails]
    b = values[:, heads]
    u = np.empty_like(a)
    for i, rng in enumerate(rngs):
        u[i] = rng.random(tails.shape)
    open_mask = u < -np.expm1(-np.abs(a * b) / box.dimension)
    plus = open_mask & (a > 0) & (b > 0)
    minus = open_mask & (a < 0) & (b < 0)
    return plus, minus


def bridge_moments(offsets: np.ndarray, d: int):
    """Mean weights and covariance of the centred variance-2 bridge of length d
    at the given offsets: cov(s, t) = 2 s (d - t) / d for s <= t."""
    t = np.asarray(offsets, dtype=float)
    s, u = np.meshgrid(t, t, indexing="ij")
    lo, hi = np.minimum(s, u), np.maximum(s, u)
    cov = 2.0 * lo * (d - hi) / d
    w_b = t / d          # weight of the second endpoint in the mean
    return w_b, cov


def sample_interior(fs: FieldSample, edge: Edge, offsets, rng_or_seed) -> InteriorPointSample:
    """Field values at interior edge points plus sub-segment openness flags.

    Values follow the variance-2 Brownian bridge pinned at the endpoint field
    values; each sub-interval of length l with endpoint values s, t of one
    strict sign is open for that sign with probability 1 - exp(-|st| / l),
    conditionally independently given all values.
    """
    rng, _ = _resolve_rng(rng_or_seed, rngmod.PURPOSE_INTERIOR)
    box = fs.box
    d = box.dimension
    offsets = np.asarray(offsets, dtype=float)
    if offsets.size == 0:
        raise DomainError("need at least one offset")
    if np.any(offsets <= 0.0) or np.any(offsets >= d):
        raise DomainError("offsets must lie strictly inside (0, d)")
    if np.any(np.diff(offsets) <= 0):
        raise DomainError("offsets must be strictly increasing")

    va, vb = fs.value_at(edge.a), fs.value_at(edge.b)
    w_b, cov = bridge_moments(offsets, d)
    mean = va * (1.0 - w_b) + vb * w_b
    try:
        chol = np.linalg.cholesky(cov + 1e-14 * np.eye(len(offsets)))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"degenerate bridge covariance: {exc}")
    values = mean + chol @ rng.standard_normal(len(offsets))

    ends_off = np.concatenate([[0.0], offsets, [float(d)]])
    ends_val = np.concatenate([[va], values, [vb]])
    lengths = np.diff(ends_off)
    s, t = ends_val[:-1], ends_val[1:]
    u = rng.random(lengths.shape)
    p = -np.expm1(-np.abs(s * t) / lengths)
    open_mask = u < p
    plus = open_mask & (s > 0) & (t > 0)
    minus = open_mask & (s < 0) & (t < 0)
    return InteriorPointSample(edge=edge, offsets=offsets, values=values,
                               subsegment_open_plus=plus,
                               subsegment_open_minus=minus)


def conditioned_field(box: BoxSpec, pins, rng_or_seed, table=None) -> FieldSample:
    """Exact conditional sample given pinned site values.

    Classic Gaussian conditioning: an unconditioned sample is corrected by the
    harmonic interpolation of the pin residuals through Green's columns.
    """
    pins = list(pins)
    sites = [s for s, _ in pins]
    targets = np.array([v for _, v in pins], dtype=float)
    if len({box.index(s) for s in sites}) != len(sites):
        raise DomainError("pinned sites must be distinct")

    base = sample_field(box, rng_or_seed)
    cols = np.stack([green_column(box, (), s) for s in sites], axis=1)
    idx = [box.index(s) for s in sites]
    gram = cols[idx, :]
    try:
        coef = np.linalg.solve(gram, targets - base.values[idx])
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular pin covariance: {exc}")
    values = base.values + cols @ coef
    return FieldSample(box=box, values=values, seed_path=base.seed_path)


def conditional_mean_operator(box: BoxSpec, sites):
    """(columns, solver matrix) pair reused for batched conditioning."""
    cols = np.stack([green_column(box, (), s) for s in sites], axis=1)
    idx = [box.index(s) for s in sites]
    gram = cols[idx, :]
    return cols, idx, np.linalg.inv(gram)


def conditioned_field_batch(box: BoxSpec, operator, targets, values: np.ndarray):
    """Apply pin corrections to a batch of unconditioned samples in place."""
    cols, idx, gram_inv = operator
    resid = np.asarray(targets, dtype=float)[None, :] - values[:, idx]
    values += resid @ gram_inv.T @ cols.T
    return values
