"""Seeded synthetic generators for constrained benchmark distributions.

Every generator returns a primal SampleBatch whose rows strictly satisfy the
matching constraint (rejection or reflection keeps them inside, and a small
interior margin keeps them clear of the mirror map's boundary guard). All
randomness flows through Philox streams, so outputs are reproducible from the
seed alone.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .batch import PRIMAL, SampleBatch
from .errors import RejectionBudgetExceeded
from .rng import stream

# Rejection keeps this much relative slack to the boundary so that generated
# rows always survive the forward map's interior guard.
_INTERIOR_MARGIN = 1e-9

_BUDGET_RATE = 1e-4
_BUDGET_WARMUP = 100_000


@dataclass(frozen=True)
class DatasetSpec:
    """Declarative description of a generator call (echoed into sidecars)."""

    kind: str                      # gmm_ball | spiral_ball | dirichlet | hypercube_corners
    n_samples: int
    seed: int
    dim: int | None = None
    params: dict = field(default_factory=dict)

    def generate(self) -> SampleBatch:
        if self.kind == "gmm_ball":
            return gmm_ball(self.dim, self.n_samples, self.seed, **self.params)
        if self.kind == "spiral_ball":
            return spiral_ball(self.n_samples, self.seed, **self.params)
        if self.kind == "dirichlet":
            return dirichlet(n=self.n_samples, seed=self.seed, **self.params)
        if self.kind == "hypercube_corners":
            return hypercube_corners(self.dim, self.n_samples, self.seed, **self.params)
        raise ValueError(f"unknown dataset kind {self.kind!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rejection_fill(n: int, d: int, propose, accept) -> np.ndarray:
    """Draw proposal chunks until n rows pass ``accept``; police the budget."""
    out = np.empty((n, d))
    got = 0
    proposed = 0
    chunk = max(4 * n, 1024)
    while got < n:
        pts = propose(chunk)
        proposed += chunk
        keep = pts[accept(pts)]
        take = min(n - got, len(keep))
        out[got:got + take] = keep[:take]
        got += take
        if proposed >= _BUDGET_WARMUP and got / proposed < _BUDGET_RATE:
            raise RejectionBudgetExceeded(
                f"acceptance rate {got / proposed:.2e} fell below {_BUDGET_RATE:.0e}")
    return out


def gmm_ball(d: int, n: int, seed: int, variance: float = 0.05,
             radius_sq: float = 1.0) -> SampleBatch:
    """Gaussian mixture inside a ball, with out-of-set proposals rejected.

    For d = 2 the mixture has 8 components equally spaced on a circle of
    radius 0.6; for d >= 3 one component sits at 0.7 along each coordinate
    axis. Component variance defaults to 0.05.
    """
    if d < 2:
        raise ValueError("gmm_ball needs d >= 2")
    if d == 2:
        ang = 2.0 * math.pi * np.arange(8) / 8.0
        centers = 0.6 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        centers = 0.7 * np.eye(d)
    rng = stream(seed, "gmm_ball")
    std = math.sqrt(variance)
    limit = radius_sq * (1.0 - _INTERIOR_MARGIN)

    def propose(k):
        comp = rng.integers(0, len(centers), size=k)
        return centers[comp] + std * rng.standard_normal((k, d))

    def accept(pts):
        return np.sum(pts * pts, axis=1) < limit

    data = _rejection_fill(n, d, propose, accept)
    return SampleBatch(data=data, space=PRIMAL,
                       constraint=geometry.BallConstraint(radius_sq=radius_sq))


def spiral_ball(n: int, seed: int, sigma: float = 0.02) -> SampleBatch:
    """Jittered Archimedean spiral ``r = 0.9 * theta / (4 pi)`` in the unit ball."""
    rng = stream(seed, "spiral_ball")
    theta_max = 4.0 * math.pi
    limit = 1.0 - _INTERIOR_MARGIN

    def propose(k):
        theta = rng.uniform(0.0, theta_max, size=k)
        r = 0.9 * theta / theta_max
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if sigma > 0:
            pts = pts + sigma * rng.standard_normal((k, 2))
        return pts

    def accept(pts):
        return np.sum(pts * pts, axis=1) < limit

    data = _rejection_fill(n, 2, propose, accept)
    return SampleBatch(data=data, space=PRIMAL,
                       constraint=geometry.BallConstraint(radius_sq=1.0))


def _standard_gamma(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    """Marsaglia-Tsang squeeze sampler; shapes below 1 use the boost identity."""
    if alpha < 1.0:
        g = _standard_gamma(rng, alpha + 1.0, size)
        u = rng.uniform(0.0, 1.0, size=size)
        # Gamma(a) =d Gamma(a+1) * U^(1/a); log-domain guards underflow.
        return g * np.exp(np.log(u) / alpha)
    dpar = alpha - 1.0 / 3.0
    cpar = 1.0 / math.sqrt(9.0 * dpar)
    out = np.empty(size)
    need = np.arange(size)
    while need.size:
        x = rng.standard_normal(need.size)
        v = (1.0 + cpar * x) ** 3
        u = rng.uniform(0.0, 1.0, size=need.size)
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.where(ok, np.log(np.where(ok, v, 1.0)), -np.inf)
            accept = ok & (np.log(u) < 0.5 * x * x + dpar - dpar * v + dpar * logv)
        out[need[accept]] = dpar * v[accept]
        need = need[~accept]
    return out


def dirichlet(alpha, n: int, seed: int) -> SampleBatch:
    """Dirichlet draws in reduced coordinates (first k-1 of k components).

    Uses the Gamma-ratio construction. Rows with any component at or below
    the interior guard are resampled so every row survives the forward map;
    for concentrations well below 1 this truncates an extreme boundary spike.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or len(alpha) < 2:
        raise ValueError("alpha must be a vector with at least two entries")
    if np.any(alpha <= 0):
        raise ValueError("alpha entries must be positive")
    k = len(alpha)
    rng = stream(seed, "dirichlet")
    rows = np.empty((n, k))
    need = n
    while need:
        g = np.stack([_standard_gamma(rng, float(a), need) for a in alpha], axis=1)
        x = g / np.sum(g, axis=1, keepdims=True)
        good = x[np.all(x > 1e-12, axis=1)]
        take = min(need, len(good))
        rows[n - need:n - need + take] = good[:take]
        need -= take
    return SampleBatch(data=rows[:, :k - 1], space=PRIMAL,
                       constraint=geometry.SimplexConstraint(dim=k - 1))


def _fold_unit(z: np.ndarray) -> np.ndarray:
    """Reflect values into [0, 1]: |z| folded about 1 as often as needed."""
    r = np.abs(z) % 2.0
    return np.where(r <= 1.0, r, 2.0 - r)


def hypercube_corners(d: int, n: int, seed: int, variance: float = 0.2,
                      mode: str = "reject") -> SampleBatch:
    """Per-axis corner Gaussians on the unit cube, rejected or reflected inside."""
    if d < 2:
        raise ValueError("hypercube_corners needs d >= 2")
    if mode not in ("reject", "reflect"):
        raise ValueError(f"mode must be 'reject' or 'reflect', got {mode!r}")
    rng = stream(seed, "hypercube_corners")
    centers = np.eye(d)
    std = math.sqrt(variance)
    lo, hi = _INTERIOR_MARGIN, 1.0 - _INTERIOR_MARGIN

    def propose(k):
        comp = rng.integers(0, d, size=k)
        pts = centers[comp] + std * rng.standard_normal((k, d))
        if mode == "reflect":
            pts = _fold_unit(pts)
        return pts

    def accept(pts):
        return np.all((pts > lo) & (pts < hi), axis=1)

    data = _rejection_fill(n, d, propose, accept)
    return SampleBatch(data=data, space=PRIMAL,
                       constraint=geometry.HypercubeConstraint(dim=d))
