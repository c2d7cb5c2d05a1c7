"""Polytope watermarking: private token keys, embedding, detection, statistics.

A key is a set of m orthonormal Gaussian token rows plus a symmetric bound b;
a sample carries the watermark when every token coefficient lies strictly
inside (-b, b). Embedding clamps coefficients into the slab with a small
interior margin (for orthonormal tokens this is the Euclidean projection onto
the slab intersection), leaving the component orthogonal to the token span
untouched. Detection is the pure membership test, so projected samples are
always detected. Against a standard Gaussian null the false-positive rate has
the closed form ``(2 Phi(b) - 1)^m``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import EmptyBatch, NonFiniteInput
from .rng import stream

PROJECT_MARGIN_FRAC = 0.01


@dataclass(frozen=True)
class WatermarkKey:
    tokens: np.ndarray     # (m, d) orthonormal rows
    bound: float           # b, with lower bounds fixed at -b
    seed: int
    d: int
    m: int

    def __post_init__(self):
        tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        if tokens.shape[0] == 0:
            tokens = tokens.reshape(0, self.d)
        tokens = np.array(tokens)
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        if tokens.shape != (self.m, self.d):
            raise ValueError(f"token shape {tokens.shape} != ({self.m}, {self.d})")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if self.m > 0:
            gram = tokens @ tokens.T
            if np.max(np.abs(gram - np.eye(self.m))) > 1e-10:
                raise ValueError("token rows must be orthonormal to 1e-10")

    def as_polytope(self) -> geometry.PolytopeConstraint:
        """The slab-intersection constraint these tokens define."""
        b = np.full(self.m, self.bound)
        return geometry.PolytopeConstraint(tokens=self.tokens, lower=-b, upper=b,
                                           orthonormal_flag=True,
                                           dual_tokens=self.tokens)


@dataclass(frozen=True)
class DetectionResult:
    detected: bool
    coefficients: np.ndarray   # <a_i, x> per token
    margins: np.ndarray        # b - |coefficient| per token
    violated: np.ndarray       # indices with non-positive margin


def keygen(seed: int, m: int, d: int, b: float) -> WatermarkKey:
    """Deterministic key from orthonormalized Gaussian token draws."""
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")
    if not b > 0:
        raise ValueError("b must be positive")
    tokens = geometry.orthonormalize_tokens(seed, m, d)
    return WatermarkKey(tokens=tokens, bound=float(b), seed=seed, d=d, m=m)


def _check_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("points contain non-finite entries")
    if x.shape[-1] != d:
        raise ValueError(f"points have width {x.shape[-1]}, key expects {d}")
    return x


def project(key: WatermarkKey, x) -> np.ndarray:
    """Clamp token coefficients into the slab with margin 0.01*b (idempotent).

    Points already satisfying every constraint with that margin pass through
    unchanged, and the component orthogonal to the token span is never moved.
    The clamp is iterated to a floating-point fixed point (one extra pass in
    the worst case), which makes repeated projection exactly idempotent.
    """
    x = _check_points(x, key.d)
    if key.m == 0:
        return np.array(x)
    delta = PROJECT_MARGIN_FRAC * key.bound
    lo, hi = -key.bound + delta, key.bound - delta
    out = np.array(x)
    for _ in range(4):
        z = out @ key.tokens.T
        zc = np.clip(z, lo, hi)
        if np.array_equal(zc, z):
            return out
        out = out + (zc - z) @ key.tokens
    return out


def detect(key: WatermarkKey, x) -> DetectionResult:
    """Membership test for a single point, with per-token diagnostics."""
    x = _check_points(np.atleast_1d(x), key.d)
    if x.ndim != 1:
        raise ValueError("detect takes one point; use detect_mask for batches")
    z = key.tokens @ x
    margins = key.bound - np.abs(z)
    violated = np.nonzero(margins <= 0.0)[0]
    return DetectionResult(detected=violated.size == 0, coefficients=z,
                           margins=margins, violated=violated)


def detect_mask(key: WatermarkKey, x) -> np.ndarray:
    """Vectorized detection over rows: True where all |<a_i, x>| < b."""
    x = _check_points(np.atleast_2d(x), key.d)
    if key.m == 0:
        return np.ones(x.shape[0], dtype=bool)
    z = x @ key.tokens.T
    return np.all(np.abs(z) < key.bound, axis=1)


@dataclass(frozen=True)
class FpRate:
    analytic: float
    monte_carlo: float
    stderr: float
    n_mc: int


def fp_rate_gaussian(key: WatermarkKey, n_mc: int = 100_000, seed: int = 0) -> FpRate:
    """Chance that a standard Gaussian sample is falsely detected.

    Orthonormal tokens make the coefficients of x ~ N(0, I) independent
    standard normals, so the analytic rate is ``(2 Phi(b) - 1)^m``; the Monte
    Carlo estimate draws in the ambient space and reports a binomial stderr.
    """
    inside_one = math.erf(key.bound / math.sqrt(2.0))
    analytic = inside_one ** key.m
    rng = stream(seed, "fp")
    hits = 0
    chunk = 20_000
    done = 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        draws = rng.standard_normal((k, key.d))
        hits += int(np.sum(detect_mask(key, draws)))
        done += k
    p_hat = hits / n_mc
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-300) / n_mc)
    return FpRate(analytic=analytic, monte_carlo=p_hat, stderr=stderr, n_mc=n_mc)


def precision_estimate(key: WatermarkKey, samples) -> float:
    """Percentage of rows that carry the watermark (pre-projection reading)."""
    data = samples.data if hasattr(samples, "data") else np.atleast_2d(samples)
    if data.shape[0] == 0:
        raise EmptyBatch("precision_estimate needs at least one sample")
    return 100.0 * float(np.mean(detect_mask(key, data)))


# ---------------------------------------------------------------------------
# Key files
# ---------------------------------------------------------------------------

KEY_FORMAT_VERSION = 1


def save_key(key: WatermarkKey, stem: str) -> str:
    tokens_file = os.path.basename(stem) + geometry.TOKEN_BLOB_SUFFIX
    geometry.write_token_blob(stem + geometry.TOKEN_BLOB_SUFFIX, key.tokens)
    doc = {"version": KEY_FORMAT_VERSION, "m": key.m, "d": key.d, "b": key.bound,
           "seed": key.seed, "tokens_file": tokens_file}
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stem + ".json"


def load_key(stem: str) -> WatermarkKey:
    with open(stem + ".json", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != KEY_FORMAT_VERSION:
        raise ValueError(f"unsupported key format version {doc.get('version')}")
    base = os.path.dirname(stem) or "."
    tokens = geometry.read_token_blob(os.path.join(base, doc["tokens_file"]),
                                      int(doc["m"]), int(doc["d"]))
    return WatermarkKey(tokens=tokens, bound=float(doc["b"]), seed=int(doc["seed"]),
                        d=int(doc["d"]), m=int(doc["m"]))
