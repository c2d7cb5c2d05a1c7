"""Convex constrained sets and their exact mirror maps.

Each supported set M comes with a strictly convex barrier whose gradient maps
M bijectively onto all of R^d (the dual space). This module houses the closed
forms for the map, its inverse, the Hessian of the dual barrier, and the
log-determinant of that Hessian:

* ball       ``{x : ||x||^2 < R}`` with the log-barrier ``-gamma*log(R - ||x||^2)``
* simplex    reduced coordinates of the probability simplex with the entropic
             barrier ``sum_i x_i log x_i + (1 - sum x_i) log(1 - sum x_i)``
* polytope   slab intersections ``c_i < <a_i, x> < b_i`` where the per-slab
             coefficient rescaler is an affinely rescaled hyperbolic tangent
             (exactly invertible, numerically stable at the boundary)
* hypercube  ``[0, 1]^d``, an orthonormal polytope with identity tokens

All map functions accept arrays of shape ``(..., d)`` and act on the last
axis. Constraint objects are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .errors import NonFiniteInput, PointOutsideSet, RankDeficient
from .rng import stream

# Relative interior margin below which mirror_forward refuses a point.
BOUNDARY_GUARD = 1e-12

# Slab slacks are floored at (b-c) * this value before taking logs, which is
# the log-domain equivalent of clamping the tanh argument to +-(1 - 1e-15).
SLACK_FLOOR = 5e-16

# Instrumentation: rows pushed through mirror_forward since the last reset.
# The training loop is contracted to hit the forward map exactly once per
# datum, which tests assert through this counter.
call_counts = {"mirror_forward_rows": 0}


def reset_call_counts() -> None:
    call_counts["mirror_forward_rows"] = 0


# ---------------------------------------------------------------------------
# Constraint types
# ---------------------------------------------------------------------------


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BallConstraint:
    """Open ball ``{x : ||x||_2^2 < radius_sq}`` with barrier weight gamma."""

    radius_sq: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.radius_sq > 0:
            raise ValueError(f"radius_sq must be positive, got {self.radius_sq}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class SimplexConstraint:
    """Reduced simplex ``{x in R^d : x_i > 0, sum x_i < 1}``.

    This is the (d+1)-component probability simplex with the redundant last
    coordinate ``x_{d+1} = 1 - sum_i x_i`` dropped.
    """

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class PolytopeConstraint:
    """Slab intersection defined by token rows ``a_i`` and bounds ``(c_i, b_i)``.

    ``dual_tokens`` holds the rows of ``(A^T A)^{-1} A^T`` (for row-major
    tokens: ``(A A^T)^{-1} A``), which extract the expansion coefficients the
    maps operate on. For orthonormal tokens the dual tokens equal the tokens
    and the coefficient of x on token i is exactly ``<a_i, x>``; membership,
    margins, and the maps all agree with the slab inequalities. For
    non-orthonormal tokens the maps clamp the expansion coefficients
    ``<a~_i, x>``, so the set this object represents is
    ``{x : c_i < <a~_i, x> < b_i}``.
    """

    tokens: np.ndarray        # (m, d), rows a_i
    lower: np.ndarray         # (m,)
    upper: np.ndarray         # (m,)
    orthonormal_flag: bool
    dual_tokens: np.ndarray   # (m, d), rows a~_i

    def __post_init__(self):
        tokens = _freeze(np.atleast_2d(self.tokens))
        dual = _freeze(np.atleast_2d(self.dual_tokens))
        lower = _freeze(np.atleast_1d(self.lower))
        upper = _freeze(np.atleast_1d(self.upper))
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "dual_tokens", dual)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        m, d = tokens.shape
        if m > d:
            raise ValueError(f"need m <= d, got m={m}, d={d}")
        if lower.shape != (m,) or upper.shape != (m,):
            raise ValueError("bounds must have one entry per token")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        if dual.shape != (m, d):
            raise ValueError("dual_tokens must match the token shape")
        # Bi-orthogonality certifies both linear independence and that
        # dual_tokens really is the pseudo-inverse transpose.
        gram = dual @ tokens.T
        if np.max(np.abs(gram - np.eye(m))) > 1e-10:
            raise ValueError("dual_tokens do not bi-orthogonalize the tokens to 1e-10")
        if self.orthonormal_flag:
            if np.max(np.abs(tokens @ tokens.T - np.eye(m))) > 1e-10:
                raise ValueError("orthonormal_flag set but rows are not orthonormal to 1e-10")

    @classmethod
    def build(cls, tokens, lower, upper) -> "PolytopeConstraint":
        """Construct from tokens alone; dual tokens and the flag are derived."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
        m = tokens.shape[0]
        lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (m,))
        upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (m,))
        ortho = bool(np.max(np.abs(tokens @ tokens.T - np.eye(m))) < 1e-10)
        dual = tokens if ortho else dual_tokens(tokens)
        return cls(tokens=tokens, lower=lower, upper=upper,
                   orthonormal_flag=ortho, dual_tokens=dual)

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class HypercubeConstraint:
    """The open unit cube ``(0, 1)^d``."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    def as_polytope(self) -> PolytopeConstraint:
        return _hypercube_polytope(self.dim)


@lru_cache(maxsize=32)
def _hypercube_polytope(dim: int) -> PolytopeConstraint:
    eye = np.eye(dim)
    return PolytopeConstraint(tokens=eye, lower=np.zeros(dim), upper=np.ones(dim),
                              orthonormal_flag=True, dual_tokens=eye)


ConstraintSet = BallConstraint | SimplexConstraint | PolytopeConstraint | HypercubeConstraint


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{what} contains non-finite entries")
    return arr


def _slab_forward_coeff(z: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # atanh(2(z-c)/(b-c) - 1) written in terms of the two slab slacks, which
    # keeps full precision when z sits very close to either bound.
    width = hi - lo
    s_lo = np.maximum(z - lo, width * SLACK_FLOOR)
    s_hi = np.maximum(hi - z, width * SLACK_FLOOR)
    return 0.5 * (np.log(s_lo) - np.log(s_hi))


def _slab_inverse_coeff(w: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # c + (b-c) * (tanh(w)+1)/2, with the logistic form of the tanh rescaling.
    return lo + (hi - lo) * expit(2.0 * w)


def _slab_inverse_slope(w: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # d/dw of the inverse coefficient map: (b-c)/2 * (1 - tanh(w)^2).
    t = np.tanh(w)
    return 0.5 * (hi - lo) * (1.0 - t * t)


def _log_slab_inverse_slope(w: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # log((b-c)/2 * sech(w)^2), stable for large |w| where 1 - tanh^2 underflows.
    aw = np.abs(w)
    log_sech2 = 2.0 * (math.log(2.0) - aw - np.log1p(np.exp(-2.0 * aw)))
    return np.log(0.5 * (hi - lo)) + log_sech2


# ---------------------------------------------------------------------------
# Mirror maps
# ---------------------------------------------------------------------------


def mirror_forward(cset: ConstraintSet, x: np.ndarray) -> np.ndarray:
    """Map strictly interior points of M into the unconstrained dual space.

    Raises PointOutsideSet when a point violates M or sits within the relative
    boundary guard (1e-12) of its boundary.
    """
    x = _check_finite(x, "x")
    call_counts["mirror_forward_rows"] += 1 if x.ndim == 1 else int(np.prod(x.shape[:-1]))

    if isinstance(cset, BallConstraint):
        r = cset.radius_sq
        slack = r - np.sum(x * x, axis=-1, keepdims=True)
        if np.any(slack <= BOUNDARY_GUARD * r):
            raise PointOutsideSet("point outside the ball or within the boundary guard")
        return 2.0 * cset.gamma * x / slack

    if isinstance(cset, SimplexConstraint):
        if x.shape[-1] != cset.dim:
            raise PointOutsideSet(f"expected {cset.dim} reduced coordinates")
        slack = 1.0 - np.sum(x, axis=-1, keepdims=True)
        if np.any(x <= BOUNDARY_GUARD) or np.any(slack <= BOUNDARY_GUARD):
            raise PointOutsideSet("point outside the simplex or within the boundary guard")
        return np.log(x) - np.log(slack)

    poly = cset.as_polytope() if isinstance(cset, HypercubeConstraint) else cset
    if x.shape[-1] != poly.dim:
        raise PointOutsideSet(f"expected dimension {poly.dim}")
    z = x @ poly.dual_tokens.T
    width = poly.upper - poly.lower
    if np.any(z - poly.lower <= BOUNDARY_GUARD * width) or \
       np.any(poly.upper - z <= BOUNDARY_GUARD * width):
        raise PointOutsideSet("point outside the polytope or within the boundary guard")
    w = _slab_forward_coeff(z, poly.lower, poly.upper)
    return x + (w - z) @ poly.tokens


def mirror_inverse(cset: ConstraintSet, y: np.ndarray) -> np.ndarray:
    """Map any finite dual point back to a strictly interior point of M."""
    y = _check_finite(y, "y")

    if isinstance(cset, BallConstraint):
        r, g = cset.radius_sq, cset.gamma
        ny2 = np.sum(y * y, axis=-1, keepdims=True)
        u = np.sqrt(r * ny2 + g * g)
        return r * y / (u + g)

    if isinstance(cset, SimplexConstraint):
        return _softmax_reduced(y)

    poly = cset.as_polytope() if isinstance(cset, HypercubeConstraint) else cset
    w = y @ poly.dual_tokens.T
    z = _slab_inverse_coeff(w, poly.lower, poly.upper)
    return y + (z - w) @ poly.tokens


def _softmax_reduced(y: np.ndarray) -> np.ndarray:
    # Softmax over (0, y_1, ..., y_d) dropping the implicit first component.
    m = np.maximum(np.max(y, axis=-1, keepdims=True), 0.0)
    denom = np.exp(-m) + np.sum(np.exp(y - m), axis=-1, keepdims=True)
    return np.exp(y - m) / denom


# ---------------------------------------------------------------------------
# Dual Hessians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualHessian:
    """Structured d x d operator ``base*I + diag(diag_part) + left @ diag(core) @ right``.

    Polytope Hessians stay in this identity-plus-low-rank form (O(md) storage);
    ``to_dense`` materializes the full matrix on demand for tests.
    """

    dim: int
    base: float = 0.0
    diag_part: np.ndarray | None = None
    left: np.ndarray | None = None    # (d, k)
    core: np.ndarray | None = None    # (k,)
    right: np.ndarray | None = None   # (k, d)

    def to_dense(self) -> np.ndarray:
        h = self.base * np.eye(self.dim)
        if self.diag_part is not None:
            h[np.diag_indices(self.dim)] += self.diag_part
        if self.left is not None:
            h += (self.left * self.core) @ self.right
        return h

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.base * v
        if self.diag_part is not None:
            out = out + self.diag_part * v
        if self.left is not None:
            out = out + self.left @ (self.core * (self.right @ v))
        return out


def hessian_dual(cset: ConstraintSet, y: np.ndarray) -> DualHessian:
    """Jacobian of mirror_inverse at a dual point y (symmetric positive-definite).

    The ball form is derived by differentiating the closed-form inverse map,
    which is the safe route for every barrier weight and radius.
    """
    y = _check_finite(y, "y")
    if y.ndim != 1:
        raise ValueError("hessian_dual expects a single point of shape (d,)")
    d = y.shape[0]

    if isinstance(cset, BallConstraint):
        r, g = cset.radius_sq, cset.gamma
        u = math.sqrt(r * float(y @ y) + g * g)
        c1 = r / (u + g)
        c2 = r / (u * (u + g))
        return DualHessian(dim=d, base=c1, left=y[:, None],
                           core=np.array([-c1 * c2]), right=y[None, :])

    if isinstance(cset, SimplexConstraint):
        if d != cset.dim:
            raise ValueError(f"expected dimension {cset.dim}")
        p = _softmax_reduced(y)
        return DualHessian(dim=d, diag_part=p, left=p[:, None],
                           core=np.array([-1.0]), right=p[None, :])

    poly = cset.as_polytope() if isinstance(cset, HypercubeConstraint) else cset
    if d != poly.dim:
        raise ValueError(f"expected dimension {poly.dim}")
    w = poly.dual_tokens @ y
    sigma = _slab_inverse_slope(w, poly.lower, poly.upper) - 1.0
    return DualHessian(dim=d, base=1.0, left=poly.tokens.T,
                       core=sigma, right=poly.dual_tokens)


def log_det_hessian_dual(cset: ConstraintSet, y: np.ndarray) -> float:
    """Closed-form log-determinant of the dual Hessian.

    Uses the matrix-determinant lemma per set, never a dense factorization:
    ball ``d*log(R/(u+gamma)) + log(gamma/u)``, simplex ``sum of all d+1 log
    probabilities``, polytope ``sum of log slopes of the per-slab inverse``.
    """
    y = _check_finite(y, "y")
    if y.ndim != 1:
        raise ValueError("log_det_hessian_dual expects a single point of shape (d,)")
    d = y.shape[0]

    if isinstance(cset, BallConstraint):
        r, g = cset.radius_sq, cset.gamma
        u = math.sqrt(r * float(y @ y) + g * g)
        return d * math.log(r / (u + g)) + math.log(g / u)

    if isinstance(cset, SimplexConstraint):
        m = max(float(np.max(y)), 0.0)
        lse = m + math.log(math.exp(-m) + float(np.sum(np.exp(y - m))))
        return float(np.sum(y)) - (d + 1) * lse

    poly = cset.as_polytope() if isinstance(cset, HypercubeConstraint) else cset
    w = poly.dual_tokens @ y
    return float(np.sum(_log_slab_inverse_slope(w, poly.lower, poly.upper)))


# ---------------------------------------------------------------------------
# Membership
# ---------------------------------------------------------------------------


def contains(cset: ConstraintSet, x: np.ndarray) -> tuple[bool, np.ndarray]:
    """Strict membership test with one signed margin per defining inequality.

    Margin order: ball ``[R - ||x||^2]``; simplex ``[x_1, ..., x_d, 1 - sum]``;
    polytope ``[z - c, b - z]`` concatenated (coefficients z as used by the
    maps). Positive margins mean strictly inside.
    """
    x = _check_finite(x, "x")
    margins = _margins(cset, x)
    return bool(np.all(margins > 0.0)), margins


def contains_mask(cset: ConstraintSet, x: np.ndarray) -> np.ndarray:
    """Vectorized strict membership over rows of an (n, d) array."""
    x = _check_finite(x, "x")
    return np.all(_margins(cset, x) > 0.0, axis=-1)


def _margins(cset: ConstraintSet, x: np.ndarray) -> np.ndarray:
    if isinstance(cset, BallConstraint):
        return cset.radius_sq - np.sum(x * x, axis=-1, keepdims=True)
    if isinstance(cset, SimplexConstraint):
        slack = 1.0 - np.sum(x, axis=-1, keepdims=True)
        return np.concatenate([x, slack], axis=-1)
    poly = cset.as_polytope() if isinstance(cset, HypercubeConstraint) else cset
    z = x @ poly.dual_tokens.T
    return np.concatenate([z - poly.lower, poly.upper - z], axis=-1)


# ---------------------------------------------------------------------------
# Token construction
# ---------------------------------------------------------------------------


def orthonormalize_tokens(seed: int, m: int, d: int, max_attempts: int = 5) -> np.ndarray:
    """Draw m x d Gaussian rows and orthonormalize them by Householder QR.

    Rows are re-signed so the first nonzero entry of each row is positive,
    making the result canonical for a given seed. Raises RankDeficient when
    repeated draws stay numerically rank-deficient.
    """
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")
    rng = stream(seed, "tokens")
    for _ in range(max_attempts):
        g = rng.standard_normal((d, m))
        q, r = np.linalg.qr(g, mode="reduced")
        diag = np.abs(np.diag(r))
        if diag.min() <= d * np.finfo(np.float64).eps * max(diag.max(), 1.0):
            continue
        a = np.ascontiguousarray(q.T)
        for i in range(m):
            nz = np.nonzero(a[i])[0]
            if a[i, nz[0]] < 0:
                a[i] = -a[i]
        return a
    raise RankDeficient(f"could not draw a full-rank {m}x{d} Gaussian matrix "
                        f"in {max_attempts} attempts")


def dual_tokens(a: np.ndarray) -> np.ndarray:
    """Rows of the pseudo-inverse transpose: for row-major A, ``(A A^T)^{-1} A``.

    Satisfies ``<a~_i, a_j> = delta_ij``; equals A when A is orthonormal.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    gram = a @ a.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankDeficient("token rows are numerically linearly dependent")
    return np.linalg.solve(gram, a)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TOKEN_BLOB_SUFFIX = ".tokens.bin"


def constraint_to_dict(cset: ConstraintSet, tokens_file: str | None = None) -> dict:
    """JSON-ready description. Polytopes reference an external token blob."""
    if isinstance(cset, BallConstraint):
        return {"kind": "ball", "radius_sq": cset.radius_sq, "gamma": cset.gamma}
    if isinstance(cset, SimplexConstraint):
        return {"kind": "simplex", "dim": cset.dim}
    if isinstance(cset, HypercubeConstraint):
        return {"kind": "hypercube", "dim": cset.dim}
    doc = {
        "kind": "polytope",
        "m": cset.m,
        "d": cset.dim,
        "lower": cset.lower.tolist(),
        "upper": cset.upper.tolist(),
        "orthonormal": cset.orthonormal_flag,
    }
    if tokens_file is not None:
        doc["tokens_file"] = tokens_file
    return doc


def save_constraint(cset: ConstraintSet, stem: str, seed: int | None = None) -> str:
    """Write ``<stem>.json`` (and ``<stem>.tokens.bin`` for polytopes)."""
    tokens_file = None
    if isinstance(cset, PolytopeConstraint):
        tokens_file = os.path.basename(stem) + TOKEN_BLOB_SUFFIX
        write_token_blob(stem + TOKEN_BLOB_SUFFIX, cset.tokens)
    doc = constraint_to_dict(cset, tokens_file)
    if seed is not None:
        doc["seed"] = seed
    path = stem + ".json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def constraint_from_dict(doc: dict, base_dir: str = ".") -> ConstraintSet:
    kind = doc["kind"]
    if kind == "ball":
        return BallConstraint(radius_sq=float(doc["radius_sq"]), gamma=float(doc["gamma"]))
    if kind == "simplex":
        return SimplexConstraint(dim=int(doc["dim"]))
    if kind == "hypercube":
        return HypercubeConstraint(dim=int(doc["dim"]))
    if kind == "polytope":
        m, d = int(doc["m"]), int(doc["d"])
        tokens = read_token_blob(os.path.join(base_dir, doc["tokens_file"]), m, d)
        return PolytopeConstraint.build(tokens, np.asarray(doc["lower"], dtype=np.float64),
                                        np.asarray(doc["upper"], dtype=np.float64))
    raise ValueError(f"unknown constraint kind {kind!r}")


def load_constraint(json_path: str) -> ConstraintSet:
    with open(json_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return constraint_from_dict(doc, base_dir=os.path.dirname(json_path) or ".")


def write_token_blob(path: str, tokens: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(tokens, dtype="<f8").tobytes())


def read_token_blob(path: str, m: int, d: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != m * d:
        raise ValueError(f"token blob {path} holds {raw.size} floats, expected {m * d}")
    return raw.reshape(m, d)
