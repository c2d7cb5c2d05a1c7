"""Dual-space denoising diffusion: schedule, tractable kernels, sampler, bound.

The forward chain injects Gaussian noise with per-step variances beta_t; its
marginals and posterior are available in closed form, which gives direct
(simulation-free) sampling of any noised state, an exact epsilon-regression
target, and a tractable variational bound. Steps are indexed t in {1..T} with
``alpha_bar[0] = 1`` so the t = 1 posterior is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .batch import DUAL, SampleBatch
from .errors import (DimensionMismatch, InvalidSchedule, NonFiniteElbo,
                     StepOutOfRange)
from .rng import stream
from .threads import blas_limit


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances with precomputed signal products.

    ``alpha_bars[t]`` is the product of (1 - beta_s) for s <= t, with
    ``alpha_bars[0] = 1`` exactly.
    """

    betas: np.ndarray                 # (T,)
    alpha_bars: np.ndarray            # (T+1,)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        betas.setflags(write=False)
        bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)
        if betas.ndim != 1 or len(betas) < 1:
            raise InvalidSchedule("need at least one step")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InvalidSchedule("every beta must lie in (0, 1)")
        if bars.shape != (len(betas) + 1,):
            raise InvalidSchedule("alpha_bars must have length T + 1")
        if bars[0] != 1.0:
            raise InvalidSchedule("alpha_bars[0] must be exactly 1")
        if np.any(np.diff(bars) >= 0.0):
            raise InvalidSchedule("alpha_bars must be strictly decreasing")

    @classmethod
    def from_betas(cls, betas, meta: dict | None = None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise InvalidSchedule("need at least one step")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InvalidSchedule("every beta must lie in (0, 1)")
        bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas=betas, alpha_bars=bars, meta=meta or {})

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t):
        """beta_t for t in {1..T}; accepts arrays."""
        t = _check_step(self, t)
        return self.betas[t - 1]

    def beta_tilde(self, t):
        """Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t; zero at t=1."""
        t = _check_step(self, t)
        bars = self.alpha_bars
        return (1.0 - bars[t - 1]) / (1.0 - bars[t]) * self.betas[t - 1]


def _check_step(schedule: NoiseSchedule, t):
    t = np.asarray(t)
    if t.dtype.kind not in "iu":
        raise StepOutOfRange(f"step indices must be integers, got dtype {t.dtype}")
    if np.any(t < 1) or np.any(t > schedule.T):
        raise StepOutOfRange(f"step must lie in [1, {schedule.T}]")
    return t


def make_linear_schedule(T: int, beta_min: float = 1e-4,
                         beta_max: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas from beta_min at t=1 to beta_max at t=T."""
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidSchedule(f"need 0 < beta_min <= beta_max < 1, "
                              f"got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T)
    meta = {"kind": "linear", "T": T, "beta_min": beta_min, "beta_max": beta_max}
    return NoiseSchedule.from_betas(betas, meta=meta)


def schedule_to_dict(schedule: NoiseSchedule) -> dict:
    if schedule.meta.get("kind") == "linear":
        return dict(schedule.meta)
    return {"kind": "explicit", "betas": schedule.betas.tolist()}


def schedule_from_dict(doc: dict) -> NoiseSchedule:
    if doc["kind"] == "linear":
        return make_linear_schedule(int(doc["T"]), float(doc["beta_min"]),
                                    float(doc["beta_max"]))
    if doc["kind"] == "explicit":
        return NoiseSchedule.from_betas(np.asarray(doc["betas"], dtype=np.float64))
    raise InvalidSchedule(f"unknown schedule kind {doc['kind']!r}")


# ---------------------------------------------------------------------------
# Tractable kernels
# ---------------------------------------------------------------------------


def q_sample(schedule: NoiseSchedule, y0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Noised state ``sqrt(abar_t) y0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one index per row of a batched ``y0``/``eps``.
    """
    t = _check_step(schedule, t)
    abar = schedule.alpha_bars[t]
    if np.ndim(abar) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * y0 + np.sqrt(1.0 - abar) * eps


def posterior_params(schedule: NoiseSchedule, y_t: np.ndarray, y0: np.ndarray, t):
    """Mean and shared variance of the forward posterior given (y_t, y0).

    At t = 1 the coefficients collapse to (1, 0): the mean is y0 and the
    variance is exactly zero.
    """
    t = _check_step(schedule, t)
    bars = schedule.alpha_bars
    beta = schedule.betas[t - 1]
    ab_prev, ab = bars[t - 1], bars[t]
    coef0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_t = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    beta_tilde = (1.0 - ab_prev) / (1.0 - ab) * beta
    # at t = 1 the coefficients reduce algebraically to (1, 0); make it exact
    coef0 = np.where(t == 1, 1.0, coef0)
    coef_t = np.where(t == 1, 0.0, coef_t)
    if np.ndim(coef0) == 1:
        coef0, coef_t = coef0[:, None], coef_t[:, None]
    return coef0 * y0 + coef_t * y_t, beta_tilde


def mu_from_eps(schedule: NoiseSchedule, y_t: np.ndarray, t,
                eps_hat: np.ndarray) -> np.ndarray:
    """Reverse mean ``(y_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(1-beta_t)``."""
    t = _check_step(schedule, t)
    beta = schedule.betas[t - 1]
    ab = schedule.alpha_bars[t]
    scale = beta / np.sqrt(1.0 - ab)
    denom = np.sqrt(1.0 - beta)
    if np.ndim(beta) == 1:
        scale, denom = scale[:, None], denom[:, None]
    return (y_t - scale * eps_hat) / denom


def regression_target(schedule: NoiseSchedule, y0_batch: np.ndarray, seed):
    """Draw per-row (t, y_t, eps) training targets; deterministic per seed."""
    y0 = np.atleast_2d(np.asarray(y0_batch, dtype=np.float64))
    n, d = y0.shape
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "targets")
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal((n, d))
    return t, q_sample(schedule, y0, t, eps), eps


# ---------------------------------------------------------------------------
# Ancestral sampler
# ---------------------------------------------------------------------------


def ancestral_sample(net, schedule: NoiseSchedule, n: int, seed: int,
                     chunk_size: int = 256) -> SampleBatch:
    """Run the reverse chain from a standard Gaussian prior.

    Each of the n chains draws its noise from its own counter-based stream
    keyed by (seed, chain index), so the randomness is identical however the
    chains are chunked; repeated calls with the same arguments are
    bit-identical. (Changing ``chunk_size`` regroups network batches, which
    can move float reductions by an ulp.) The final t = 1 transition is
    deterministic (zero posterior variance).
    """
    from .network import NetworkParams, forward  # deferred: network imports this module

    if isinstance(net, NetworkParams):
        d = net.arch.input_dim
        net_fn = lambda y, t: forward(net, y, t)
    elif callable(net):
        raise DimensionMismatch("pass NetworkParams; bare callables do not "
                                "declare an output dimension")
    else:
        raise DimensionMismatch(f"unsupported network object {type(net).__name__}")

    T = schedule.T
    out = np.empty((n, d))
    sqrt_bt = np.sqrt([schedule.beta_tilde(t) for t in range(1, T + 1)])
    with blas_limit():
        for start in range(0, n, chunk_size):
            stop = min(start + chunk_size, n)
            k = stop - start
            noise = np.empty((k, T, d))
            for i in range(k):
                noise[i] = stream(seed, "chain", start + i).standard_normal((T, d))
            y = noise[:, 0, :].copy()
            for t in range(T, 0, -1):
                mu = mu_from_eps(schedule, y, t, net_fn(y, t))
                y = mu if t == 1 else mu + sqrt_bt[t - 1] * noise[:, T - t + 1, :]
            out[start:stop] = y
    return SampleBatch(data=out.reshape(n, d), space=DUAL)


# ---------------------------------------------------------------------------
# Variational bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElboTerms:
    """Additive pieces of the bound; ``total`` is their exact sum (nats).

    The bound dominates the negative log-likelihood of the primal point, so
    smaller is better.
    """

    total: float
    log_det: float
    prior_kl: float
    interior_kl: float
    recon_nll: float


def elbo(x: np.ndarray, net, schedule: NoiseSchedule,
         constraint: geometry.ConstraintSet, n_mc: int = 1, seed: int = 0) -> float:
    return elbo_breakdown(x, net, schedule, constraint, n_mc=n_mc, seed=seed).total


def elbo_breakdown(x: np.ndarray, net, schedule: NoiseSchedule,
                   constraint: geometry.ConstraintSet, n_mc: int = 1,
                   seed: int = 0) -> ElboTerms:
    """Evaluate the bound at one primal point.

    The change of variables through the mirror map contributes the dual
    Hessian log-determinant at the mirrored point; the remaining terms are the
    standard Gaussian chain bound evaluated in the dual space, with the
    interior KLs in shared-variance mean-difference form and their outer
    expectations estimated from ``n_mc`` marginal draws per step.
    """
    from .network import forward

    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("elbo expects a single primal point of shape (d,)")
    y0 = geometry.mirror_forward(constraint, x)
    d = y0.shape[0]
    T = schedule.T
    bars = schedule.alpha_bars
    rng = stream(seed, "elbo")

    log_det = geometry.log_det_hessian_dual(constraint, y0)

    ab_T = bars[T]
    var_T = 1.0 - ab_T
    prior_kl = 0.5 * (d * var_T + ab_T * float(y0 @ y0) - d - d * math.log(var_T))

    interior_kl = 0.0
    if T >= 2:
        ts = np.repeat(np.arange(2, T + 1), n_mc)
        bt = schedule.beta_tilde(ts)
        if np.any(bt <= 0.0):
            raise NonFiniteElbo("zero posterior variance inside a KL denominator")
        eps = rng.standard_normal((len(ts), d))
        y_t = q_sample(schedule, y0[None, :], ts, eps)
        mu_theta = mu_from_eps(schedule, y_t, ts, forward(net, y_t, ts))
        mu_tilde, _ = posterior_params(schedule, y_t, y0[None, :], ts)
        kls = np.sum((mu_tilde - mu_theta) ** 2, axis=1) / (2.0 * bt)
        interior_kl = float(np.sum(kls)) / n_mc

    beta1 = schedule.betas[0]
    eps1 = rng.standard_normal((n_mc, d))
    y1 = q_sample(schedule, y0[None, :], np.ones(n_mc, dtype=int), eps1)
    mu1 = mu_from_eps(schedule, y1, np.ones(n_mc, dtype=int), forward(net, y1, np.ones(n_mc, dtype=int)))
    recon = float(np.mean(np.sum((y0[None, :] - mu1) ** 2, axis=1))) / (2.0 * beta1) \
        + 0.5 * d * math.log(2.0 * math.pi * beta1)

    total = log_det + prior_kl + interior_kl + recon
    if not math.isfinite(total):
        raise NonFiniteElbo("bound evaluated to a non-finite value")
    return ElboTerms(total=total, log_det=log_det, prior_kl=prior_kl,
                     interior_kl=interior_kl, recon_nll=recon)
