"""Time-embedded residual MLP for noise prediction, with exact gradients.

The architecture follows the composition

    out = out_mod(norm(y_mod(y) + t_mod(timestep_embedding(t))))

where ``y_mod`` lifts the input to the hidden width and applies residual
blocks ``h <- h + res_mod(norm(h))`` with
``res_mod = Linear -> SiLU -> Linear -> SiLU -> Linear -> SiLU -> Linear``,
and ``t_mod = out_mod = Linear -> SiLU -> Linear``. All ``norm``s are group
normalizations over the hidden width. Parameters live in one flat float64
vector addressed through a name -> (offset, shape) layout table, and the loss
gradient is assembled by hand-derived reverse-mode rules (affine, SiLU, group
norm, residual add), so no autodiff framework is involved.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from .diffusion import (NoiseSchedule, regression_target, schedule_from_dict,
                        schedule_to_dict)
from .errors import DimensionMismatch, EmptyBatch, OddDimension
from .rng import stream

_GN_EPS = 1e-5


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dim: int = 128
    n_res_blocks: int = 3
    embed_dim: int = 128
    norm_groups: int = 8

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.hidden_dim < 1 or self.n_res_blocks < 1:
            raise ValueError("hidden_dim and n_res_blocks must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise OddDimension("embed_dim must be even and >= 2")
        if self.hidden_dim % self.norm_groups:
            raise ValueError("norm_groups must divide hidden_dim")

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "n_res_blocks": self.n_res_blocks, "embed_dim": self.embed_dim,
                "norm_groups": self.norm_groups}

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        return cls(**{k: int(v) for k, v in doc.items()})


def build_layout(arch: Architecture) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
    """Contiguous, non-overlapping (name, offset, shape) table."""
    d, h, e = arch.input_dim, arch.hidden_dim, arch.embed_dim
    entries: list[tuple[str, tuple[int, ...]]] = [("in.w", (d, h)), ("in.b", (h,))]
    for k in range(arch.n_res_blocks):
        entries += [(f"res{k}.norm.gamma", (h,)), (f"res{k}.norm.beta", (h,))]
        for j in range(4):
            entries += [(f"res{k}.lin{j}.w", (h, h)), (f"res{k}.lin{j}.b", (h,))]
    entries += [("tmod.lin0.w", (e, h)), ("tmod.lin0.b", (h,)),
                ("tmod.lin1.w", (h, h)), ("tmod.lin1.b", (h,)),
                ("out.norm.gamma", (h,)), ("out.norm.beta", (h,)),
                ("out.lin0.w", (h, h)), ("out.lin0.b", (h,)),
                ("out.lin1.w", (h, d)), ("out.lin1.b", (d,))]
    layout = []
    offset = 0
    for name, shape in entries:
        layout.append((name, offset, shape))
        offset += int(np.prod(shape))
    return tuple(layout)


@dataclass(frozen=True)
class NetworkParams:
    """Flat float64 parameter vector plus its architecture and layout table."""

    values: np.ndarray
    arch: Architecture
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        total = sum(int(np.prod(s)) for _, _, s in self.layout)
        if values.shape != (total,):
            raise DimensionMismatch(f"parameter vector has {values.shape}, "
                                    f"layout needs ({total},)")
        object.__setattr__(self, "_index",
                           {n: (off, shape) for n, off, shape in self.layout})

    def view(self, name: str) -> np.ndarray:
        try:
            off, shape = self._index[name]
        except KeyError:
            raise KeyError(name) from None
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def replace_values(self, values: np.ndarray) -> "NetworkParams":
        return NetworkParams(values=values, arch=self.arch, layout=self.layout)

    @property
    def n_params(self) -> int:
        return self.values.shape[0]


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(arch: Architecture, seed: int = 0) -> NetworkParams:
    """Truncated-normal fan-in init; group-norm scale 1; final affine zeroed."""
    layout = build_layout(arch)
    total = sum(int(np.prod(s)) for _, _, s in layout)
    values = np.zeros(total)
    params = NetworkParams(values=values, arch=arch, layout=layout)
    rng = stream(seed, "init")
    for name, off, shape in layout:
        block = values[off:off + int(np.prod(shape))].reshape(shape)
        if name.endswith(".w") and name != "out.lin1.w":
            block[...] = _truncated_normal(rng, shape, std=1.0 / math.sqrt(shape[0]))
        elif name.endswith("norm.gamma"):
            block[...] = 1.0
        # biases, norm shifts, and the final affine stay zero
    return params


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs at frequencies ``10000^(-2k/dim)``."""
    if dim % 2:
        raise OddDimension(f"embedding width must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2)
    omega = np.power(10000.0, -2.0 * k / dim)
    ang = t[:, None] * omega[None, :]
    emb = np.empty((t.shape[0], dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


_EMB_TABLE: dict[int, np.ndarray] = {}


def _embedding_lookup(tvec: np.ndarray, dim: int) -> np.ndarray:
    # Integer steps hit a cached table; anything else falls through.
    ti = tvec.astype(np.int64)
    if tvec.size and np.all(ti == tvec) and np.all(ti >= 0):
        tmax = int(ti.max())
        table = _EMB_TABLE.get(dim)
        if table is None or table.shape[0] <= tmax:
            table = timestep_embedding(np.arange(max(tmax + 1, 1025)), dim)
            _EMB_TABLE[dim] = table
        return table[ti]
    return timestep_embedding(tvec, dim)


def _silu(z):
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _silu_bwd(dout, z, sig):
    return dout * sig * (1.0 + z * (1.0 - sig))


def _groupnorm(x, gamma, beta, groups):
    n, c = x.shape
    s = c // groups
    xr = x.reshape(n, groups, s)
    mu = np.einsum("ngs->ng", xr) / s
    var = np.einsum("ngs,ngs->ng", xr, xr) / s - mu * mu
    ivar = 1.0 / np.sqrt(np.maximum(var, 0.0) + _GN_EPS)
    xhat = ((xr - mu[:, :, None]) * ivar[:, :, None]).reshape(n, c)
    return xhat * gamma + beta, (xhat, ivar)


def _groupnorm_bwd(dout, x_shape, gamma, groups, cache):
    xhat, ivar = cache
    n, c = x_shape
    s = c // groups
    dgamma = np.einsum("nc,nc->c", dout, xhat)
    dbeta = np.sum(dout, axis=0)
    dxh = (dout * gamma).reshape(n, groups, s)
    xh = xhat.reshape(n, groups, s)
    m1 = np.einsum("ngs->ng", dxh) / s
    m2 = np.einsum("ngs,ngs->ng", dxh, xh) / s
    dx = ivar[:, :, None] * (dxh - m1[:, :, None] - xh * m2[:, :, None])
    return dx.reshape(n, c), dgamma, dbeta


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward(params: NetworkParams, y: np.ndarray, t, keep_cache: bool):
    arch = params.arch
    y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y2.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"input has width {y2.shape[1]}, "
                                f"architecture expects {arch.input_dim}")
    tvec = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (y2.shape[0],))
    p = params.view
    g = arch.norm_groups
    cache: dict = {"y": y2}

    h = y2 @ p("in.w")
    h += p("in.b")
    blocks = []
    for k in range(arch.n_res_blocks):
        u, gn = _groupnorm(h, p(f"res{k}.norm.gamma"), p(f"res{k}.norm.beta"), g)
        acts = [u]
        v = u
        pre = []
        for j in range(4):
            z = v @ p(f"res{k}.lin{j}.w")
            z += p(f"res{k}.lin{j}.b")
            if j < 3:
                v, sig = _silu(z)
                pre.append((z, sig))
                acts.append(v)
            else:
                v = z
        blocks.append((h, gn, acts, pre))
        h = h + v

    emb = _embedding_lookup(tvec, arch.embed_dim)
    tz = emb @ p("tmod.lin0.w")
    tz += p("tmod.lin0.b")
    ts_act, ts_sig = _silu(tz)
    e = ts_act @ p("tmod.lin1.w")
    e += p("tmod.lin1.b")

    z0 = h + e
    u_out, gn_out = _groupnorm(z0, p("out.norm.gamma"), p("out.norm.beta"), g)
    oz = u_out @ p("out.lin0.w")
    oz += p("out.lin0.b")
    os_act, os_sig = _silu(oz)
    out = os_act @ p("out.lin1.w")
    out += p("out.lin1.b")

    if keep_cache:
        cache.update(blocks=blocks, emb=emb, tz=tz, ts_sig=ts_sig, ts_act=ts_act,
                     z0=z0, gn_out=gn_out, u_out=u_out, oz=oz, os_sig=os_sig,
                     os_act=os_act)
        return out, cache
    return out, None


def forward(params: NetworkParams, y: np.ndarray, t) -> np.ndarray:
    """Predict the injected noise for dual points ``y`` at steps ``t``."""
    out, _ = _forward(params, y, t, keep_cache=False)
    return out if np.ndim(y) > 1 else out[0]


def _backward(params: NetworkParams, cache: dict, dout: np.ndarray) -> np.ndarray:
    arch = params.arch
    p = params.view
    g = arch.norm_groups
    grad = np.zeros_like(params.values)
    gview = NetworkParams(values=grad, arch=arch, layout=params.layout).view

    # out_mod
    gview("out.lin1.w")[...] = cache["os_act"].T @ dout
    gview("out.lin1.b")[...] = dout.sum(axis=0)
    d_os = dout @ p("out.lin1.w").T
    d_oz = _silu_bwd(d_os, cache["oz"], cache["os_sig"])
    gview("out.lin0.w")[...] = cache["u_out"].T @ d_oz
    gview("out.lin0.b")[...] = d_oz.sum(axis=0)
    d_uout = d_oz @ p("out.lin0.w").T
    d_z0, dgam, dbet = _groupnorm_bwd(d_uout, cache["z0"].shape,
                                      p("out.norm.gamma"), g, cache["gn_out"])
    gview("out.norm.gamma")[...] = dgam
    gview("out.norm.beta")[...] = dbet

    # t_mod (z0 = h + e)
    d_e = d_z0
    gview("tmod.lin1.w")[...] = cache["ts_act"].T @ d_e
    gview("tmod.lin1.b")[...] = d_e.sum(axis=0)
    d_ts = d_e @ p("tmod.lin1.w").T
    d_tz = _silu_bwd(d_ts, cache["tz"], cache["ts_sig"])
    gview("tmod.lin0.w")[...] = cache["emb"].T @ d_tz
    gview("tmod.lin0.b")[...] = d_tz.sum(axis=0)

    # residual stack, walked backwards
    dh = d_z0
    for k in reversed(range(arch.n_res_blocks)):
        h_in, gn, acts, pre = cache["blocks"][k]
        dv = dh  # gradient w.r.t. the res_mod output
        for j in reversed(range(4)):
            a_in = acts[j]
            gview(f"res{k}.lin{j}.w")[...] = a_in.T @ dv
            gview(f"res{k}.lin{j}.b")[...] = dv.sum(axis=0)
            dv = dv @ p(f"res{k}.lin{j}.w").T
            if j > 0:
                z, sig = pre[j - 1]
                dv = _silu_bwd(dv, z, sig)
        du = dv
        dh_norm, dgam, dbet = _groupnorm_bwd(du, h_in.shape,
                                             p(f"res{k}.norm.gamma"), g, gn)
        gview(f"res{k}.norm.gamma")[...] = dgam
        gview(f"res{k}.norm.beta")[...] = dbet
        dh = dh + dh_norm

    gview("in.w")[...] = cache["y"].T @ dh
    gview("in.b")[...] = dh.sum(axis=0)
    return grad


def loss_and_grad(params: NetworkParams, y0_batch: np.ndarray,
                  schedule: NoiseSchedule, seed) -> tuple[float, np.ndarray]:
    """Mean squared noise-prediction error over a batch and its exact gradient.

    Per row the loss is the squared l2 norm of (eps - eps_hat); the reported
    value is the mean over rows, so an identically-zero network scores about
    the input dimension.
    """
    y0 = np.atleast_2d(np.asarray(y0_batch, dtype=np.float64))
    n = y0.shape[0]
    if n == 0:
        raise EmptyBatch("loss_and_grad needs at least one sample")
    t, y_t, eps = regression_target(schedule, y0, seed)
    out, cache = _forward(params, y_t, t, keep_cache=True)
    resid = out - eps
    loss = float(np.sum(resid * resid)) / n
    grad = _backward(params, cache, 2.0 * resid / n)
    return loss, grad


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    params: NetworkParams
    ema_params: NetworkParams
    step: int
    train_config: dict | None
    constraint: geometry.ConstraintSet | None
    schedule: NoiseSchedule | None


def save_checkpoint(stem: str, params: NetworkParams, ema_params: NetworkParams,
                    step: int, train_config: dict | None = None,
                    constraint: geometry.ConstraintSet | None = None,
                    schedule: NoiseSchedule | None = None) -> str:
    """Write ``<stem>.json`` plus little-endian float64 blobs for both vectors."""
    tokens_file = None
    if isinstance(constraint, geometry.PolytopeConstraint):
        tokens_file = os.path.basename(stem) + geometry.TOKEN_BLOB_SUFFIX
        geometry.write_token_blob(stem + geometry.TOKEN_BLOB_SUFFIX, constraint.tokens)
    manifest = {
        "version": 1,
        "arch": params.arch.to_dict(),
        "layout": [[n, off, list(shape)] for n, off, shape in params.layout],
        "n_params": params.n_params,
        "step": step,
        "train_config": train_config,
        "constraint": (None if constraint is None
                       else geometry.constraint_to_dict(constraint, tokens_file)),
        "schedule": None if schedule is None else schedule_to_dict(schedule),
    }
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(stem + ".params.bin", "wb") as fh:
        fh.write(params.values.astype("<f8").tobytes())
    with open(stem + ".ema.bin", "wb") as fh:
        fh.write(ema_params.values.astype("<f8").tobytes())
    return stem + ".json"


def load_checkpoint(stem: str) -> Checkpoint:
    with open(stem + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    arch = Architecture.from_dict(manifest["arch"])
    layout = tuple((n, int(off), tuple(shape)) for n, off, shape in manifest["layout"])
    if layout != build_layout(arch):
        raise DimensionMismatch("checkpoint layout does not match its architecture")
    n_params = int(manifest["n_params"])

    def read_blob(path):
        raw = np.fromfile(path, dtype="<f8")
        if raw.size != n_params:
            raise DimensionMismatch(f"{path} holds {raw.size} floats, "
                                    f"manifest says {n_params}")
        return raw.astype(np.float64)

    params = NetworkParams(values=read_blob(stem + ".params.bin"), arch=arch, layout=layout)
    ema = NetworkParams(values=read_blob(stem + ".ema.bin"), arch=arch, layout=layout)
    constraint = None
    if manifest.get("constraint") is not None:
        constraint = geometry.constraint_from_dict(manifest["constraint"],
                                                   base_dir=os.path.dirname(stem) or ".")
    schedule = None
    if manifest.get("schedule") is not None:
        schedule = schedule_from_dict(manifest["schedule"])
    return Checkpoint(params=params, ema_params=ema, step=int(manifest["step"]),
                      train_config=manifest.get("train_config"),
                      constraint=constraint, schedule=schedule)
