"""Batch command-line surface.

Subcommands: ``gen-data``, ``train``, ``sample``, ``eval``, ``elbo``, and the
``watermark`` group (``keygen``, ``embed``, ``detect``, ``fp-rate``). Every
command is deterministic given its flags and seeds, records its full
configuration in the artifacts it writes, and uses exit codes 0 (success),
1 (runtime failure), 2 (usage or validation error). ``MDM_THREADS`` caps BLAS
parallelism inside the numeric loops.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

CONFIG_VERSION = 1

_DATASET_CONSTRAINTS = {
    "gmm_ball": "ball",
    "spiral_ball": "ball",
    "dirichlet": "simplex",
    "hypercube_corners": "hypercube",
}


def _fail(msg: str, code: int) -> "SystemExit":
    print(f"error: {msg}", file=sys.stderr)
    return SystemExit(code)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _parse_alpha(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise _fail(f"could not parse --alpha {text!r}", 2)


def cmd_gen_data(args) -> int:
    from . import batch as batch_mod
    from .datasets import DatasetSpec

    params: dict = {}
    dim = args.d
    if args.kind == "dirichlet":
        if not args.alpha:
            raise _fail("--alpha is required for dirichlet", 2)
        params["alpha"] = _parse_alpha(args.alpha)
        dim = None
    elif args.kind == "spiral_ball":
        if args.sigma is not None:
            params["sigma"] = args.sigma
        dim = None
    else:
        if dim is None:
            raise _fail(f"--d is required for {args.kind}", 2)
        if args.variance is not None:
            params["variance"] = args.variance
        if args.kind == "hypercube_corners":
            params["mode"] = args.mode
        if args.kind == "gmm_ball" and args.radius_sq is not None:
            params["radius_sq"] = args.radius_sq

    spec = DatasetSpec(kind=args.kind, n_samples=args.n, seed=args.seed,
                       dim=dim, params=params)
    sb = spec.generate()
    _ensure_parent(args.out)
    batch_mod.save_batch(sb, args.out, extra={"dataset": spec.to_dict()})
    print(f"wrote {args.out}.csv ({sb.n} x {sb.dim})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_run_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if cfg.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise _fail(f"unsupported config version {cfg.get('version')}", 2)
    # flags win over the file
    if args.data is not None:
        cfg["data"] = args.data
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.steps is not None:
        cfg.setdefault("train", {})["n_steps"] = args.steps
    if args.batch_size is not None:
        cfg.setdefault("train", {})["batch_size"] = args.batch_size
    if args.lr is not None:
        cfg.setdefault("train", {})["learning_rate"] = args.lr
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    for key in ("data", "out"):
        if key not in cfg:
            raise _fail(f"missing {key!r} (set via --{key} or the config file)", 2)
    for suffix in (".csv", ".json"):
        if not os.path.exists(cfg["data"] + suffix):
            raise _fail(f"dataset file {cfg['data'] + suffix} does not exist", 2)

    from . import batch as batch_mod
    from . import geometry
    from .diffusion import make_linear_schedule, schedule_from_dict, schedule_to_dict
    from .network import Architecture, load_checkpoint, save_checkpoint
    from .training import TrainConfig, train, write_loss_trace
    from .errors import ConfigError, MirrorDiffError

    data = batch_mod.load_batch(cfg["data"])
    if data.constraint is None:
        raise _fail("data sidecar carries no constraint", 2)
    constraint = data.constraint

    sidecar_kind = None
    with open(cfg["data"] + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    if isinstance(side.get("dataset"), dict):
        sidecar_kind = side["dataset"].get("kind")
    ckind = geometry.constraint_to_dict(constraint).get("kind")
    if sidecar_kind and _DATASET_CONSTRAINTS.get(sidecar_kind) not in (None, ckind):
        raise _fail(f"dataset kind {sidecar_kind!r} is incompatible with "
                    f"constraint kind {ckind!r}", 2)
    if "constraint" in cfg:
        declared = cfg["constraint"].get("kind") if isinstance(cfg["constraint"], dict) else None
        if declared and declared != ckind:
            raise _fail(f"config constraint kind {declared!r} does not match "
                        f"data constraint {ckind!r}", 2)

    schedule = (schedule_from_dict(cfg["schedule"]) if "schedule" in cfg
                else make_linear_schedule(1000))
    arch_doc = dict(cfg.get("arch", {}))
    arch_doc.setdefault("input_dim", data.dim)
    try:
        arch = Architecture.from_dict(arch_doc)
        tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ConfigError, ValueError) as exc:
        raise _fail(str(exc), 2)
    if arch.input_dim != data.dim:
        raise _fail(f"arch input_dim {arch.input_dim} does not match data "
                    f"dimension {data.dim}", 2)

    init = None
    start_step = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        init, start_step = ck.params, ck.step
        if ck.params.arch != arch:
            raise _fail("checkpoint architecture does not match the config", 2)

    try:
        result = train(arch, tcfg, data, constraint, schedule,
                       init=init, start_step=start_step)
    except MirrorDiffError as exc:
        raise _fail(str(exc), 1)

    out = cfg["out"]
    _ensure_parent(out)
    save_checkpoint(out, result.params, result.ema_params, result.final_step,
                    train_config=tcfg.to_dict(), constraint=constraint,
                    schedule=schedule)
    write_loss_trace(out + ".loss.csv", result.trace)
    _write_json(out + ".run.json", {"version": CONFIG_VERSION,
                                    "config": {**cfg, "train": tcfg.to_dict(),
                                               "arch": arch.to_dict(),
                                               "schedule": schedule_to_dict(schedule)},
                                    "final_step": result.final_step})
    print(f"wrote {out}.json (step {result.final_step}), {out}.loss.csv")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    from . import batch as batch_mod
    from .batch import PRIMAL, SampleBatch
    from .diffusion import ancestral_sample
    from .geometry import mirror_inverse
    from .metrics import violation_rate
    from .network import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    if ck.constraint is None or ck.schedule is None:
        raise _fail("checkpoint lacks an embedded constraint or schedule", 2)
    params = ck.params if args.raw_params else ck.ema_params
    dual = ancestral_sample(params, ck.schedule, args.n, seed=args.seed)
    primal = mirror_inverse(ck.constraint, dual.data) if args.n else dual.data
    sb = SampleBatch(data=primal.reshape(args.n, params.arch.input_dim),
                     space=PRIMAL, constraint=ck.constraint)
    _ensure_parent(args.out)
    batch_mod.save_batch(sb, args.out, extra={
        "checkpoint": args.checkpoint, "seed": args.seed, "n": args.n,
        "ema": not args.raw_params})
    viol = violation_rate(ck.constraint, sb.data) if args.n else 0.0
    _write_json(args.out + ".report.json", {
        "n": args.n, "seed": args.seed, "violation_rate_percent": viol,
        "checkpoint": args.checkpoint, "step": ck.step})
    print(f"wrote {args.out}.csv (violation {viol}%)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    import numpy as np

    from . import batch as batch_mod
    from .errors import MirrorDiffError
    from .geometry import load_constraint
    from .metrics import evaluate_protocol

    xa = batch_mod.load_csv_matrix(args.a)
    xb = batch_mod.load_csv_matrix(args.b)
    if xa.shape[1] != xb.shape[1]:
        raise _fail(f"dimension mismatch: {args.a} has d={xa.shape[1]}, "
                    f"{args.b} has d={xb.shape[1]}", 2)
    constraint = load_constraint(args.constraint) if args.constraint else None
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    if "violation" in metrics and constraint is None:
        metrics = tuple(m for m in metrics if m != "violation")
    try:
        reports = evaluate_protocol(xa, xb, constraint=constraint, metrics=metrics,
                                    n_eval=args.n_eval, trials=args.trials,
                                    seed=args.seed, n_projections=args.projections)
    except MirrorDiffError as exc:
        raise _fail(str(exc), 1)
    doc = {
        "a": args.a, "b": args.b, "trials": args.trials, "seed": args.seed,
        "metrics": {name: rep.to_dict() for name, rep in reports.items()},
    }
    if args.out:
        _ensure_parent(args.out)
        _write_json(args.out, doc)
    for name, rep in reports.items():
        print(f"{name}: {rep.value:.6g} +- {rep.std:.2g} (n={rep.n_samples}, "
              f"trials={rep.n_trials})")

    if args.hist_out:
        i, j = (int(v) for v in args.hist_dims.split(","))
        bins = args.hist_bins
        lo = np.minimum(xa[:, [i, j]].min(axis=0), xb[:, [i, j]].min(axis=0))
        hi = np.maximum(xa[:, [i, j]].max(axis=0), xb[:, [i, j]].max(axis=0))
        edges = [np.linspace(lo[k], hi[k], bins + 1) for k in range(2)]
        ha, _, _ = np.histogram2d(xa[:, i], xa[:, j], bins=edges)
        hb, _, _ = np.histogram2d(xb[:, i], xb[:, j], bins=edges)
        _ensure_parent(args.hist_out)
        with open(args.hist_out + ".hist.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("bin_i,bin_j,count_a,count_b\n")
            for bi in range(bins):
                for bj in range(bins):
                    fh.write(f"{bi},{bj},{int(ha[bi, bj])},{int(hb[bi, bj])}\n")
        print(f"wrote {args.hist_out}.hist.csv")
    return 0


# ---------------------------------------------------------------------------
# elbo
# ---------------------------------------------------------------------------


def cmd_elbo(args) -> int:
    from . import batch as batch_mod
    from .diffusion import elbo_breakdown
    from .errors import MirrorDiffError
    from .network import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    if ck.constraint is None or ck.schedule is None:
        raise _fail("checkpoint lacks an embedded constraint or schedule", 2)
    params = ck.params if args.raw_params else ck.ema_params
    rows = batch_mod.load_csv_matrix(args.samples)
    totals = []
    n_err = 0
    _ensure_parent(args.out)
    with open(args.out + ".elbo.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,total,log_det,prior_kl,interior_kl,recon_nll,error\n")
        for idx, row in enumerate(rows):
            try:
                terms = elbo_breakdown(row, params, ck.schedule, ck.constraint,
                                       n_mc=args.n_mc, seed=args.seed + idx)
                totals.append(terms.total)
                fh.write(f"{idx},{terms.total:.17g},{terms.log_det:.17g},"
                         f"{terms.prior_kl:.17g},{terms.interior_kl:.17g},"
                         f"{terms.recon_nll:.17g},\n")
            except MirrorDiffError as exc:
                n_err += 1
                fh.write(f"{idx},,,,,,{type(exc).__name__}\n")
    summary = {
        "n_rows": len(rows), "n_ok": len(totals), "n_errors": n_err,
        "mean_bound_nats": (sum(totals) / len(totals)) if totals else None,
        "n_mc": args.n_mc, "seed": args.seed, "checkpoint": args.checkpoint,
    }
    _write_json(args.out + ".elbo.json", summary)
    print(f"wrote {args.out}.elbo.csv (ok {len(totals)}, errors {n_err})")
    return 1 if n_err else 0


# ---------------------------------------------------------------------------
# watermark
# ---------------------------------------------------------------------------


def cmd_watermark_keygen(args) -> int:
    from .watermark import keygen, save_key

    try:
        key = keygen(args.seed, args.m, args.d, args.b)
    except ValueError as exc:
        raise _fail(str(exc), 2)
    _ensure_parent(args.out)
    save_key(key, args.out)
    print(f"wrote {args.out}.json (m={args.m}, d={args.d}, b={args.b})")
    return 0


def cmd_watermark_embed(args) -> int:
    import numpy as np

    from . import batch as batch_mod
    from .watermark import load_key, project

    key = load_key(args.key)
    rows = batch_mod.load_csv_matrix(args.input)
    if rows.shape[1] != key.d:
        raise _fail(f"input width {rows.shape[1]} does not match key d={key.d}", 2)
    out = project(key, rows)
    _ensure_parent(args.out)
    header = ",".join(f"x{i}" for i in range(key.d))
    with open(args.out + ".csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, out, fmt="%.17g", delimiter=",")
    _write_json(args.out + ".json", {"key": args.key, "input": args.input,
                                     "n": int(rows.shape[0]), "d": key.d})
    print(f"wrote {args.out}.csv")
    return 0


def cmd_watermark_detect(args) -> int:
    from . import batch as batch_mod
    from .watermark import detect_mask, load_key

    key = load_key(args.key)
    rows = batch_mod.load_csv_matrix(args.input)
    if rows.shape[1] != key.d:
        raise _fail(f"input width {rows.shape[1]} does not match key d={key.d}", 2)
    mask = detect_mask(key, rows)
    n_pass = int(mask.sum())
    doc = {"n": int(len(mask)), "detected": n_pass,
           "precision_percent": 100.0 * n_pass / len(mask) if len(mask) else 0.0,
           "failed_indices": [int(i) for i in (~mask).nonzero()[0]]}
    if args.out:
        _ensure_parent(args.out)
        _write_json(args.out, doc)
    print(f"detected {n_pass}/{len(mask)}")
    return 0 if n_pass == len(mask) else 1


def cmd_watermark_fp_rate(args) -> int:
    from .watermark import fp_rate_gaussian, load_key

    key = load_key(args.key)
    fp = fp_rate_gaussian(key, n_mc=args.n, seed=args.seed)
    doc = {"analytic": fp.analytic, "monte_carlo": fp.monte_carlo,
           "stderr": fp.stderr, "n_mc": fp.n_mc, "m": key.m, "b": key.bound}
    if args.out:
        _ensure_parent(args.out)
        _write_json(args.out, doc)
    print(f"analytic {fp.analytic:.6g}  monte-carlo {fp.monte_carlo:.6g} "
          f"+- {fp.stderr:.2g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mirrordiff",
                                 description="constrained generation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic constrained dataset")
    g.add_argument("--kind", required=True,
                   choices=["gmm_ball", "spiral_ball", "dirichlet", "hypercube_corners"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output path stem")
    g.add_argument("--d", type=int)
    g.add_argument("--alpha", help="comma-separated Dirichlet concentrations")
    g.add_argument("--variance", type=float)
    g.add_argument("--sigma", type=float, help="spiral jitter")
    g.add_argument("--radius-sq", type=float, dest="radius_sq")
    g.add_argument("--mode", choices=["reject", "reflect"], default="reject")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a noise predictor on a dataset")
    t.add_argument("--config", help="JSON run config (flags override)")
    t.add_argument("--data", help="dataset path stem from gen-data")
    t.add_argument("--out", help="checkpoint path stem")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint stem to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate constraint-satisfying samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw-params", action="store_true", dest="raw_params",
                   help="sample with the raw (non-averaged) parameters")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compare two sample files")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--constraint", help="constraint JSON path")
    e.add_argument("--trials", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-eval", type=int, default=1000, dest="n_eval")
    e.add_argument("--projections", type=int, default=100)
    e.add_argument("--metrics", default="sw,w1,mmd,violation")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--hist-out", dest="hist_out", help="2-d histogram CSV stem")
    e.add_argument("--hist-dims", dest="hist_dims", default="0,1")
    e.add_argument("--hist-bins", dest="hist_bins", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    l = sub.add_parser("elbo", help="evaluate the likelihood bound per sample")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--samples", required=True, help="primal sample CSV")
    l.add_argument("--out", required=True, help="output path stem")
    l.add_argument("--n-mc", type=int, default=1, dest="n_mc")
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--raw-params", action="store_true", dest="raw_params")
    l.set_defaults(func=cmd_elbo)

    w = sub.add_parser("watermark", help="token-key workflows")
    wsub = w.add_subparsers(dest="wm_command", required=True)

    wk = wsub.add_parser("keygen")
    wk.add_argument("--seed", type=int, required=True)
    wk.add_argument("--m", type=int, required=True)
    wk.add_argument("--d", type=int, required=True)
    wk.add_argument("--b", type=float, required=True)
    wk.add_argument("--out", required=True)
    wk.set_defaults(func=cmd_watermark_keygen)

    we = wsub.add_parser("embed")
    we.add_argument("--key", required=True)
    we.add_argument("--input", required=True)
    we.add_argument("--out", required=True)
    we.set_defaults(func=cmd_watermark_embed)

    wd = wsub.add_parser("detect")
    wd.add_argument("--key", required=True)
    wd.add_argument("--input", required=True)
    wd.add_argument("--out")
    wd.set_defaults(func=cmd_watermark_detect)

    wf = wsub.add_parser("fp-rate")
    wf.add_argument("--key", required=True)
    wf.add_argument("--n", type=int, default=100_000)
    wf.add_argument("--seed", type=int, default=0)
    wf.add_argument("--out")
    wf.set_defaults(func=cmd_watermark_fp_rate)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
