"""Command-line entry point: ``biasmargin <subcommand> --config cfg.json ...``.

Single-dataset subcommands (``sample``, ``events``, ``train``) draw the
dataset of trial ``--trial`` in grid cell ``--cell``, i.e. the same data
the sweep uses for that row.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .events import check_events, homogeneous_params, measure_perturbation
from .maxmargin import NotSeparable, gd_train, hard_margin_oracle, margin_stats
from .sampler import derive_seed, extend_dataset, sample_dataset
from .theory import (
    WrongRegime,
    corollary_exponents,
    error_bound_rhs,
    m_ge_one_check,
    thm1_conditions,
    thm2_conditions,
    thm3_conditions,
)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "trials", None) is not None:
        updates["trials"] = args.trials
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = str(args.out)
    return replace(cfg, **updates) if updates else cfg


def _out_dir(args, cfg: ex.ExperimentConfig | None = None) -> Path:
    out = Path(args.out if args.out is not None else (cfg.out_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _clean(obj):
    # JSON has no inf/nan; encode them as strings
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _cell_data(cfg: ex.ExperimentConfig, cell_id: int, trial: int):
    cells = cfg.cells()
    if not 0 <= cell_id < len(cells):
        raise SystemExit(f"cell {cell_id} out of range (grid has {len(cells)} cells)")
    cell = cells[cell_id]
    spec = cfg.spec_for(cell)
    data = sample_dataset(spec, cell["n"], derive_seed(cfg.seed, cell_id, trial))
    return cell, spec, data


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    cell, spec, data = _cell_data(cfg, args.cell, args.trial)
    out = _out_dir(args, cfg)
    np.savez_compressed(out / "dataset.npz", x=data.x, y=data.y, y_noisy=data.y_noisy, z=data.z, g=data.g, v=data.v)
    meta = {"cell": cell, "trial": args.trial, "seed": data.seed, "n": data.n, "flipped": int(data.flipped.sum()), "spec": spec.to_dict()}
    (out / "dataset.json").write_text(_dump(_clean(meta)))
    print(f"wrote {out / 'dataset.npz'} (n={data.n}, p={spec.p}, seed={data.seed})")
    return 0


def cmd_events(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    if args.trials is not None and args.trials > 1:
        mc = ex.run_event_mc(cfg, args.cell, args.trials)
        (out / "event_mc.json").write_text(_dump(_clean(mc.to_dict())))
        print(mc.to_markdown(), end="")
        return 0
    cell, spec, data = _cell_data(cfg, args.cell, args.trial)
    ext = extend_dataset(data)
    consts = cfg.consts
    params = homogeneous_params(spec, cell["n"], cfg.delta, consts.C1, consts.C2)
    tparams, has_tilde = ex.safe_tilde_params(params, spec)
    rec = {
        "params": params.to_record(),
        "tilde_params": tparams.to_record() if has_tilde else None,
        "events": check_events(ext, params, tparams).to_record(),
        "perturbation": measure_perturbation(ext).to_record(),
    }
    text = _dump(_clean(rec))
    (out / "events.json").write_text(text)
    print(text)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cell, spec, data = _cell_data(cfg, args.cell, args.trial)
    ext = extend_dataset(data)
    out = _out_dir(args, cfg)
    try:
        sol = hard_margin_oracle(ext.x_ext, data.y_noisy)
    except NotSeparable as exc:
        print(f"not separable: {exc}", file=sys.stderr)
        return 2
    rec = {"solution": sol.to_dict(), "certificate": sol.certificate, "margin_stats": margin_stats(sol, ext.x_ext, data.y_noisy, data.y)}
    if args.gd:
        trace, gd_sol = gd_train(ext.x_ext, data.y_noisy, reference=sol, max_iter=args.gd_iters)
        (out / "gd_trace.csv").write_text(trace.to_csv())
        rec["gd"] = {"final_cosine": trace.final_cosine, "converged": trace.converged, "step_rule": trace.step_rule, "lr": trace.lr}
        rec["gd_margin_stats"] = margin_stats(gd_sol, ext.x_ext, data.y_noisy, data.y)
    te = ex.estimate_test_error(sol, spec, cfg.m, derive_seed(cfg.seed, args.cell, args.trial, 1))
    rec["test_error"] = te.__dict__
    text = _dump(_clean(rec))
    (out / "solution.json").write_text(text)
    print(text)
    return 0


def cmd_bounds(args) -> int:
    cfg = _load_config(args)
    cells = cfg.cells()
    if not 0 <= args.cell < len(cells):
        raise SystemExit(f"cell {args.cell} out of range (grid has {len(cells)} cells)")
    cell = cells[args.cell]
    spec = cfg.spec_for(cell)
    n, consts = cell["n"], cfg.consts
    params = homogeneous_params(spec, n, cfg.delta, consts.C1, consts.C2)
    tparams, _ = ex.safe_tilde_params(params, spec)
    reports = []
    for fn in (thm1_conditions, thm3_conditions):
        try:
            reports.append(fn(spec, n, cfg.delta, consts, params, tparams))
        except WrongRegime:
            pass
    try:
        reports.append(thm2_conditions(spec, n, cfg.delta, consts))
    except WrongRegime:
        pass
    theorem = "thm3" if spec.eta > 0 else "thm1"
    bound = error_bound_rhs(theorem, spec, n, params, consts.c)
    g = spec.g_spec
    expo = corollary_exponents(spec.xi_spec.r, g.k, g.l)
    mchk = m_ge_one_check(params, spec.sigma.trace, n, cfg.delta, g.l)
    doc = {
        "cell": cell,
        "theorems": [r.to_dict() for r in reports],
        "bound": bound.to_dict(),
        "exponents": expo.to_dict(),
        "m_ge_one": {"ok": mchk.ok, "factors": mchk.factors, "failing": mchk.failing, "M": mchk.M},
    }
    out = _out_dir(args, cfg)
    (out / "bounds.json").write_text(_dump(_clean(doc)))
    md = "\n".join(r.to_markdown() for r in reports)
    md += f"\nerror bound ({theorem}): rhs = {bound.rhs:.6g}, components = {[f'{c:.4g}' for c in bound.components]}\n"
    (out / "bounds.md").write_text(md)
    print(md, end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = ex.run_sweep(cfg)
    out = _out_dir(args, cfg)
    path = ex.write_results(rows, out / "results.csv", cfg.homogeneous_baseline)
    counts = {s: sum(r["status"] == s for r in rows) for s in ex.STATUSES}
    print(f"wrote {path}: {len(rows)} rows {counts}")
    return 0


def cmd_report(args) -> int:
    rows = ex.read_results(args.results)
    out = Path(args.out) if args.out is not None else Path(args.results).parent
    try:
        rep = ex.report(rows, out, figures=not args.no_figures)
    except ex.EmptyInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(rep.markdown, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biasmargin", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=_u64, help="override the master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=_positive, help="worker processes")
        p.add_argument("--trials", type=_positive, help="trials per cell")

    def single(p):
        p.add_argument("--cell", type=int, default=0, help="grid cell index")
        p.add_argument("--trial", type=int, default=0, help="trial index within the cell")

    p = sub.add_parser("sample", help="draw one dataset")
    common(p), single(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("events", help="event report for one dataset, or frequencies with --trials > 1")
    common(p), single(p)
    p.set_defaults(func=cmd_events)

    p = sub.add_parser("train", help="max-margin solve, margin stats and test error")
    common(p), single(p)
    p.add_argument("--gd", action="store_true", help="also run gradient descent and compare directions")
    p.add_argument("--gd-iters", type=_positive, default=100_000, help="gradient descent iteration budget")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bounds", help="theorem conditions and error bound for one cell")
    common(p)
    p.add_argument("--cell", type=int, default=0, help="grid cell index")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("sweep", help="run the full grid and write results.csv")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate a results CSV")
    common(p, config=False)
    p.add_argument("--results", required=True, help="results CSV from sweep")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ex.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
