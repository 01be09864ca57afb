"""Monte Carlo harness: test-error estimation, event frequencies, grid sweeps and reports.

Seeding: every trial draws its training set from
``derive_seed(master, cell_id, trial)`` and its test set from
``derive_seed(master, cell_id, trial, 1)``; test chunks use
``derive_seed(test_seed, chunk_index)``. Rows are sorted by
``(cell_id, trial)`` before writing, so output does not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy.stats import binomtest

from .events import (
    DegenerateDenominator,
    ZeroNormRow,
    check_events,
    homogeneous_params,
    measure_perturbation,
    perturbation_coverage,
    TildeParams,
    tilde_params,
)
from .maxmargin import NotSeparable, Solution, hard_margin_oracle, margin_stats
from .sampler import ModelSpec, derive_seed, extend_dataset, model_spec_from_dict, sample_dataset, sample_scores
from .theory import ConstantsConfig, error_bound_rhs, thm1_conditions, thm3_conditions

GRID_AXES = ("n", "p", "mu_norm", "eta")
MU_MODES = ("absolute", "corollary")
STATUSES = ("ok", "not_separable", "zero_norm", "error")

RESULT_COLUMNS = [
    "cell_id", "n", "p", "mu_norm", "eta", "trial", "seed", "status",
    "eps_meas", "eps_tilde_meas", "P_spec", "P_frob", "B_pert",
    "E1", "E2", "E3", "E4", "E5", "tE1", "tE2", "tE3", "tE4", "tE5", "omega1",
    "min_margin", "interpolated", "clean_err", "clean_err_lo", "clean_err_hi", "noisy_err",
    "bound_rhs", "thm_conditions_pass",
]  # fmt: skip
HOMOG_COLUMNS = ["homog_status", "homog_min_margin", "homog_clean_err", "homog_noisy_err"]

_INT_COLS = {"cell_id", "n", "p", "trial", "seed"}
_STR_COLS = {"status", "homog_status"}
_BOOL_COLS = {"E1", "E2", "E3", "E4", "E5", "tE1", "tE2", "tE3", "tE4", "tE5", "omega1", "interpolated", "thm_conditions_pass"}

_CHUNK_ENTRIES = 1 << 22


class ConfigError(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """A sweep over ``grid`` with the model ``model`` as a template.

    ``model`` holds the ``sigma``, ``g`` and ``xi`` entries of a model
    document; ``p``, ``mu_norm`` and ``eta`` come from the grid. With
    ``mu_norm_mode='corollary'`` a grid value v means ||mu|| = v (p/n)^{1/4}.
    """

    model: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    mu_norm_mode: str = "absolute"
    trials: int = 1
    m: int = 100_000
    seed: int = 0
    workers: int = 1
    constants: dict = field(default_factory=dict)
    delta: float = 0.1
    out_dir: str = "results"
    homogeneous_baseline: bool = False

    def __post_init__(self):
        _check_keys(self.model, {"sigma", "g", "xi"}, "model template")
        _check_keys(self.grid, set(GRID_AXES), "grid")
        if self.mu_norm_mode not in MU_MODES:
            raise ConfigError(f"mu_norm_mode must be one of {MU_MODES}")
        for name in ("trials", "m", "workers"):
            val = getattr(self, name)
            if not (isinstance(val, int) and not isinstance(val, bool) and val >= 1):
                raise ConfigError(f"{name} must be an integer >= 1, got {val!r}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not (0.0 < self.delta < 0.5):
            raise ConfigError(f"delta must lie in (0, 1/2), got {self.delta}")
        for v in self.axis("n") + self.axis("p"):
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"grid n and p values must be integers >= 1, got {v!r}")
        for v in self.axis("mu_norm"):
            if not v >= 0:
                raise ConfigError(f"grid mu_norm values must be >= 0, got {v!r}")
        for v in self.axis("eta"):
            if not (0.0 <= v < 0.5):
                raise ConfigError(f"grid eta values must lie in [0, 1/2), got {v!r}")
        try:
            self.consts
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad constants: {exc}") from exc

    def axis(self, name: str) -> list:
        return list(self.grid.get(name, []))

    @property
    def consts(self) -> ConstantsConfig:
        return ConstantsConfig(**self.constants)

    def cells(self) -> list[dict]:
        """Grid cells in row-major (n, p, mu_norm, eta) order."""
        out = []
        for i, (n, p, mu, eta) in enumerate(itertools.product(*(self.axis(a) for a in GRID_AXES))):
            mu_norm = float(mu) * (p / n) ** 0.25 if self.mu_norm_mode == "corollary" else float(mu)
            out.append({"cell_id": i, "n": n, "p": p, "mu_norm": mu_norm, "eta": float(eta)})
        return out

    def spec_for(self, cell: dict) -> ModelSpec:
        doc = dict(self.model)
        doc.update(p=cell["p"], mu_norm=cell["mu_norm"], eta=cell["eta"])
        return model_spec_from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        _check_keys(d, {f for f in cls.__dataclass_fields__}, "config")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for cell in cfg.cells():
            cfg.spec_for(cell)  # surfaces moment violations before any work
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _check_keys(d: dict, allowed: set[str], what: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# Test error
# ---------------------------------------------------------------------------


def wilson(k: int, m: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(m)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class ErrorEstimate:
    clean_err: float
    clean_lo: float
    clean_hi: float
    noisy_err: float
    noisy_lo: float
    noisy_hi: float
    m: int


def estimate_test_error(solution: Solution, spec: ModelSpec, m: int, seed: int) -> ErrorEstimate:
    """Fresh-sample error of sign(<w, x> + b) against clean and observed labels.

    A score of exactly 0 counts as an error for both.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    w, b = np.asarray(solution.w, dtype=float), solution.b
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise ValueError("solution must be finite")
    chunk = max(1, _CHUNK_ENTRIES // spec.p)
    clean = noisy = 0
    for j, start in enumerate(range(0, m, chunk)):
        y, y_noisy, score = sample_scores(spec, w, b, min(chunk, m - start), derive_seed(seed, j))
        clean += int(np.sum(y * score <= 0))
        noisy += int(np.sum(y_noisy * score <= 0))
    return ErrorEstimate(clean / m, *wilson(clean, m), noisy / m, *wilson(noisy, m), m)


# ---------------------------------------------------------------------------
# Event Monte Carlo
# ---------------------------------------------------------------------------

EVENT_KEYS = ("E1", "E2", "E3", "E4", "E5", "tE1", "tE2", "tE3", "tE4", "tE5", "omega1")


@dataclass
class EventFrequency:
    name: str
    holds: int
    trials: int
    freq: float
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EventMC:
    cell: dict
    rows: list[EventFrequency]
    failures: dict[str, int]
    delta: float

    def __getitem__(self, name: str) -> EventFrequency:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"cell": self.cell, "delta": self.delta, "rows": [r.to_dict() for r in self.rows], "failures": self.failures}

    def to_markdown(self) -> str:
        lines = ["| event | holds | trials | freq | 95% CI |", "|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.name} | {r.holds} | {r.trials} | {r.freq:.4f} | [{r.lo:.4f}, {r.hi:.4f}] |")
        return "\n".join(lines) + "\n"


TILDE_KEYS = ("tE1", "tE2", "tE3", "tE4", "tE5")


def safe_tilde_params(params, spec: ModelSpec) -> tuple[TildeParams, bool]:
    """Tilde parameters, or an all-NaN stand-in when eps >= 4 leaves them undefined."""
    try:
        return tilde_params(params, spec), True
    except DegenerateDenominator:
        nan = math.nan
        return TildeParams(nan, nan, nan, nan, nan, nan, nan, nan, nan, params.delta, params.delta, params.M >= 1), False


def _freq(name: str, hits: Iterable[bool]) -> EventFrequency:
    hits = list(hits)
    t, h = len(hits), int(sum(hits))
    lo, hi = wilson(h, t) if t else (math.nan, math.nan)
    return EventFrequency(name, h, t, h / t if t else math.nan, lo, hi)


def run_event_mc(config: ExperimentConfig, cell_id: int = 0, trials: int | None = None) -> EventMC:
    """Holding frequencies of every event plus the two perturbation-bound coverages.

    ``config.delta`` serves as delta, delta_E1 and delta_E4. Trials that
    fail (e.g. a zero-norm noise row) are counted in ``failures``.
    """
    cell = config.cells()[cell_id]
    spec = config.spec_for(cell)
    n, consts = cell["n"], config.consts
    trials = config.trials if trials is None else trials
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    params = homogeneous_params(spec, n, config.delta, consts.C1, consts.C2)
    tparams, has_tilde = safe_tilde_params(params, spec)
    keys = EVENT_KEYS if has_tilde else tuple(k for k in EVENT_KEYS if k not in TILDE_KEYS)
    hits: dict[str, list[bool]] = {k: [] for k in keys + ("P_le_T", "Bpert_le_bprho")}
    failures: dict[str, int] = {}
    for t in range(trials):
        try:
            ext = extend_dataset(sample_dataset(spec, n, derive_seed(config.seed, cell_id, t)))
            pert = measure_perturbation(ext)
            rep = check_events(ext, params, tparams)
            for k in keys:
                hits[k].append(bool(getattr(rep, k)))
            try:
                ok_p, ok_b, _, _ = perturbation_coverage(ext, rep.eps_meas, pert, config.delta, config.delta)
            except DegenerateDenominator:
                failures["DegenerateDenominator"] = failures.get("DegenerateDenominator", 0) + 1
                continue
            hits["P_le_T"].append(ok_p)
            hits["Bpert_le_bprho"].append(ok_b)
        except ZeroNormRow:
            failures["ZeroNormRow"] = failures.get("ZeroNormRow", 0) + 1
    rows = [_freq(k, v) for k, v in hits.items() if v]
    return EventMC(cell, rows, failures, config.delta)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _blank_row(cell: dict, trial: int, seed: int, homog: bool) -> dict:
    row = {c: None for c in RESULT_COLUMNS + (HOMOG_COLUMNS if homog else [])}
    row.update(cell)
    row.update(trial=trial, seed=seed, status="error")
    return row


def run_trial(config: ExperimentConfig, cell: dict, trial: int) -> dict:
    """One (cell, trial) unit. Failures are recorded in ``status``, never raised."""
    cid = cell["cell_id"]
    seed = derive_seed(config.seed, cid, trial)
    row = _blank_row(cell, trial, seed, config.homogeneous_baseline)
    try:
        spec = config.spec_for(cell)
        n, consts = cell["n"], config.consts
        data = sample_dataset(spec, n, seed)
        ext = extend_dataset(data)
        params = homogeneous_params(spec, n, config.delta, consts.C1, consts.C2)
        tparams, has_tilde = safe_tilde_params(params, spec)

        pert = measure_perturbation(ext)
        row.update(P_spec=pert.P_spec, P_frob=pert.P_frob, B_pert=pert.B_pert)
        ev = check_events(ext, params, tparams)
        row.update({k: getattr(ev, k) for k in EVENT_KEYS if has_tilde or k not in TILDE_KEYS})
        row.update(eps_meas=ev.eps_meas, eps_tilde_meas=ev.eps_tilde_meas)
        thm = thm3_conditions if spec.eta > 0 else thm1_conditions
        # NaN tilde parameters make every tilde-dependent condition fail
        row["thm_conditions_pass"] = thm(spec, n, config.delta, consts, params, tparams).all_satisfied()
        theorem = "thm3" if spec.eta > 0 else "thm1"
        row["bound_rhs"] = error_bound_rhs(theorem, spec, n, params, consts.c).rhs

        test_seed = derive_seed(config.seed, cid, trial, 1)
        try:
            sol = hard_margin_oracle(ext.x_ext, data.y_noisy)
        except NotSeparable:
            row["status"] = "not_separable"
        else:
            ms = margin_stats(sol, ext.x_ext, data.y_noisy)
            te = estimate_test_error(sol, spec, config.m, test_seed)
            row.update(
                status="ok",
                min_margin=ms["min_margin"],
                interpolated=ms["interpolated"],
                clean_err=te.clean_err,
                clean_err_lo=te.clean_lo,
                clean_err_hi=te.clean_hi,
                noisy_err=te.noisy_err,
            )
        if config.homogeneous_baseline:
            try:
                hsol = hard_margin_oracle(data.x, data.y_noisy, bias=False)
            except NotSeparable:
                row["homog_status"] = "not_separable"
            else:
                hte = estimate_test_error(hsol, spec, config.m, test_seed)
                row.update(
                    homog_status="ok",
                    homog_min_margin=float(np.min(data.y_noisy * (data.x @ hsol.w))),
                    homog_clean_err=hte.clean_err,
                    homog_noisy_err=hte.noisy_err,
                )
    except ZeroNormRow:
        row["status"] = "zero_norm"
    except Exception:  # noqa: BLE001 - a sweep must survive any single trial
        row["status"] = "error"
    return row


def _run_unit(args: tuple[dict, dict, int]) -> dict:
    cfg_dict, cell, trial = args
    return run_trial(ExperimentConfig(**cfg_dict), cell, trial)


def run_sweep(config: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """All (cell, trial) rows sorted by (cell_id, trial)."""
    workers = config.workers if workers is None else workers
    units = [(cell, t) for cell in config.cells() for t in range(config.trials)]
    if workers <= 1 or len(units) <= 1:
        rows = [run_trial(config, cell, t) for cell, t in units]
    else:
        cfg_dict = config.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_unit, [(cfg_dict, c, t) for c, t in units]))
    rows.sort(key=lambda r: (r["cell_id"], r["trial"]))
    return rows


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(col: str, s: str) -> Any:
    if s == "":
        return None
    if col in _STR_COLS:
        return s
    if col in _INT_COLS:
        return int(s)
    if col in _BOOL_COLS:
        if s not in ("true", "false"):
            raise ValueError(f"bad boolean {s!r} in column {col}")
        return s == "true"
    return float(s)


def columns_for(rows: list[dict], homogeneous: bool | None = None) -> list[str]:
    if homogeneous is None:
        homogeneous = any("homog_status" in r for r in rows)
    return RESULT_COLUMNS + (HOMOG_COLUMNS if homogeneous else [])


def rows_to_csv(rows: list[dict], homogeneous: bool | None = None) -> str:
    cols = columns_for(rows, homogeneous)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for r in sorted(rows, key=lambda r: (r["cell_id"], r["trial"])):
        wr.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if header is None:
        return []
    if header[: len(RESULT_COLUMNS)] != RESULT_COLUMNS:
        raise ValueError("unexpected results header")
    return [{c: _parse(c, s) for c, s in zip(header, rec)} for rec in rd]


def write_results(rows: list[dict], path: str | os.PathLike, homogeneous: bool | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows, homogeneous))
    return path


def read_results(path: str | os.PathLike) -> list[dict]:
    return rows_from_csv(Path(path).read_text())


# ---------------------------------------------------------------------------
# Aggregation and reports
# ---------------------------------------------------------------------------


def _median(vals: Iterable[Any]) -> float:
    xs = [float(v) for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return statistics.median(xs) if xs else math.nan


def _rate(vals: Iterable[Any]) -> float:
    xs = [bool(v) for v in vals if v is not None]
    return sum(xs) / len(xs) if xs else math.nan


def _ratio(a: float, b: float) -> float:
    if math.isnan(a) or math.isnan(b):
        return math.nan
    return a / b if b > 0 else math.inf


def _summarize(rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    clean = _median(r["clean_err"] for r in ok)
    rhs = _median(r["bound_rhs"] for r in rows)
    out = {
        "trials": len(rows),
        "ok": len(ok),
        "interpolation_rate": _rate(r["interpolated"] for r in ok),
        "median_clean_err": clean,
        "median_excess_err": _median(r["clean_err"] - r["eta"] for r in ok if r["clean_err"] is not None),
        "median_noisy_err": _median(r["noisy_err"] for r in ok),
        "cond_pass_rate": _rate(r["thm_conditions_pass"] for r in rows),
        "median_bound_rhs": rhs,
        "median_bound_excess": _median(r["bound_rhs"] - r["eta"] for r in rows if r["bound_rhs"] is not None),
        "rhs_over_empirical": _ratio(rhs, clean),
    }
    hom = [r for r in ok if r.get("homog_status") == "ok"]
    if hom:
        out["median_homog_minus_inhom"] = _median(r["homog_clean_err"] - r["clean_err"] for r in hom)
    return out


def aggregate_cells(rows: list[dict]) -> list[dict]:
    if not rows:
        raise EmptyInput("no result rows to aggregate")
    out = []
    for cid, grp in itertools.groupby(sorted(rows, key=lambda r: (r["cell_id"], r["trial"])), key=lambda r: r["cell_id"]):
        grp = list(grp)
        first = grp[0]
        rec = {"cell_id": cid, **{a: first[a] for a in GRID_AXES}}
        rec.update(_summarize(grp))
        out.append(rec)
    return out


def aggregate_axis(rows: list[dict], axis: str) -> list[dict]:
    if not rows:
        raise EmptyInput("no result rows to aggregate")
    keyed = sorted(rows, key=lambda r: r[axis])
    return [{axis: k, **_summarize(list(g))} for k, g in itertools.groupby(keyed, key=lambda r: r[axis])]


def _dicts_to_csv(recs: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    cols = list(recs[0]) if recs else []
    for r in recs:
        cols += [c for c in r if c not in cols]
    wr.writerow(cols)
    for r in recs:
        wr.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _md_num(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render_markdown(cells: list[dict]) -> str:
    cols = list(cells[0])
    for c in cells:
        cols += [k for k in c if k not in cols]
    lines = [
        "# Sweep summary",
        "",
        "Excess error is the clean test error minus the noise rate eta. "
        "`rhs_over_empirical` divides the median error-bound value by the median clean error.",
        "",
        "| " + " | ".join(cols) + " |",
        "|" + "---|" * len(cols),
    ]
    for c in cells:
        lines.append("| " + " | ".join(_md_num(c.get(k)) for k in cols) + " |")
    return "\n".join(lines) + "\n"


@dataclass
class Report:
    markdown: str
    cells: list[dict]
    axes: dict[str, list[dict]]
    files: list[Path] = field(default_factory=list)


def report(rows: list[dict], out_dir: str | os.PathLike | None = None, figures: bool = True) -> Report:
    """Per-cell summary, per-axis aggregates and, with ``out_dir``, files on disk.

    Writes ``summary.md``, ``cells.csv``, ``by_<axis>.csv`` and one PNG per
    axis that takes more than one value.
    """
    cells = aggregate_cells(rows)
    axes = {a: aggregate_axis(rows, a) for a in GRID_AXES}
    md = render_markdown(cells)
    rep = Report(md, cells, axes)
    if out_dir is None:
        return rep
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig_names = []
    if figures:
        from .plotting import plot_axis

        for a, recs in axes.items():
            if len(recs) > 1:
                fig_names.append(plot_axis(recs, a, out / f"excess_error_by_{a}.png"))
    if fig_names:
        md += "\n" + "\n".join(f"![{p.stem}]({p.name})" for p in fig_names) + "\n"
        rep.markdown = md
    (out / "summary.md").write_text(md)
    (out / "cells.csv").write_text(_dicts_to_csv(cells))
    rep.files = [out / "summary.md", out / "cells.csv"]
    for a, recs in axes.items():
        (out / f"by_{a}.csv").write_text(_dicts_to_csv(recs))
        rep.files.append(out / f"by_{a}.csv")
    rep.files += fig_names
    return rep
