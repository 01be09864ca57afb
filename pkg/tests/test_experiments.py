import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from biasmargin.experiments import (
    HOMOG_COLUMNS,
    RESULT_COLUMNS,
    ConfigError,
    EmptyInput,
    ExperimentConfig,
    aggregate_cells,
    estimate_test_error,
    report,
    rows_from_csv,
    rows_to_csv,
    run_event_mc,
    run_sweep,
    run_trial,
    wilson,
)
from biasmargin.maxmargin import Solution
from biasmargin.sampler import model_spec_from_dict, sample_scores


def _cfg(**kw):
    base = dict(grid={"n": [10], "p": [300], "mu_norm": [3.0], "eta": [0.0]}, trials=1, m=2000, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


def _sol(w, b=0.0):
    return Solution(np.append(np.asarray(w, dtype=float), b), np.zeros(1))


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return a == b


class TestConfig:
    def test_round_trip(self):
        cfg = _cfg(model={"xi": {"family": "gaussian"}})
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"grid": {}, "trails": 3})

    def test_unknown_grid_axis(self):
        with pytest.raises(ConfigError):
            _cfg(grid={"n": [5], "q": [1]})

    def test_unknown_model_key(self):
        with pytest.raises(ConfigError):
            _cfg(model={"mu": [1.0]})

    @pytest.mark.parametrize("field", ["trials", "m", "workers"])
    def test_zero_counts_rejected(self, field):
        with pytest.raises(ConfigError):
            _cfg(**{field: 0})

    @pytest.mark.parametrize("eta", [0.5, -0.1])
    def test_bad_eta(self, eta):
        with pytest.raises(ConfigError):
            _cfg(grid={"n": [5], "p": [10], "mu_norm": [1.0], "eta": [eta]})

    def test_bad_seed_and_delta(self):
        with pytest.raises(ConfigError):
            _cfg(seed=-1)
        with pytest.raises(ConfigError):
            _cfg(seed=2**64)
        with pytest.raises(ConfigError):
            _cfg(delta=0.7)

    def test_bad_constants(self):
        with pytest.raises(ConfigError):
            _cfg(constants={"C_H": 1.5})
        with pytest.raises(ConfigError):
            _cfg(constants={"D": 1.0})

    def test_moment_violation_surfaces_on_load(self):
        doc = _cfg(model={"xi": {"family": "standardized-student-t", "df": 3}}).to_dict()
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(doc)

    def test_cells_row_major(self):
        cfg = _cfg(grid={"n": [5, 6], "p": [10, 20], "mu_norm": [1.0], "eta": [0.0, 0.1]})
        cells = cfg.cells()
        assert [c["cell_id"] for c in cells] == list(range(8))
        assert [(c["n"], c["p"], c["eta"]) for c in cells[:3]] == [(5, 10, 0.0), (5, 10, 0.1), (5, 20, 0.0)]

    def test_corollary_mode(self):
        cfg = _cfg(grid={"n": [50], "p": [800], "mu_norm": [2.0], "eta": [0.1]}, mu_norm_mode="corollary")
        assert cfg.cells()[0]["mu_norm"] == pytest.approx(2.0 * 16**0.25)
        assert np.linalg.norm(cfg.spec_for(cfg.cells()[0]).mu) == pytest.approx(4.0)


class TestTestError:
    def test_orthogonal_direction_is_a_coin_flip(self):
        spec = model_spec_from_dict({"p": 20, "mu_norm": 2.0})
        w = np.zeros(20)
        w[1] = 1.0
        est = estimate_test_error(_sol(w), spec, 100_000, 3)
        assert est.clean_lo <= 0.5 <= est.clean_hi

    def test_gaussian_tail(self):
        spec = model_spec_from_dict({"p": 10, "mu_norm": 2.0, "xi": {"family": "gaussian"}})
        est = estimate_test_error(_sol(spec.mu), spec, 1_000_000, 11)
        target = norm.cdf(-2.0)
        se = math.sqrt(target * (1 - target) / 1_000_000)
        assert abs(est.clean_err - target) <= 3 * se

    def test_noisy_label_identity(self):
        spec = model_spec_from_dict({"p": 30, "mu_norm": 1.0, "eta": 0.2})
        w = np.ones(30) / math.sqrt(30)
        y, y_noisy, score = sample_scores(spec, w, 0.1, 200_000, 17)
        clean, noisy = y * score <= 0, y_noisy * score <= 0
        flipped = y_noisy != y
        # on each sample the noisy verdict is the clean one, negated where flipped
        assert np.array_equal(noisy, clean ^ flipped)
        e = clean.mean()
        rate = flipped.mean()
        assert rate == pytest.approx(0.2, abs=0.005)
        assert noisy.mean() == pytest.approx((1 - rate) * e + rate * (1 - e), abs=0.005)

    def test_ties_count_as_errors(self):
        spec = model_spec_from_dict({"p": 5, "mu_norm": 1.0})
        est = estimate_test_error(_sol(np.zeros(5)), spec, 1000, 0)
        assert est.clean_err == 1.0 and est.noisy_err == 1.0

    def test_chunked_matches_direct(self, monkeypatch):
        import biasmargin.experiments as ex

        spec = model_spec_from_dict({"p": 8, "mu_norm": 1.0})
        w = np.arange(1.0, 9.0)
        monkeypatch.setattr(ex, "_CHUNK_ENTRIES", 8 * 10**6)
        one = estimate_test_error(_sol(w), spec, 5000, 4)
        monkeypatch.setattr(ex, "_CHUNK_ENTRIES", 8 * 700)
        many = estimate_test_error(_sol(w), spec, 5000, 4)
        # different chunking consumes different streams, but both are unbiased
        assert abs(one.clean_err - many.clean_err) < 0.03

    def test_wilson_width_scaling(self):
        w1 = wilson(2000, 10_000)
        w2 = wilson(8000, 40_000)
        ratio = (w1[1] - w1[0]) / (w2[1] - w2[0])
        assert ratio == pytest.approx(2.0, rel=0.01)

    def test_intervals_in_unit_range(self):
        for k, m in [(0, 10), (10, 10), (3, 7)]:
            lo, hi = wilson(k, m)
            assert 0.0 <= lo <= k / m <= hi <= 1.0

    def test_rejects_bad_input(self):
        spec = model_spec_from_dict({"p": 3, "mu_norm": 1.0})
        with pytest.raises(ValueError):
            estimate_test_error(_sol([np.nan, 0, 0]), spec, 10, 0)
        with pytest.raises(ValueError):
            estimate_test_error(_sol([1, 0, 0]), spec, 0, 0)


class TestEventMC:
    def test_single_sample_cell(self):
        cfg = _cfg(grid={"n": [1], "p": [50], "mu_norm": [1.0], "eta": [0.0]})
        mc = run_event_mc(cfg, 0, 20)
        assert mc["E1"].freq == 1.0
        assert mc["E1"].trials == 20

    def test_rows_and_markdown(self):
        cfg = _cfg(grid={"n": [10], "p": [2000], "mu_norm": [2.0], "eta": [0.0]})
        mc = run_event_mc(cfg, 0, 5)
        names = [r.name for r in mc.rows]
        assert "P_le_T" in names and "Bpert_le_bprho" in names
        for r in mc.rows:
            assert 0.0 <= r.lo <= r.freq <= r.hi <= 1.0
        assert mc.to_markdown().count("\n") == len(mc.rows) + 2
        json.dumps(mc.to_dict())

    def test_rejects_zero_trials(self):
        with pytest.raises(ConfigError):
            run_event_mc(_cfg(), 0, 0)


class TestSweep:
    def test_empty_grid_header_only(self):
        cfg = _cfg(grid={"n": [], "p": [10], "mu_norm": [1.0], "eta": [0.0]})
        rows = run_sweep(cfg)
        assert rows == []
        assert rows_to_csv(rows) == ",".join(RESULT_COLUMNS) + "\n"

    def test_one_cell_one_trial(self):
        rows = run_sweep(_cfg())
        assert len(rows) == 1
        text = rows_to_csv(rows)
        assert len(text.strip().split("\n")) == 2
        r = rows[0]
        assert r["status"] == "ok"
        assert r["interpolated"] is True
        assert 0.0 <= r["clean_err_lo"] <= r["clean_err"] <= r["clean_err_hi"] <= 1.0

    def test_csv_round_trip(self):
        rows = run_sweep(_cfg(trials=2, grid={"n": [10], "p": [30, 300], "mu_norm": [3.0], "eta": [0.0, 0.1]}))
        back = rows_from_csv(rows_to_csv(rows))
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            assert set(b) == set(RESULT_COLUMNS)
            for c in RESULT_COLUMNS:
                assert _same(a[c], b[c]), c
        assert rows_to_csv(back) == rows_to_csv(rows)

    def test_deterministic(self):
        cfg = _cfg(trials=2)
        assert rows_to_csv(run_sweep(cfg)) == rows_to_csv(run_sweep(cfg))

    def test_seed_changes_output(self):
        a = run_sweep(_cfg(seed=1))[0]
        b = run_sweep(_cfg(seed=2))[0]
        assert a["seed"] != b["seed"] and a["clean_err"] != b["clean_err"]

    def test_not_separable_recorded(self):
        # p = 1 with 30 points and a weak signal cannot be separated
        cfg = _cfg(grid={"n": [30], "p": [1], "mu_norm": [0.1], "eta": [0.0]})
        row = run_sweep(cfg)[0]
        assert row["status"] == "not_separable"
        assert row["clean_err"] is None
        assert row["bound_rhs"] is not None

    def test_homogeneous_baseline(self):
        cfg = _cfg(homogeneous_baseline=True)
        rows = run_sweep(cfg)
        text = rows_to_csv(rows)
        assert text.split("\n")[0].split(",") == RESULT_COLUMNS + HOMOG_COLUMNS
        assert rows[0]["homog_status"] == "ok"
        back = rows_from_csv(text)
        assert back[0]["homog_clean_err"] == rows[0]["homog_clean_err"]

    def test_run_trial_matches_sweep(self):
        cfg = _cfg(trials=2)
        rows = run_sweep(cfg)
        single = run_trial(cfg, cfg.cells()[0], 1)
        assert rows_to_csv([single]) == rows_to_csv([rows[1]])

    def test_bad_header(self):
        with pytest.raises(ValueError):
            rows_from_csv("a,b,c\n1,2,3\n")


def _row(cell_id=0, trial=0, clean=0.2, eta=0.1, rhs=0.5, interp=True, cond=False, status="ok"):
    r = {c: None for c in RESULT_COLUMNS}
    r.update(cell_id=cell_id, n=10, p=100 * (cell_id + 1), mu_norm=2.0, eta=eta, trial=trial, seed=trial, status=status)
    r.update(clean_err=clean, noisy_err=clean, bound_rhs=rhs, interpolated=interp, thm_conditions_pass=cond)
    return r


class TestReport:
    def test_empty(self):
        with pytest.raises(EmptyInput):
            report([])

    def test_single_row_echo(self):
        rep = report([_row(clean=0.25, eta=0.1, rhs=0.6)])
        (c,) = rep.cells
        assert c["median_clean_err"] == 0.25
        assert c["median_excess_err"] == pytest.approx(0.15)
        assert c["median_bound_rhs"] == 0.6
        assert c["rhs_over_empirical"] == pytest.approx(2.4)
        assert c["interpolation_rate"] == 1.0
        assert c["cond_pass_rate"] == 0.0
        assert "0.25" in rep.markdown

    def test_two_rows_midpoint(self):
        rep = report([_row(trial=0, clean=0.2), _row(trial=1, clean=0.3, interp=False, cond=True)])
        (c,) = rep.cells
        assert c["median_clean_err"] == pytest.approx(0.25)
        assert c["interpolation_rate"] == 0.5
        assert c["cond_pass_rate"] == 0.5

    def test_failed_rows_excluded_from_errors(self):
        rows = [_row(trial=0, clean=0.2), _row(trial=1, clean=None, status="not_separable")]
        (c,) = aggregate_cells(rows)
        assert c["trials"] == 2 and c["ok"] == 1
        assert c["median_clean_err"] == 0.2

    def test_homogeneous_delta(self):
        r = _row(clean=0.2)
        r.update(homog_status="ok", homog_clean_err=0.35)
        (c,) = report([r]).cells
        assert c["median_homog_minus_inhom"] == pytest.approx(0.15)

    def test_files_and_figures(self, tmp_path):
        rows = [_row(cell_id=0, clean=0.3), _row(cell_id=1, clean=0.2)]
        rep = report(rows, tmp_path)
        names = {p.name for p in rep.files}
        assert {"summary.md", "cells.csv", "by_p.csv", "excess_error_by_p.png"} <= names
        assert (tmp_path / "excess_error_by_p.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert "excess_error_by_p.png" in (tmp_path / "summary.md").read_text()
        by_p = (tmp_path / "by_p.csv").read_text().strip().split("\n")
        assert len(by_p) == 3

    def test_no_figures(self, tmp_path):
        rep = report([_row(cell_id=0), _row(cell_id=1)], tmp_path, figures=False)
        assert not list(tmp_path.glob("*.png"))
        assert all(p.suffix != ".png" for p in rep.files)
