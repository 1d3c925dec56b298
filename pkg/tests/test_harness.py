import json

import numpy as np
import pytest

from homogenize_kit import harness as hk
from homogenize_kit import pdesolve as pd
from homogenize_kit import problem as pb

SMALL = pd.Grid(1.0, 1.0, 1 / 16, 1 / 8, t=0.05)


# ---- verdicts and reports ----------------------------------------------------

def test_verdict_line_format():
    v = hk._check("ratio", "e(a)/e(b)", 0.25, 0.5)
    assert v.passed and v.line() == "PASS ratio: e(a)/e(b) = 0.25 <= 0.5"
    w = hk._check("ratio", "e(a)/e(b)", 0.75, 0.5)
    assert not w.passed and w.line().startswith("FAIL ratio:")


def test_monotone_verdict():
    assert hk.monotone_verdict("m", [3, 2, 1], strict=True).passed
    assert not hk.monotone_verdict("m", [3, 3, 1], strict=True).passed
    assert hk.monotone_verdict("m", [1.0, 1.04, 1.0], slack=0.05).passed
    assert not hk.monotone_verdict("m", [1.0, 1.06], slack=0.05).passed
    assert hk.monotone_verdict("m", [0.0, 0.0]).passed
    assert not hk.monotone_verdict("m", [0.0, 1.0]).passed


def test_max_min_verdict():
    assert hk.max_min_verdict("b", [1, 4.9], 5).passed
    assert not hk.max_min_verdict("b", [1, 5.1], 5).passed
    assert hk.max_min_verdict("b", [0, 0], 5).passed
    assert not hk.max_min_verdict("b", [0, 1], 5).passed


def test_report_write(tmp_path):
    rep = hk.ConvergenceReport("eps_sweep", [{"eps": 1.0, "error": 0.1}, {"eps": 0.5, "error": 0.05}],
                               ["eps", "error"], {"b": 1, "a": np.float64(2.0)},
                               [hk._check("x", "s", 1, 2)])
    paths = rep.write(tmp_path, plot=True)
    assert paths["csv"].read_text() == "eps,error\n1.0,0.1\n0.5,0.05\n"
    meta = json.loads(paths["meta"].read_text())
    assert list(meta) == ["a", "b"]
    assert paths["verdicts"].read_text() == "PASS x: s = 1 <= 2\n"
    assert paths["svg"].read_text().lstrip().startswith("<?xml")
    assert rep.column("error", eps=0.5).tolist() == [0.05]


def test_svg_is_deterministic(tmp_path):
    rep = hk.ConvergenceReport("moll_sweep", [{"n": 4, "v": 1.0}, {"n": 8, "v": 0.5}], ["n", "v"])
    a = hk.plot_svg(rep, tmp_path / "a.svg").read_bytes()
    b = hk.plot_svg(rep, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_default_grid_resolves_eps():
    g = hk.default_grid(1 / 16)
    assert g.h1 == 1 / 128 and g.h2 == 1 / 16
    assert hk.default_grid(None).h1 == 1 / 64


def test_step_plan_powers_of_two():
    spec = pb.registry("BM1_tanh_fast")
    dt, k = hk.step_plan(spec, 0.25, hk.X_REF, 0.5, 64)
    assert k & (k - 1) == 0 and dt * k * 64 == pytest.approx(0.5)
    assert hk.step_plan(spec, None, hk.X_REF, 0.5, 64) == (0.5 / 64, 1)


# ---- eps sweep ---------------------------------------------------------------

def test_eps_sweep_bm3_identity():
    rep = hk.eps_sweep("BM3_x1_free", (1.0, 0.5, 0.25, 0.125), t=0.05, grid=SMALL)
    assert rep.passed
    assert np.all(rep.column("error") <= 1e-10)
    assert rep.verdict("x1-free identity").relation == "<="


def test_eps_sweep_rows_and_verdicts():
    rep = hk.eps_sweep("BM1_tanh_fast", (0.5,), t=0.05, grid=SMALL, control=True)
    assert rep.columns == ["eps", "v_eps", "v_avg", "error"]
    names = [v.name for v in rep.verdicts]
    assert names == ["error strictly decreasing", "terminal ratio", "BM3 control"]
    assert rep.metadata["eps_floor"] == hk.EPS_MIN_PDE


def test_eps_sweep_needs_decreasing_eps():
    with pytest.raises(ValueError):
        hk.eps_sweep("BM3_x1_free", (0.5, 1.0), grid=SMALL)


def test_eps_sweep_threads_match_serial():
    a = hk.eps_sweep("BM1_tanh_fast", (0.5,), t=0.02, grid=SMALL, control=False)
    b = hk.eps_sweep("BM1_tanh_fast", (0.5,), t=0.02, grid=SMALL, control=False, threads=2)
    assert a.to_csv() == b.to_csv()


# ---- mollification -----------------------------------------------------------

def test_moll_sweep_x1_free_identity():
    rep = hk.moll_sweep("BM3_x1_free", (4, 8), t=0.05, grid=SMALL,
                        compact=pd.Box((-0.5, 0.5), (-0.5, 0.5)), p_list=(2,))
    assert rep.passed
    assert np.all(rep.column("sup_diff") <= 1e-10)
    assert rep.column("n").tolist() == [4, 8]


def test_moll_sweep_requires_doubling():
    with pytest.raises(ValueError):
        hk.moll_sweep("BM1_tanh_fast", (4, 12), grid=SMALL)


# ---- path sweeps -------------------------------------------------------------

@pytest.fixture(scope="module")
def bm3_law():
    return hk.law_sweep("BM3_x1_free", (1.0, 0.25), t=0.1, n_paths=400, seed=3, coarse_steps=8)


def test_law_sweep_bm3_structural(bm3_law):
    assert bm3_law.passed
    for c in ("ks_y", "ks_mart", "ks_sum", "ks_x0", "ks_x1"):
        assert np.all(bm3_law.column(c) == 0)


def test_law_sweep_rows_sorted(bm3_law):
    eps = bm3_law.column("eps")
    assert np.all(np.diff(eps) <= 0)
    assert sorted(set(bm3_law.column("s").tolist())) == [0.025, 0.05, 0.1]


def test_law_sweep_validates_s():
    with pytest.raises(ValueError):
        hk.law_sweep("BM3_x1_free", (1.0,), t=0.1, s_list=[0.1], n_paths=10)


def test_law_sweep_is_reproducible(bm3_law):
    again = hk.law_sweep("BM3_x1_free", (1.0, 0.25), t=0.1, n_paths=400, seed=3, coarse_steps=8)
    assert again.to_csv() == bm3_law.to_csv()


def test_tightness_constant_problem():
    spec = pb.variant(pb.registry("BM1_tanh_fast"), name="const", f="0", H="-1.5")
    runs = [hk.run_paths(spec, e, 0.1, hk.X_REF, 300, 1, coarse_steps=8) for e in (1.0, 0.5)]
    rep = hk.tightness_report(runs=runs)
    assert rep.column("statistic").tolist() == [1.5, 1.5]
    for j in range(3):
        assert np.all(rep.column(f"upcross_{j}") == 0)
    assert rep.passed


def test_tightness_reuses_law_runs(bm3_law):
    rep = hk.tightness_report(runs=bm3_law.artifacts["runs"])
    assert rep.column("eps").tolist() == [1.0, 0.25]
    assert np.all(rep.column("statistic") > 0)


def test_auxproc_z_free_is_zero():
    spec = pb.variant(pb.registry("BM1_tanh_fast"), name="zfree", f="tanh(x1)*cos(x2_1) - y")
    grid = pd.Grid(2.0, 2.0, 1 / 16, 1 / 8, t=0.1)
    rep = hk.auxproc_report(None, eps=0.5, n_list=(4, 8), t=0.1, n_paths=300, seed=5,
                            grid=grid, coarse_steps=8, spec=spec)
    assert rep.column("mean_abs_A").tolist() == [0.0, 0.0]
    assert rep.verdict("z-free generator gives A = 0").passed


def test_auxproc_box_exit():
    grid = pd.Grid(0.25, 0.25, 1 / 16, 1 / 16, t=0.1)
    with pytest.raises(hk.ExcessiveBoxExit):
        hk.auxproc_report("BM1_tanh_fast", eps=0.5, n_list=(4,), t=0.1, n_paths=200,
                          grid=grid, coarse_steps=8)


def test_feynman_kac_small_bm3():
    rep = hk.feynman_kac_check("BM3_x1_free", t=0.05, n_paths=2000, seed=1,
                               grid=pd.Grid(2.0, 2.0, 1 / 16, 1 / 16, t=0.05), coarse_steps=16)
    r = rep.rows[0]
    assert r["fd_budget"] >= 0 and r["stderr"] > 0
    assert rep.passed
