"""Acceptance criteria 1-12, each at its stated tolerance and runtime.

Every test records one ``PASS``/``FAIL`` line (also echoed in the terminal
summary by ``conftest.py``).
"""
import math
import time

import numpy as np
import pytest

from homogenize_kit import bsde
from homogenize_kit import cesaro as ce
from homogenize_kit import cli
from homogenize_kit import coeffex as cx
from homogenize_kit import corrector as co
from homogenize_kit import harness as hk
from homogenize_kit import pdesolve as pd
from homogenize_kit import problem as pb
from homogenize_kit import sdesim as sd

from test_coeffex import GOLDEN

RESULTS = []


def record(num, title, checks, elapsed=None, budget=None):
    """``checks``: list of ``(label, ok)``.  Appends and prints one line."""
    ok = all(c for _, c in checks)
    detail = "; ".join(f"{label}{'' if c else ' [x]'}" for label, c in checks)
    if budget is not None:
        in_time = elapsed <= budget
        ok = ok and in_time
        detail += f"; {elapsed:.1f} s (budget {budget:g} s){'' if in_time else ' [x]'}"
    line = f"{'PASS' if ok else 'FAIL'} criterion {num} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def lncosh_average(X):
    return 2.0 + (X - math.log(2.0) + math.log1p(math.exp(-2.0 * X))) / X


# ---- 1 --------------------------------------------------------------------------

def test_criterion_01_cesaro_oracle():
    t0 = time.perf_counter()
    g = lambda t: 2 + np.tanh(t)
    plus, _ = ce.cesaro_limit(g, "plus")
    minus, _ = ce.cesaro_limit(g, "minus")
    s_plus, _ = ce.cesaro_limit(lambda t: 2 + np.sin(t), "plus")
    s_minus, _ = ce.cesaro_limit(lambda t: 2 + np.sin(t), "minus")
    el = time.perf_counter() - t0
    oracle = lncosh_average(1e6)
    errs = {"tanh+": abs(plus - oracle), "tanh-": abs(minus - (4 - oracle)),
            "sin+": abs(s_plus - 2), "sin-": abs(s_minus - 2)}
    checks = [(f"|{k}| err {v:.2e} <= 1e-3", v <= 1e-3) for k, v in errs.items()]
    checks.append((f"plus {plus:.6f} ~ 3, minus {minus:.6f} ~ 1",
                   abs(plus - 3) <= 1e-3 and abs(minus - 1) <= 1e-3))
    record(1, "Cesaro oracle", checks, el, 1.0)


# ---- 2 --------------------------------------------------------------------------

def test_criterion_02_averaged_model_bm1():
    t0 = time.perf_counter()
    model = ce.build_averaged_model(pb.registry("BM1_tanh_fast"))
    rng = np.random.default_rng(20)
    n = 20
    x2 = rng.uniform(-3, 3, (n, 1))
    y = rng.uniform(-3, 3, n)
    z = rng.uniform(-3, 3, (n, 2))
    bp, bm = model.b_branches(x2)
    fp, fm = model.fbar_branches(x2, y, z)
    el = time.perf_counter() - t0
    base = -y + 0.5 * z[:, 1]
    e_b = max(np.abs(bp[:, 1] - 1).max(), np.abs(bm[:, 1] + 1).max())
    e_f = max(np.abs(fp - (np.cos(x2[:, 0]) + base)).max(),
              np.abs(fm - (-np.cos(x2[:, 0]) + base)).max())
    record(2, "averaged model BM1", [(f"max |bbar_slow -/+ 1| = {e_b:.2e} <= 1e-3", e_b <= 1e-3),
                                     (f"max |fbar - closed form| = {e_f:.2e} <= 1e-3", e_f <= 1e-3)],
           el, 5.0)


# ---- 3 --------------------------------------------------------------------------

def test_criterion_03_bm3_identity():
    t0 = time.perf_counter()
    spec = pb.registry("BM3_x1_free")
    rep = hk.eps_sweep(spec)
    grid = pd.Grid(rep.metadata["grid"]["L1"], rep.metadata["grid"]["L2"],
                   rep.metadata["grid"]["h1"], rep.metadata["grid"]["h2"], hk.T_DEFAULT)
    a = pd.solve_semilinear(pd.EpsilonModel(spec, 0.125), None, grid)
    b = pd.solve_semilinear(ce.build_averaged_model(spec), None, grid)
    el = time.perf_counter() - t0
    emax = float(rep.column("error").max())
    record(3, "BM3 structural identity",
           [("eps and averaged fields bitwise equal", np.array_equal(a.values, b.values)),
            (f"max e(eps) = {emax:.1e} <= 1e-10", emax <= 1e-10)], el, 30.0)


# ---- 4 --------------------------------------------------------------------------

def test_criterion_04_corrector():
    t0 = time.perf_counter()
    sol = co.solve_corrector(None, None, 1.0, 0.0, 0.0, [0.0], L=10, h=1e-3, rhs=np.sin)
    err = float(np.max(np.abs(sol.u - (sol.x1_grid - np.sin(sol.x1_grid)))))
    spec = pb.registry("BM1_tanh_fast")
    bm1 = co.solve_corrector(spec, ce.build_averaged_model(spec), 1.0, 0.0, 0.0, [0.0, 0.0])
    res = float(np.nanmax(co.corrector_residual(bm1)))
    el = time.perf_counter() - t0
    record(4, "corrector", [(f"manufactured max err {err:.2e} <= 1e-6", err <= 1e-6),
                            (f"BM1 residual {res:.2e} <= 1e-4", res <= 1e-4)], el, 5.0)


# ---- 5 --------------------------------------------------------------------------

@pytest.mark.parametrize("bench", ["BM1_tanh_fast", "BM2_periodic"])
def test_criterion_05_homogenization_trend(bench):
    t0 = time.perf_counter()
    rep = hk.eps_sweep(bench, (1.0, 0.5, 0.25, 0.125), t=0.5, x_ref=(0.3, 0.0))
    el = time.perf_counter() - t0
    errs = ", ".join(f"{e:.4g}" for e in rep.column("error"))
    mono = rep.verdict("error strictly decreasing")
    ratio = rep.verdict("terminal ratio")
    ctrl = rep.verdict("BM3 control")
    record(f"5 ({bench})", "homogenization trend",
           [(f"e = [{errs}] strictly decreasing", mono.passed),
            (f"e(1/8)/e(1) = {ratio.value:.3g} <= 0.5", ratio.passed),
            (f"control/e(1/8) = {ctrl.value:.2g} <= 0.1", ctrl.passed)], el, 600.0)


# ---- 6 --------------------------------------------------------------------------

def test_criterion_06_feynman_kac():
    t0 = time.perf_counter()
    reps = [hk.feynman_kac_check("BM1_tanh_fast", eps=None),
            hk.feynman_kac_check("BM1_tanh_fast", eps=0.25)]
    el = time.perf_counter() - t0
    checks = []
    for rep in reps:
        r = rep.rows[0]
        checks.append((f"{r['model']}: |{r['y0']:.5f} - {r['v_pde']:.5f}| = {r['gap']:.2e} "
                       f"<= 3*{r['stderr']:.2e} + {r['fd_budget']:.2e}", rep.passed))
    record(6, "Feynman-Kac cross-validation", checks, el, 300.0)


# ---- 7 --------------------------------------------------------------------------

def test_criterion_07_mollification():
    t0 = time.perf_counter()
    rep = hk.moll_sweep("BM1_tanh_fast", (4, 8, 16, 32))
    el = time.perf_counter() - t0
    diffs = ", ".join(f"{v:.3g}" for v in rep.column("sup_diff"))
    checks = [(f"sup|v^n - v| = [{diffs}] non-increasing (5%)",
               rep.verdict("sup|v^n - v| non-increasing").passed)]
    for p in (2, 3, 4):
        v = rep.verdict(f"W12 p={p} bounded")
        checks.append((f"W12 p={p} max/min {v.value:.3f} <= 10", v.passed))
    record(7, "mollification", checks, el, 600.0)


# ---- 8, 9 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def law_report():
    t0 = time.perf_counter()
    rep = hk.law_sweep("BM1_tanh_fast", (1.0, 0.25, 0.0625), t=0.5, n_paths=10_000)
    rep.metadata["elapsed"] = time.perf_counter() - t0
    return rep


def test_criterion_08_law_convergence(law_report):
    rep = law_report
    checks = []
    for s in (0.125, 0.25):
        ks = ", ".join(f"{v:.3f}" for v in rep.column("ks_y", s=s))
        checks.append((f"KS(Y) at s={s:g} = [{ks}] non-increasing",
                       rep.verdict(f"KS(Y) non-increasing at s={s:g}").passed))
    v = rep.verdict("X2_t mean agreement")
    checks.append((f"X2_t mean gap {v.value:.2f} SE <= 4", v.passed))
    record(8, "law convergence", checks, rep.metadata["elapsed"], 600.0)


def test_criterion_09_tightness(law_report):
    t0 = time.perf_counter()
    rep = hk.tightness_report(runs=law_report.artifacts["runs"])
    el = time.perf_counter() - t0
    stat = rep.verdict("tightness statistic bounded")
    ups = [v for v in rep.verdicts if v.name.startswith("up-crossings")]
    checks = [(f"statistic max/min {stat.value:.3f} <= 5", stat.passed),
              (f"up-crossings max <= 2 min + 1 at {len(ups)} level pairs",
               all(v.passed for v in ups))]
    record(9, "tightness statistic", checks, el, 300.0)


# ---- 10 -------------------------------------------------------------------------

def test_criterion_10_auxiliary_processes():
    t0 = time.perf_counter()
    rep = hk.auxproc_report("BM1_tanh_fast", eps=0.125, n_list=(8, 16, 32))
    spec = pb.variant(pb.registry("BM1_tanh_fast"), name="BM1_zfree",
                      f="tanh(x1)*cos(x2_1) - y")
    zfree = hk.auxproc_report(None, eps=0.125, n_list=(8, 16, 32), spec=spec)
    el = time.perf_counter() - t0
    absA = ", ".join(f"{v:.4g}" for v in rep.column("mean_abs_A"))
    zA = zfree.column("mean_abs_A")
    record(10, "auxiliary processes",
           [(f"E|A| = [{absA}] non-increasing (10%)", rep.verdict("E|A| non-increasing").passed),
            (f"z-free E|A| = {zA.tolist()} all exactly 0", bool(np.all(zA == 0)))], el, 300.0)


# ---- 11 -------------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        'seed = 31\n[problem]\nbenchmark = "BM1_tanh_fast"\n'
        '[sweep-eps]\neps = [1.0, 0.5]\nt = 0.05\n'
        '[sweep-n]\nn = [4, 8]\nt = 0.05\np = [2]\n'
        '[sweep-law]\neps = [1.0, 0.5]\nt = 0.1\ntimes = [0.05]\nn_paths = 500\ncoarse_steps = 8\n'
        '[diagnose]\nwhat = "auxproc"\neps = 0.5\nn = [4, 8]\nt = 0.1\nn_paths = 500\n')
    stems = {"sweep-eps": ["eps_sweep"], "sweep-n": ["moll_sweep"],
             "sweep-law": ["law_sweep", "tightness"], "diagnose": ["auxproc"]}
    checks = []
    for cmd, names in stems.items():
        for d in ("a", "b"):
            cli.main(["--config", str(cfg), "--serial", "--out", str(tmp_path / d), cmd])
        for name in names:
            a = (tmp_path / "a" / f"{name}.csv").read_bytes()
            b = (tmp_path / "b" / f"{name}.csv").read_bytes()
            checks.append((f"{name}.csv identical ({len(a)} bytes)", a == b and len(a) > 0))
    record(11, "determinism", checks)


# ---- 12 -------------------------------------------------------------------------

def test_criterion_12_solver_oracles():
    checks = []
    # heat kernel
    heat = pb.variant(pb.registry("BM3_x1_free"), name="heat", phi=["1", "0"],
                      sigma_tilde=[["0", "1"]], b_tilde=["0"], f="0", H="exp(-x1^2 - x2_1^2)")
    grid = pd.Grid(4, 4, 1 / 16, 1 / 16, 0.5)
    fld = pd.solve_semilinear(pd.EpsilonModel(heat, 1.0), None, grid)
    X1, X2 = grid.mesh()
    inner = (np.abs(X1) <= 0.99 * grid.L1) & (np.abs(X2) <= 0.99 * grid.L2)
    c = 1 + 2 * 0.5
    herr = float(np.abs(fld.values[-1] - np.exp(-(X1 ** 2 + X2 ** 2) / c) / c)[inner].max())
    checks.append((f"heat kernel err {herr:.2e} <= 5e-3", herr <= 5e-3))
    # maximum principle
    spec = pb.variant(pb.registry("BM1_tanh_fast"), f="0")
    mp = pd.solve_semilinear(pd.EpsilonModel(spec, 0.5), None, pd.Grid(2, 2, 1 / 16, 1 / 8, 0.25))
    H, inn = mp.values[0], mp.values[:, 1:-1, 1:-1]
    checks.append(("discrete maximum principle", inn.min() >= H.min() and inn.max() <= H.max() + 1e-9))
    # BSDE closed forms
    x0 = np.array([0.3, 0.2])
    base = pb.registry("BM3_x1_free")
    s1 = pb.variant(base, name="drift", b_tilde=["0.3"], f="0", H="x2_1")
    m1 = ce.build_averaged_model(s1)
    e1 = sd.simulate_averaged(m1, x0, 1.0, 0.02, 10_000, 1)
    sol1 = bsde.solve_regression(e1, sd.AveragedDynamics(m1))
    d1 = abs(sol1.y0 - (0.2 + 0.3))
    checks.append((f"drifted mean |y0 - 0.5| = {d1:.2e} <= 3 se = {3 * sol1.y0_stderr:.2e}",
                   d1 <= 3 * sol1.y0_stderr))
    s2 = pb.variant(base, name="decay", f="-y", H="2")
    m2 = ce.build_averaged_model(s2)
    e2 = sd.simulate_averaged(m2, x0, 1.0, 0.02, 2000, 1)
    sol2 = bsde.solve_regression(e2, sd.AveragedDynamics(m2))
    d2 = abs(sol2.y0 - 2 * math.exp(-1.0))
    checks.append((f"exponential decay |y0 - 2/e| = {d2:.2e} <= 3 se + c t dt = "
                   f"{3 * sol2.y0_stderr + 0.04:.2e}", d2 <= 3 * sol2.y0_stderr + 2 * 1.0 * 0.02))
    # parser golden suite
    good = sum(cx.evaluate(cx.parse(src), env) == want for src, env, want in GOLDEN)
    checks.append((f"parser golden {good}/{len(GOLDEN)}", good == len(GOLDEN)))
    record(12, "solver unit oracles", checks)
