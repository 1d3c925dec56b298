"""Convergence experiments and their reports.

Each experiment returns a :class:`ConvergenceReport` holding one row per
sweep entry, run metadata and a list of :class:`Verdict` checks.  Reports
write a deterministic CSV (no timings), a JSON metadata file (parameters,
versions, wall time) and one ``PASS``/``FAIL`` line per verdict.
"""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy

from . import __version__
from . import bsde as bs
from . import pdesolve as pd
from . import sdesim as sd
from .cesaro import AveragedModel, build_averaged_model
from .coeffex import free_vars
from .problem import ProblemSpec, eval_f, registry

T_DEFAULT = 0.5
X_REF = (0.3, 0.0)
EPS_MIN_PDE = 1.0 / 32


class ExcessiveBoxExit(RuntimeError):
    pass


# --------------------------------------------------------------------- report

@dataclass
class Verdict:
    name: str
    statistic: str
    value: float
    threshold: float
    relation: str            # "<=", "<", ">=", "holds"
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.statistic} = {self.value:.6g} {self.relation} {self.threshold:.6g}"


@dataclass
class ConvergenceReport:
    kind: str
    rows: list
    columns: list
    metadata: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict, repr=False)   # not serialized

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def verdict(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    def column(self, name, **where):
        return np.array([r[name] for r in self.rows
                         if all(r.get(k) == v for k, v in where.items())])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def verdict_lines(self) -> list:
        return [v.line() for v in self.verdicts]

    def write(self, out_dir, stem: str | None = None, plot: bool = False) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        paths = {"csv": out / f"{stem}.csv", "meta": out / f"{stem}.meta.json",
                 "verdicts": out / f"{stem}.verdicts.txt"}
        paths["csv"].write_text(self.to_csv())
        paths["meta"].write_text(json.dumps(_jsonable(self.metadata), indent=2, sort_keys=True))
        paths["verdicts"].write_text("".join(line + "\n" for line in self.verdict_lines()))
        if plot:
            svg = plot_svg(self, out / f"{stem}.svg")
            if svg is not None:
                paths["svg"] = svg
        return paths


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _check(name, statistic, value, threshold, relation="<=") -> Verdict:
    value, threshold = float(value), float(threshold)
    ok = {"<=": value <= threshold, "<": value < threshold, ">=": value >= threshold}[relation]
    return Verdict(name, statistic, value, threshold, relation, bool(ok))


def _holds(name, statistic, ok, value=float("nan")) -> Verdict:
    return Verdict(name, statistic, float(value), 0.0, "holds", bool(ok))


def monotone_verdict(name, values, slack=0.0, strict=False) -> Verdict:
    """Worst step ratio ``v[i+1] / v[i]`` against ``1 + slack`` (``< 1`` when strict)."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return _holds(name, "single entry", True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(v[:-1] > 0, v[1:] / v[:-1], np.where(v[1:] > 0, np.inf, 1.0))
    worst = float(np.max(ratios))
    if strict:
        return _check(name, "max step ratio", worst, 1.0, "<")
    return _check(name, "max step ratio", worst, 1.0 + slack, "<=")


def max_min_verdict(name, values, bound) -> Verdict:
    v = np.abs(np.asarray(values, dtype=float))
    ratio = float(v.max() / v.min()) if v.min() > 0 else (1.0 if v.max() == 0 else np.inf)
    return _check(name, "max/min", ratio, bound)


def base_metadata(spec: ProblemSpec, **extra) -> dict:
    meta = {"benchmark": spec.name, "package_version": __version__,
            "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "rng": sd.rng.ALGORITHM}
    meta.update(extra)
    return meta


def _resolve(spec_or_id) -> ProblemSpec:
    return registry(spec_or_id) if isinstance(spec_or_id, str) else spec_or_id


def _map(fn: Callable, items: Sequence, threads: int):
    """Ordered map; concurrent when ``threads > 1``."""
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------- grids/steps

def default_grid(eps_min: float | None = None, t: float = T_DEFAULT, L: float = 4.0,
                 h1: float = 1 / 64, h2: float = 1 / 16) -> pd.Grid:
    """Box ``[-L, L]^2``; ``h1`` is halved until it resolves ``eps_min / 8``."""
    if eps_min is not None:
        while h1 > eps_min / 8 * (1 + 1e-12):
            h1 /= 2
    return pd.Grid(L, L, h1, h2, t)


def step_plan(spec: ProblemSpec, eps: float | None, x0, t: float, coarse_steps: int):
    """``(fine_dt, store_every)``: power-of-two refinement of ``t/coarse_steps``
    fine enough for the fast-resolution rule."""
    if eps is None:
        return t / coarse_steps, 1
    limit = sd.max_resolved_dt(spec, eps, x0, t)
    k = 1
    while t / (coarse_steps * k) > limit * (1 + 1e-12):
        k *= 2
    return t / (coarse_steps * k), k


# ------------------------------------------------------------------ eps sweep

def _pde_value(model, grid, x_ref):
    fld = pd.solve_semilinear(model, None, grid, n_snapshots=2)
    return fld.value_at(x_ref), fld


def eps_sweep(benchmark, eps_list=(1.0, 0.5, 0.25, 0.125), t: float = T_DEFAULT,
              x_ref=X_REF, grid: pd.Grid | None = None, control: bool = True,
              threads: int = 0) -> ConvergenceReport:
    """``e(eps) = |v^eps(t, x_ref) - v(t, x_ref)|`` over a decreasing ``eps_list``."""
    t0 = time.perf_counter()
    spec = _resolve(benchmark)
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if grid is None:
        # nothing oscillates in an x1-free problem, so x1 needs no extra resolution
        grid = (default_grid(min(eps_list), t) if spec.reads_x1()
                else default_grid(None, t, h1=1 / 16))
    grid = pd.Grid(grid.L1, grid.L2, grid.h1, grid.h2, t, grid.ds)
    model = build_averaged_model(spec)
    jobs = [("averaged", model)] + [(e, pd.EpsilonModel(spec, e)) for e in eps_list]
    vals = _map(lambda job: _pde_value(job[1], grid, x_ref)[0], jobs, threads)
    v_avg = vals[0]
    rows = [{"eps": e, "v_eps": v, "v_avg": v_avg, "error": abs(v - v_avg)}
            for e, v in zip(eps_list, vals[1:])]
    errs = [r["error"] for r in rows]
    verdicts = []
    if spec.reads_x1():
        verdicts.append(monotone_verdict("error strictly decreasing", errs, strict=True))
        verdicts.append(_check("terminal ratio", "e(eps_min)/e(eps_max)",
                               errs[-1] / errs[0] if errs[0] > 0 else np.inf, 0.5))
    else:
        verdicts.append(_check("x1-free identity", "max e", max(errs), 1e-10))
    meta = base_metadata(spec, t=t, x_ref=list(x_ref), grid=_grid_meta(grid),
                         eps_list=eps_list, eps_floor=EPS_MIN_PDE,
                         eps_floor_note="h1 <= eps/8 caps practical eps near 1/32")
    if control and spec.reads_x1():
        ctrl = registry("BM3_x1_free")
        c_avg, _ = _pde_value(build_averaged_model(ctrl), grid, x_ref)
        c_eps, _ = _pde_value(pd.EpsilonModel(ctrl, eps_list[-1]), grid, x_ref)
        c_err = abs(c_eps - c_avg)
        meta["control_error"] = c_err
        verdicts.append(_check("BM3 control", "control error / e(eps_min)",
                               c_err / errs[-1] if errs[-1] > 0 else np.inf, 0.1))
    meta["wall_time_s"] = time.perf_counter() - t0
    return ConvergenceReport("eps_sweep", rows, ["eps", "v_eps", "v_avg", "error"], meta, verdicts)


def _grid_meta(g: pd.Grid) -> dict:
    return {"L1": g.L1, "L2": g.L2, "h1": g.h1, "h2": g.h2, "t": g.t, "ds": g.ds}


def boundary_influence(benchmark, eps: float | None, t: float = T_DEFAULT, x_ref=X_REF,
                       grid: pd.Grid | None = None) -> float:
    """``|v(t, x_ref)|`` change when the box is doubled (re-run check)."""
    spec = _resolve(benchmark)
    grid = grid or default_grid(eps if spec.reads_x1() else None, t)
    model = build_averaged_model(spec) if eps is None else pd.EpsilonModel(spec, eps)
    a, _ = _pde_value(model, grid, x_ref)
    b, _ = _pde_value(model, grid.doubled(), x_ref)
    return abs(a - b)


# ------------------------------------------------------------- mollification

def moll_sweep(benchmark, n_list=(4, 8, 16, 32), t: float = T_DEFAULT,
               compact=pd.Box((-1.0, 1.0), (-1.0, 1.0)), grid: pd.Grid | None = None,
               p_list=(2, 3, 4), threads: int = 0) -> ConvergenceReport:
    """Mollified solves ``v^n`` against the averaged solve ``v`` on a compact box."""
    t0 = time.perf_counter()
    spec = _resolve(benchmark)
    n_list = [int(n) for n in n_list]
    if any(b != 2 * a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must double")
    grid = grid or default_grid(None, t)
    grid = pd.Grid(grid.L1, grid.L2, grid.h1, grid.h2, t, grid.ds)
    model = build_averaged_model(spec)
    mask = pd.region_weights(grid, compact) > 0
    models = [model] + [pd.mollify(model, n) for n in n_list]
    fields = _map(lambda m: pd.solve_semilinear(m, None, grid), models, threads)
    v = fields[0]
    rows = []
    for i, (n, fld) in enumerate(zip(n_list, fields[1:])):
        row = {"n": n, "sup_diff": float(np.max(np.abs(fld.values[-1] - v.values[-1])[mask]))}
        nxt = fields[i + 2] if i + 2 < len(fields) else None
        row["sup_diff_next"] = (float(np.max(np.abs(fld.values[-1] - nxt.values[-1])[mask]))
                                if nxt is not None else float("nan"))
        for p in p_list:
            norms = pd.sobolev_norms(fld, p, compact)
            for name, val in zip(("lp_v", "lp_dsv", "lp_grad", "lp_hess"), norms):
                row[f"{name}_p{p}"] = val
            row[f"w12_p{p}"] = pd.w12_norm(norms, p)
            row[f"gn_p{p}"] = pd.gagliardo_nirenberg_ratio(fld, p, compact)
        row["growth"] = pd.growth_ratio(fld, spec.bounds.p)
        rows.append(row)
    cols = ["n", "sup_diff", "sup_diff_next"]
    for p in p_list:
        cols += [f"lp_v_p{p}", f"lp_dsv_p{p}", f"lp_grad_p{p}", f"lp_hess_p{p}",
                 f"w12_p{p}", f"gn_p{p}"]
    cols.append("growth")
    diffs = [r["sup_diff"] for r in rows]
    verdicts = []
    if spec.reads_x1():
        verdicts.append(monotone_verdict("sup|v^n - v| non-increasing", diffs, slack=0.05))
        nxt = [r["sup_diff_next"] for r in rows[:-1]]
        verdicts.append(monotone_verdict("sup|v^n - v^2n| non-increasing", nxt, slack=0.05))
    else:
        verdicts.append(_check("x1-free identity", "max sup|v^n - v|", max(diffs), 1e-10))
    for p in p_list:
        verdicts.append(max_min_verdict(f"W12 p={p} bounded", [r[f"w12_p{p}"] for r in rows], 10))
        verdicts.append(max_min_verdict(f"GN p={p} bounded", [r[f"gn_p{p}"] for r in rows], 10))
    verdicts.append(max_min_verdict("growth bounded", [r["growth"] for r in rows], 10))
    meta = base_metadata(spec, t=t, grid=_grid_meta(grid), n_list=n_list, p_list=list(p_list),
                         compact={"x1": list(compact.x1), "x2": list(compact.x2)}
                         if isinstance(compact, pd.Box) else {"R": compact.R},
                         wall_time_s=time.perf_counter() - t0)
    rep = ConvergenceReport("moll_sweep", rows, cols, meta, verdicts)
    rep.artifacts["fields"] = dict(zip(["averaged"] + n_list, fields))
    return rep


# ------------------------------------------------------------- path sweeps

@dataclass
class PathRun:
    """Forward ensemble plus regression solution for one model."""
    label: object                      # eps or "averaged"
    ens: sd.PathEnsemble
    dyn: object
    sol: bs.BsdeSolution


def run_paths(spec: ProblemSpec, eps: float | None, t: float, x0, n_paths: int, seed: int,
              coarse_steps: int = 64, model: AveragedModel | None = None,
              avg_refine: int = 8, threads: int = 0) -> PathRun:
    """Simulate and regress on the common coarse grid ``t / coarse_steps``.

    The averaged model is simulated ``avg_refine`` times finer (its coefficients
    jump at ``x1 = 0``), then subsampled.
    """
    x0 = np.asarray(x0, dtype=float)
    if eps is None:
        if not spec.reads_x1():
            avg_refine = 1   # no jump to resolve; share the eps runs' noise exactly
        model = model or build_averaged_model(spec)
        ens = sd.simulate_averaged(model, x0, t, t / (coarse_steps * avg_refine), n_paths, seed,
                                   store_every=avg_refine, threads=threads)
        dyn = sd.AveragedDynamics(model)
        label = "averaged"
    else:
        dt, k = step_plan(spec, eps, x0, t, coarse_steps)
        ens = sd.simulate_multiscale(spec, eps, x0, t, dt, n_paths, seed, store_every=k,
                                     threads=threads)
        dyn = sd.EpsilonDynamics(spec, eps)
        label = float(eps)
    with warnings.catch_warnings():
        # early steps can have every averaged path on one side of x1 = 0
        warnings.filterwarnings("ignore", message="dropped dependent basis columns")
        sol = bs.solve_regression(ens, dyn)
    return PathRun(label, ens, dyn, sol)


def law_sweep(benchmark, eps_list=(1.0, 0.25, 0.0625), t: float = T_DEFAULT, s_list=None,
              n_paths: int = 10_000, seed: int = 2024, x0=X_REF, coarse_steps: int = 64,
              threads: int = 0) -> ConvergenceReport:
    """KS distances of ``Y^eps_s`` and ``X^eps_s`` marginals to the averaged model."""
    t0 = time.perf_counter()
    spec = _resolve(benchmark)
    eps_list = [float(e) for e in eps_list]
    s_list = list(s_list) if s_list is not None else [t / 4, t / 2]
    if not all(0 < s < t for s in s_list):
        raise ValueError("s_list must lie in (0, t)")
    avg = run_paths(spec, None, t, x0, n_paths, seed, coarse_steps, threads=threads)
    runs = [run_paths(spec, e, t, x0, n_paths, seed, coarse_steps, threads=threads)
            for e in eps_list]
    ya = avg.sol.y
    ma = bs.martingale_integral(avg.sol, avg.ens)
    rows = []
    for run in runs:
        mart = bs.martingale_integral(run.sol, run.ens)
        for s in s_list + [t]:
            i = run.ens.time_index(s)
            ia = avg.ens.time_index(s)
            row = {"eps": run.label, "s": float(run.ens.t_grid[i]),
                   "ks_y": sd.ks_statistic(run.sol.y[i], ya[ia]),
                   "ks_mart": sd.ks_statistic(mart[i], ma[ia]),
                   "ks_sum": sd.ks_statistic(run.sol.y[i] + mart[i], ya[ia] + ma[ia])}
            for c in range(run.ens.states.shape[-1]):
                a, b = run.ens.states[i, :, c], avg.ens.states[ia, :, c]
                row[f"ks_x{c}"] = sd.ks_statistic(a, b)
                row[f"mean_x{c}"] = float(a.mean())
                row[f"mean_x{c}_avg"] = float(b.mean())
                row[f"pooled_se_x{c}"] = sd.pooled_se(a, b)
            rows.append(row)
    cols = ["eps", "s", "ks_y", "ks_mart", "ks_sum"]
    for c in range(avg.ens.states.shape[-1]):
        cols += [f"ks_x{c}", f"mean_x{c}", f"mean_x{c}_avg", f"pooled_se_x{c}"]
    verdicts = []
    crit = sd.ks_critical(n_paths, n_paths)
    if spec.reads_x1():
        for s in s_list:
            ks = [r["ks_y"] for r in rows if abs(r["s"] - s) < 1e-12]
            verdicts.append(monotone_verdict(f"KS(Y) non-increasing at s={s:g}", ks))
        last = [r for r in rows if r["eps"] == eps_list[-1] and abs(r["s"] - t) < 1e-12][0]
        d = abs(last["mean_x1"] - last["mean_x1_avg"])
        verdicts.append(_check("X2_t mean agreement", "|mean diff| / pooled SE",
                               d / last["pooled_se_x1"], 4.0))
    else:
        worst = max(max(r["ks_y"], r["ks_x0"], r["ks_x1"]) for r in rows)
        verdicts.append(_check("x1-free KS at noise level", "max KS", worst, crit, "<"))
    meta = base_metadata(spec, t=t, s_list=s_list, eps_list=eps_list, n_paths=n_paths,
                         seeds=[seed], coarse_dt=t / coarse_steps, x0=list(x0),
                         fine_dt={str(r.label): r.ens.fine_dt for r in [avg] + runs},
                         ks_critical_1pct=crit, wall_time_s=time.perf_counter() - t0)
    rep = ConvergenceReport("law_sweep", rows, cols, meta, verdicts)
    rep.artifacts["runs"] = runs
    rep.artifacts["averaged"] = avg
    return rep


def tightness_statistic(run: PathRun) -> float:
    """``E int |f| ds + E sup |Y|``."""
    cv = bs.conditional_variation_bound(run.sol, run.ens)
    return cv + float(np.mean(np.max(np.abs(run.sol.y), axis=0)))


def tightness_report(benchmark=None, eps_list=(1.0, 0.25, 0.0625), t: float = T_DEFAULT,
                     n_paths: int = 10_000, seed: int = 2024, x0=X_REF,
                     runs: Sequence[PathRun] | None = None, n_levels: int = 3,
                     threads: int = 0) -> ConvergenceReport:
    """Meyer-Zheng statistic and up-crossing counts across an eps sweep.

    Pass ``runs`` (e.g. ``law_sweep(...).artifacts["runs"]``) to reuse ensembles.
    """
    t0 = time.perf_counter()
    if runs is None:
        spec = _resolve(benchmark)
        runs = [run_paths(spec, e, t, x0, n_paths, seed, threads=threads) for e in eps_list]
    spec = runs[0].dyn.spec
    pooled = np.concatenate([r.sol.y.ravel() for r in runs])
    qs = np.quantile(pooled, np.linspace(0.1, 0.9, n_levels + 1))
    pairs = [(float(qs[i]), float(qs[i + 1])) for i in range(n_levels)]
    rows = []
    for r in runs:
        row = {"eps": r.label, "statistic": tightness_statistic(r),
               "cv_bound": bs.conditional_variation_bound(r.sol, r.ens),
               "e_sup_abs_y": float(np.mean(np.max(np.abs(r.sol.y), axis=0)))}
        for j, (a, b) in enumerate(pairs):
            row[f"upcross_{j}"] = float(np.mean(bs.upcrossings_paths(r.sol.y, a, b))) \
                if b > a else 0.0
        rows.append(row)
    cols = ["eps", "statistic", "cv_bound", "e_sup_abs_y"] + [f"upcross_{j}" for j in range(n_levels)]
    verdicts = [max_min_verdict("tightness statistic bounded", [r["statistic"] for r in rows], 5)]
    for j, (a, b) in enumerate(pairs):
        u = np.array([r[f"upcross_{j}"] for r in rows])
        verdicts.append(_check(f"up-crossings [{a:.4g}, {b:.4g}] non-exploding",
                               "max - (2 min + 1)", u.max() - (2 * u.min() + 1), 0.0))
    meta = base_metadata(spec, levels=pairs, n_paths=runs[0].ens.n_paths,
                         seeds=sorted({r.ens.seed for r in runs}),
                         wall_time_s=time.perf_counter() - t0)
    return ConvergenceReport("tightness", rows, cols, meta, verdicts)


# ------------------------------------------------------------ aux processes

def interp_gradient(fld: pd.Field, snapshot: int, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``grad v`` (central differences) at ``pts``, (P, 2)."""
    g = fld.grid
    g1, g2 = fld.gradient(snapshot)
    fi = (pts[:, 0] - g.x1[0]) / g.h1
    fj = (pts[:, 1] - g.x2[0]) / g.h2
    i = np.clip(np.floor(fi).astype(int), 0, len(g.x1) - 2)
    j = np.clip(np.floor(fj).astype(int), 0, len(g.x2) - 2)
    a, b = fi - i, fj - j
    out = np.empty((len(pts), 2))
    for c, arr in enumerate((g1, g2)):
        out[:, c] = ((1 - a) * (1 - b) * arr[i, j] + a * (1 - b) * arr[i + 1, j]
                     + (1 - a) * b * arr[i, j + 1] + a * b * arr[i + 1, j + 1])
    return out


def auxproc_report(benchmark, eps: float = 0.125, n_list=(8, 16, 32), t: float = T_DEFAULT,
                   n_paths: int = 10_000, seed: int = 2024, x0=X_REF, grid: pd.Grid | None = None,
                   coarse_steps: int = 64, max_exit: float = 0.05, spec: ProblemSpec | None = None,
                   threads: int = 0) -> ConvergenceReport:
    """``A^{eps,n}_t = int [f(., Y, Z^eps) - f(., Y, Z^{eps,n})] dr`` with
    ``Z^{eps,n}_r = grad v^n(t - r, X^eps_r)``."""
    t0 = time.perf_counter()
    spec = spec or _resolve(benchmark)
    grid = grid or default_grid(None, t)
    grid = pd.Grid(grid.L1, grid.L2, grid.h1, grid.h2, t, grid.ds)
    model = build_averaged_model(spec)
    run = run_paths(spec, eps, t, x0, n_paths, seed, coarse_steps, threads=threads)
    ens, sol = run.ens, run.sol
    X = ens.states
    inside = np.all((np.abs(X[..., 0]) <= grid.L1) & (np.abs(X[..., 1]) <= grid.L2), axis=0)
    exit_frac = 1.0 - float(inside.mean())
    if exit_frac > max_exit:
        raise ExcessiveBoxExit(f"{exit_frac:.1%} of paths leave the box (limit {max_exit:.0%})")
    P = int(inside.sum())
    fields = _map(lambda n: pd.solve_semilinear(pd.mollify(model, n), None, grid,
                                                n_snapshots=coarse_steps + 1),
                  list(n_list), threads)
    rows = []
    for n, fld in zip(n_list, fields):
        A = np.zeros(P)
        mart = np.zeros(P)
        energy = np.zeros(P)
        for i in range(ens.n_steps):
            x = X[i][inside]
            m = int(np.argmin(np.abs(fld.times - (t - ens.t_grid[i]))))
            zn = interp_gradient(fld, m, x)
            y = sol.y[i][inside]
            ze = sol.z[i][inside]
            x1f, x2 = x[:, 0] / eps, x[:, 1:]
            A += (eval_f(spec, x1f, x2, y, ze) - eval_f(spec, x1f, x2, y, zn)) * ens.dt
            _, sig = run.dyn.coefficients(x)
            zs = np.einsum("pi,pik->pk", zn, sig)
            mart += np.einsum("pk,pk->p", zs, ens.dW[i][inside])
            energy += np.sum(zs ** 2, axis=-1) * ens.dt
        var_m = float(mart.var(ddof=1))
        e_energy = float(energy.mean())
        rows.append({"n": int(n), "mean_abs_A": float(np.mean(np.abs(A))),
                     "mean_A": float(A.mean()), "mart_var": var_m, "isometry": e_energy,
                     "isometry_ratio": var_m / e_energy if e_energy > 0 else float("nan")})
    cols = ["n", "mean_abs_A", "mean_A", "mart_var", "isometry", "isometry_ratio"]
    absA = [r["mean_abs_A"] for r in rows]
    verdicts = []
    if any(z in free_vars(spec.f) for z in spec.z_names):
        verdicts.append(monotone_verdict("E|A| non-increasing", absA, slack=0.10))
    else:
        verdicts.append(_check("z-free generator gives A = 0", "max E|A|", max(absA), 0.0))
    for r in rows:
        if r["isometry"] > 0:
            verdicts.append(_check(f"isometry n={r['n']}", "|var/energy - 1|",
                                   abs(r["isometry_ratio"] - 1), 0.2))
    meta = base_metadata(spec, eps=eps, n_list=list(n_list), t=t, n_paths=n_paths,
                         seeds=[seed], grid=_grid_meta(grid), box_exit_fraction=exit_frac,
                         coarse_dt=ens.dt, fine_dt=ens.fine_dt,
                         wall_time_s=time.perf_counter() - t0)
    rep = ConvergenceReport("auxproc", rows, cols, meta, verdicts)
    rep.artifacts["run"] = run
    return rep


# ------------------------------------------------------------- Feynman-Kac

def feynman_kac_check(benchmark, eps: float | None = None, t: float = T_DEFAULT, x_ref=X_REF,
                      n_paths: int = 10_000, seed: int = 7, grid: pd.Grid | None = None,
                      coarse_steps: int = 128, threads: int = 0) -> ConvergenceReport:
    """``|y0 - v(t, x_ref)| <= 3 stderr + FD budget``.

    The FD budget is ``|v_h - v_2h|`` from a solve on the doubled mesh width.
    """
    t0 = time.perf_counter()
    spec = _resolve(benchmark)
    grid = grid or default_grid(eps if (eps is not None and spec.reads_x1()) else None, t)
    grid = pd.Grid(grid.L1, grid.L2, grid.h1, grid.h2, t, grid.ds)
    coarse = pd.Grid(grid.L1, grid.L2, 2 * grid.h1, 2 * grid.h2, t)
    if eps is None:
        model = build_averaged_model(spec)
        pde_model = model
    else:
        model = None
        pde_model = pd.EpsilonModel(spec, eps)
    v_h, _ = _pde_value(pde_model, grid, x_ref)
    try:
        v_2h, _ = _pde_value(pde_model, coarse, x_ref)
        budget = abs(v_h - v_2h)
    except pd.OscillationUnresolved:
        budget = float("nan")
    run = run_paths(spec, eps, t, x_ref, n_paths, seed, coarse_steps, model=model,
                    threads=threads)
    y0, se = run.sol.y0, run.sol.y0_stderr
    gap = abs(y0 - v_h)
    rows = [{"model": "averaged" if eps is None else f"epsilon={eps!r}", "y0": y0, "stderr": se,
             "v_pde": v_h, "v_pde_2h": v_2h if budget == budget else float("nan"),
             "fd_budget": budget, "gap": gap}]
    verdicts = [_check("Feynman-Kac agreement", "|y0 - v| - (3 se + FD budget)",
                       gap - (3 * se + budget), 0.0)]
    meta = base_metadata(spec, eps=eps, t=t, x_ref=list(x_ref), n_paths=n_paths, seeds=[seed],
                         grid=_grid_meta(grid), coarse_dt=run.ens.dt, fine_dt=run.ens.fine_dt,
                         wall_time_s=time.perf_counter() - t0)
    cols = ["model", "y0", "stderr", "v_pde", "v_pde_2h", "fd_budget", "gap"]
    rep = ConvergenceReport("feynman_kac", rows, cols, meta, verdicts)
    rep.artifacts["run"] = run
    return rep


# -------------------------------------------------------------------- plots

def plot_svg(report: ConvergenceReport, path) -> Path | None:
    """Line plot of the report's first statistic against its sweep parameter.

    Returns None when matplotlib is not installed.
    """
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    xcol = report.columns[0]
    ycols = [c for c in report.columns[1:] if all(isinstance(r.get(c), (int, float))
                                                  for r in report.rows)][:3]
    xs = [r[xcol] for r in report.rows]
    if not ycols or not all(isinstance(x, (int, float)) for x in xs):
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in ycols:
        ax.plot(xs, [r[c] for r in report.rows], marker="o", label=c)
    if xcol in ("eps", "n"):
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xcol)
    ax.set_title(report.kind)
    ax.legend()
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "homogenize-kit"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
