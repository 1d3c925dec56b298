"""``homogenize-kit`` command line.

Global flags (``--config``, ``--seed``, ``--out``, ``--serial``, ``--threads``)
go before or after the subcommand.  A TOML config may hold a ``[problem]``
table (``benchmark = "BM1_tanh_fast"`` or a full problem definition),
top-level ``seed``/``threads``/``out`` keys and one table per subcommand whose
keys mirror the long options (``[sweep-eps] eps = [1, 0.5, 0.25]``).
Command-line values win over the config.

Exit status: 0 when every verdict passes, 2 when one fails, 1 on error.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import __version__
from . import bsde as bs
from . import cesaro as ce
from . import corrector as co
from . import harness as hk
from . import pdesolve as pd
from . import problem as pb
from . import sdesim as sd

DEFAULT_SEED = 2024
EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _global_flags(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=d, help="TOML config file")
    g.add_argument("--seed", type=int, default=d, help="base seed (u64)")
    g.add_argument("--out", default=d, help="output directory (default: current)")
    g.add_argument("--serial", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="single-threaded bit-exact mode")
    g.add_argument("--threads", type=int, default=d, help="worker threads for sweep entries")
    g.add_argument("--plot", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="also write SVG line plots (needs matplotlib)")


def _problem_flags(p):
    p.add_argument("--benchmark", help="benchmark id (overrides [problem] in the config)")
    p.add_argument("--problem", help="problem definition TOML file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homogenize-kit", allow_abbrev=False,
                                     description="Averaging experiments for multiscale SDE-BSDE systems.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        _problem_flags(p)
        _global_flags(p, suppress=True)
        return p

    p = add("average", "dump averaged coefficients on the x2 lattice")
    p.add_argument("--pitch", type=float, help="x2 lattice pitch")

    p = add("simulate", "Euler-Maruyama ensemble")
    p.add_argument("--eps", type=float, help="scale (omit for the averaged model)")
    p.add_argument("--t", type=float)
    p.add_argument("--x0", type=_floats, help="comma separated start point")
    p.add_argument("--n-paths", type=int)
    p.add_argument("--coarse-steps", type=int, help="stored steps on [0, t]")
    p.add_argument("--dump-paths", type=int, help="write the first N paths as CSV")
    p.add_argument("--save", help="write the ensemble to this binary file")

    p = add("solve-pde", "explicit finite-difference solve")
    p.add_argument("--eps", type=float, help="scale (omit for the averaged model)")
    p.add_argument("--mollify", type=int, help="mollification index n for the averaged model")
    p.add_argument("--t", type=float)
    p.add_argument("--x-ref", type=_floats)
    p.add_argument("--L", type=float, help="half width of the box")
    p.add_argument("--h1", type=float)
    p.add_argument("--h2", type=float)
    p.add_argument("--snapshots", type=int, help="stored time levels")
    p.add_argument("--p", type=_ints, help="Sobolev exponents for the diagnostics")

    p = add("solve-bsde", "regression solve along an ensemble")
    p.add_argument("--ensemble", help="ensemble file written by 'simulate --save'")
    p.add_argument("--eps", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--x0", type=_floats)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--coarse-steps", type=int)

    p = add("corrector", "corrector ODE in x1 and its scaling table")
    p.add_argument("--eps", type=_floats, help="comma separated scales")
    p.add_argument("--x2", type=_floats)
    p.add_argument("--y", type=float)
    p.add_argument("--z", type=_floats)
    p.add_argument("--L", type=float)
    p.add_argument("--h", type=float)

    p = add("sweep-eps", "PDE error against the averaged solve over eps")
    p.add_argument("--eps", type=_floats)
    p.add_argument("--t", type=float)
    p.add_argument("--x-ref", type=_floats)
    p.add_argument("--no-control", action="store_true", default=None)

    p = add("sweep-n", "mollified solves over n")
    p.add_argument("--n", type=_ints)
    p.add_argument("--t", type=float)
    p.add_argument("--p", type=_ints)

    p = add("sweep-law", "KS marginals and tightness over eps")
    p.add_argument("--eps", type=_floats)
    p.add_argument("--t", type=float)
    p.add_argument("--times", type=_floats, help="comparison times in (0, t)")
    p.add_argument("--n-paths", type=int)
    p.add_argument("--coarse-steps", type=int)

    p = add("diagnose", "auxiliary processes and Feynman-Kac cross-check")
    p.add_argument("--what", choices=["auxproc", "feynman-kac", "all"])
    p.add_argument("--eps", type=float)
    p.add_argument("--n", type=_ints)
    p.add_argument("--t", type=float)
    p.add_argument("--n-paths", type=int)
    return parser


# ---------------------------------------------------------------- settings

class Settings:
    """Command-line values over config values over defaults."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.section = config.get(args.command, {})

    def get(self, name, default=None):
        v = getattr(self.args, name.replace("-", "_"), None)
        if v is not None:
            return v
        for key in (name, name.replace("-", "_")):
            if key in self.section:
                return self.section[key]
        return default

    def glob(self, name, default=None):
        v = getattr(self.args, name, None)
        if v is not None and v is not False:
            return v
        return self.config.get(name, default)

    @property
    def seed(self) -> int:
        return int(self.glob("seed", DEFAULT_SEED))

    @property
    def threads(self) -> int:
        return 0 if self.glob("serial", False) else int(self.glob("threads", 0))

    @property
    def out(self) -> Path:
        return Path(self.glob("out", "."))

    def spec(self) -> pb.ProblemSpec:
        if self.args.benchmark:
            return pb.registry(self.args.benchmark)
        if self.args.problem:
            return pb.load_problem(self.args.problem)
        if "problem" in self.config:
            return pb.problem_from_mapping(self.config["problem"])
        return pb.registry("BM1_tanh_fast")


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return pb.tomllib.load(fh)


def _vec(v):
    return None if v is None else [float(x) for x in (v if isinstance(v, (list, tuple)) else [v])]


# -------------------------------------------------------------- subcommands

def _emit_report(rep: hk.ConvergenceReport, st: Settings, stem=None) -> int:
    paths = rep.write(st.out, stem, plot=bool(st.glob("plot", False)))
    for line in rep.verdict_lines():
        print(line)
    print(f"wrote {paths['csv']}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_average(st: Settings) -> int:
    spec = st.spec()
    pitch = st.get("pitch")
    ctl = ce.AveragingControl(lattice_pitch=float(pitch)) if pitch else None
    model = ce.build_averaged_model(spec, ctl)
    st.out.mkdir(parents=True, exist_ok=True)
    path = st.out / "average.csv"
    path.write_text(model.to_csv())
    print(f"fbar mode: {model.fbar_mode}")
    print(f"wrote {path}")
    return EXIT_OK


def _simulate(st: Settings, spec):
    eps = st.get("eps")
    t = float(st.get("t", hk.T_DEFAULT))
    x0 = _vec(st.get("x0")) or list(hk.X_REF)
    n_paths = int(st.get("n-paths", 10_000))
    coarse = int(st.get("coarse-steps", 64))
    if eps is not None:
        dt, k = hk.step_plan(spec, float(eps), x0, t, coarse)
        # the fast-resolution rule ties dt to eps^2; show the cost up front
        print(f"eps = {eps:g}: dt = {dt:.3g}, {coarse * k} steps x {n_paths} paths")
    return hk.run_paths(spec, None if eps is None else float(eps), t, x0, n_paths, st.seed,
                        coarse, threads=st.threads)


def cmd_simulate(st: Settings) -> int:
    spec = st.spec()
    eps = st.get("eps")
    t = float(st.get("t", hk.T_DEFAULT))
    x0 = _vec(st.get("x0")) or list(hk.X_REF)
    n_paths = int(st.get("n-paths", 10_000))
    coarse = int(st.get("coarse-steps", 64))
    if eps is None:
        model = ce.build_averaged_model(spec)
        ens = sd.simulate_averaged(model, x0, t, t / (coarse * 8), n_paths, st.seed,
                                   store_every=8, threads=st.threads)
    else:
        dt, k = hk.step_plan(spec, float(eps), x0, t, coarse)
        print(f"eps = {eps:g}: dt = {dt:.3g}, {coarse * k} steps x {n_paths} paths")
        ens = sd.simulate_multiscale(spec, float(eps), x0, t, dt, n_paths, st.seed,
                                     store_every=k, threads=st.threads)
    st.out.mkdir(parents=True, exist_ok=True)
    summary = st.out / "simulate.csv"
    lines = ["t,coord,mean,std"]
    for i in range(ens.n_steps + 1):
        for c in range(ens.states.shape[-1]):
            col = ens.states[i, :, c]
            lines.append(f"{float(ens.t_grid[i])!r},{c},{float(col.mean())!r},{float(col.std())!r}")
    summary.write_text("\n".join(lines) + "\n")
    print(f"E sup |X|^2 = {ens.sup_moment():.6g}")
    print(f"wrote {summary}")
    n_dump = st.get("dump-paths")
    if n_dump:
        p = st.out / "paths.csv"
        p.write_text(ens.to_csv(range(min(int(n_dump), ens.n_paths))))
        print(f"wrote {p}")
    if st.get("save"):
        sd.save_ensemble(ens, st.get("save"))
        print(f"wrote {st.get('save')}")
    return EXIT_OK


def cmd_solve_pde(st: Settings) -> int:
    spec = st.spec()
    eps = st.get("eps")
    n = st.get("mollify")
    t = float(st.get("t", hk.T_DEFAULT))
    x_ref = _vec(st.get("x-ref")) or list(hk.X_REF)
    grid = hk.default_grid(float(eps) if eps is not None and spec.reads_x1() else None, t,
                           L=float(st.get("L", 4.0)), h1=float(st.get("h1", 1 / 64)),
                           h2=float(st.get("h2", 1 / 16)))
    if eps is not None:
        model = pd.EpsilonModel(spec, float(eps))
    else:
        model = ce.build_averaged_model(spec)
        if n is not None:
            model = pd.mollify(model, int(n))
    print(f"grid {grid.shape[0]}x{grid.shape[1]} nodes")
    fld = pd.solve_semilinear(model, t, grid, n_snapshots=int(st.get("snapshots", 11)))
    print(f"{fld.n_time} explicit steps of ds = {fld.ds:.3g}")
    st.out.mkdir(parents=True, exist_ok=True)
    path = st.out / "field.csv"
    path.write_text(fld.to_csv())
    rows = ["p,lp_v,lp_dsv,lp_grad,lp_hess,w12,gn"]
    box = pd.Box((-1.0, 1.0), (-1.0, 1.0))
    for p in (st.get("p") or [2, 3, 4]):
        norms = pd.sobolev_norms(fld, p, box)
        vals = [*norms, pd.w12_norm(norms, p), pd.gagliardo_nirenberg_ratio(fld, p, box)]
        rows.append(",".join([str(p)] + [repr(float(v)) for v in vals]))
    diag = st.out / "field_norms.csv"
    diag.write_text("\n".join(rows) + "\n")
    print(f"v(t, x_ref) = {fld.value_at(x_ref):.10g}")
    print(f"wrote {path}")
    print(f"wrote {diag}")
    return EXIT_OK


def cmd_solve_bsde(st: Settings) -> int:
    spec = st.spec()
    if st.get("ensemble"):
        ens = sd.load_ensemble(st.get("ensemble"))
        if ens.eps is None:
            dyn = sd.AveragedDynamics(ce.build_averaged_model(spec))
        else:
            dyn = sd.EpsilonDynamics(spec, ens.eps)
        sol = bs.solve_regression(ens, dyn)
    else:
        run = _simulate(st, spec)
        ens, sol = run.ens, run.sol
    a, b = bs.apriori_bound_estimate(sol, ens)
    st.out.mkdir(parents=True, exist_ok=True)
    path = st.out / "bsde.csv"
    path.write_text("model,y0,y0_stderr,picard_iters,dropped_steps,e_sup_y2,e_int_z2,n_paths,dt\n"
                    f"{ens.model_tag},{sol.y0!r},{sol.y0_stderr!r},{sol.picard_iters},"
                    f"{len(sol.dropped_columns)},{a!r},{b!r},{ens.n_paths},{ens.dt!r}\n")
    print(f"y0 = {sol.y0:.8g} +- {sol.y0_stderr:.3g}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_corrector(st: Settings) -> int:
    spec = st.spec()
    model = ce.build_averaged_model(spec)
    eps_list = _vec(st.get("eps")) or [1.0, 0.25, 0.0625]
    x2 = _vec(st.get("x2")) or [0.0] * spec.d
    z = _vec(st.get("z")) or [0.0] * spec.k
    y = float(st.get("y", 0.0))
    L, h = float(st.get("L", 10.0)), float(st.get("h", 1e-3))
    sols = [co.solve_corrector(spec, model, e, x2, y, z, L=L, h=h) for e in eps_list]
    st.out.mkdir(parents=True, exist_ok=True)
    path = st.out / "corrector.csv"
    text = sols[0].to_csv()
    for s in sols[1:]:
        text += s.to_csv().split("\n", 1)[1]
    path.write_text(text)
    print(f"wrote {path}")
    if len(sols) >= 3:
        tab = co.scaling_diagnostic(sols)
        p2 = st.out / "corrector_scaling.csv"
        p2.write_text(tab.to_csv())
        print(f"wrote {p2}")
    return EXIT_OK


def cmd_sweep_eps(st: Settings) -> int:
    rep = hk.eps_sweep(st.spec(), _vec(st.get("eps")) or (1.0, 0.5, 0.25, 0.125),
                       t=float(st.get("t", hk.T_DEFAULT)),
                       x_ref=_vec(st.get("x-ref")) or hk.X_REF,
                       control=not st.get("no-control", False), threads=st.threads)
    return _emit_report(rep, st)


def cmd_sweep_n(st: Settings) -> int:
    rep = hk.moll_sweep(st.spec(), st.get("n") or (4, 8, 16, 32),
                        t=float(st.get("t", hk.T_DEFAULT)), p_list=st.get("p") or (2, 3, 4),
                        threads=st.threads)
    return _emit_report(rep, st)


def cmd_sweep_law(st: Settings) -> int:
    t = float(st.get("t", hk.T_DEFAULT))
    law = hk.law_sweep(st.spec(), _vec(st.get("eps")) or (1.0, 0.25, 0.0625), t=t,
                       s_list=_vec(st.get("times")), n_paths=int(st.get("n-paths", 10_000)),
                       seed=st.seed, coarse_steps=int(st.get("coarse-steps", 64)),
                       threads=st.threads)
    tight = hk.tightness_report(runs=law.artifacts["runs"])
    codes = [_emit_report(law, st), _emit_report(tight, st)]
    return max(codes)


def cmd_diagnose(st: Settings) -> int:
    what = st.get("what", "all")
    spec = st.spec()
    t = float(st.get("t", hk.T_DEFAULT))
    n_paths = int(st.get("n-paths", 10_000))
    codes = []
    if what in ("auxproc", "all"):
        rep = hk.auxproc_report(None, eps=float(st.get("eps", 0.125)), spec=spec,
                                n_list=st.get("n") or (8, 16, 32), t=t, n_paths=n_paths,
                                seed=st.seed, threads=st.threads)
        codes.append(_emit_report(rep, st))
    if what in ("feynman-kac", "all"):
        eps = st.get("eps") if what == "feynman-kac" else None
        rep = hk.feynman_kac_check(spec, eps=None if eps is None else float(eps), t=t,
                                   n_paths=n_paths, seed=st.seed, threads=st.threads)
        codes.append(_emit_report(rep, st, stem="feynman_kac" if eps is None
                                  else f"feynman_kac_eps{eps:g}"))
    return max(codes)


COMMANDS = {
    "average": cmd_average, "simulate": cmd_simulate, "solve-pde": cmd_solve_pde,
    "solve-bsde": cmd_solve_bsde, "corrector": cmd_corrector, "sweep-eps": cmd_sweep_eps,
    "sweep-n": cmd_sweep_n, "sweep-law": cmd_sweep_law, "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        st = Settings(args, _load_config(args.config))
        code = COMMANDS[args.command](st)
    except Exception as exc:      # report, never traceback, on bad input or solver failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"done in {time.perf_counter() - t0:.1f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
