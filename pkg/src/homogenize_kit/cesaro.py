"""Cesàro averages of the fast variable and the averaged coefficient model.

For a coefficient ``g(x1, x2)`` the one-sided averages

    g^+(x2) = lim_{X -> +inf} (1/X) int_0^X g(t, x2) dt
    g^-(x2) = lim_{X -> +inf} (1/X) int_0^X g(-t, x2) dt

are computed on a geometric ladder ``X_j = X0 * growth**j`` with composite
Gauss-Legendre quadrature, stopping once two consecutive increments fall
below ``tol``.  The averaged drift, diffusion and generator are the
``rho``-weighted quotients ``(rho g)^± / rho^±`` with ``rho = 1/a00``;
the ``+`` branch applies for ``x1 > 0`` and the ``-`` branch for ``x1 <= 0``.
"""
from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import coeffex as cx
from .problem import ProblemSpec, _replace, detect_split

PLUS, MINUS = "plus", "minus"
FBAR_QUANTUM = 1e-3


class NonStabilizing(RuntimeError):
    """The Cesàro ladder reached ``j_max`` without two small increments."""

    def __init__(self, message, name=None, residual=None):
        self.name = name
        self.residual = residual
        super().__init__(message)


class FactorizationFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class AveragingControl:
    X0: float = 64.0
    growth: float = 2.0
    j_max: int = 24
    tol: float = 1e-4
    quad_points_per_unit: float = 8
    lattice_pitch: float = 0.05
    lattice_half_width: float = 6.0
    chunk: int = 1 << 17  # quadrature nodes per evaluation batch

    def __post_init__(self):
        if not self.X0 > 0 or not self.growth > 1:
            raise ValueError("need X0 > 0 and growth > 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not math.isfinite(self.X0 * self.growth ** self.j_max):
            raise ValueError("X0 * growth**j_max overflows")
        if self.quad_points_per_unit < 1:
            raise ValueError("quad_points_per_unit must be >= 1")

    def lattice(self) -> np.ndarray:
        n = int(round(self.lattice_half_width / self.lattice_pitch))
        return np.linspace(-n * self.lattice_pitch, n * self.lattice_pitch, 2 * n + 1)


# ----------------------------------------------------------------- quadrature

_GL_CACHE: dict = {}


def _gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _integrate(g, sign: float, a: float, b: float, n_per_unit: int, chunk: int):
    """Composite GL integral of ``t -> g(sign*t)`` over ``[a, b]``.

    ``g`` maps a 1-D array of abscissae to ``(N,)`` or ``(N, C)`` values.
    """
    n_panels = max(1, int(math.ceil(b - a)))
    width = (b - a) / n_panels
    nodes, weights = _gauss_legendre(int(n_per_unit))
    per_chunk = max(1, chunk // len(nodes))
    total = 0.0
    for p0 in range(0, n_panels, per_chunk):
        p1 = min(n_panels, p0 + per_chunk)
        left = a + width * np.arange(p0, p1)
        t = (left[:, None] + 0.5 * width * (nodes + 1.0)[None, :]).ravel()
        vals = np.asarray(g(sign * t), dtype=float)
        w = np.tile(0.5 * width * weights, p1 - p0)
        total = total + w @ vals
    return total


def _ladder(g, direction: str, ctl: AveragingControl, name: str | None = None):
    """Run the stabilization ladder; ``g`` may return one column or many."""
    if direction not in (PLUS, MINUS):
        raise ValueError(f"direction must be {PLUS!r} or {MINUS!r}")
    sign = 1.0 if direction == PLUS else -1.0
    n = int(ctl.quad_points_per_unit)
    # adaptive check on the first segment: refine until node doubling agrees
    base = _integrate(g, sign, 0.0, ctl.X0, n, ctl.chunk)
    while n < 256:
        fine = _integrate(g, sign, 0.0, ctl.X0, 2 * n, ctl.chunk)
        if np.max(np.abs(fine - base)) / ctl.X0 <= 0.01 * ctl.tol:
            base = fine
            break
        base, n = fine, 2 * n
    integral = np.asarray(base, dtype=float)
    X = ctl.X0
    prev = integral / X
    shape = prev.shape
    limit = np.full(shape, np.nan)
    resid = np.full(shape, np.nan)
    small_before = np.zeros(shape, dtype=bool)
    done = np.zeros(shape, dtype=bool)
    last_inc = np.full(shape, np.inf)
    for _ in range(ctl.j_max):
        X_next = X * ctl.growth
        integral = integral + _integrate(g, sign, X, X_next, n, ctl.chunk)
        X = X_next
        cur = integral / X
        inc = np.abs(cur - prev)
        small = inc < ctl.tol
        newly = small & small_before & ~done
        limit = np.where(newly, cur, limit)
        resid = np.where(newly, inc, resid)
        done |= newly
        small_before = small
        last_inc = inc
        prev = cur
        if np.all(done):
            return limit, resid
    worst = float(np.max(np.where(done, 0.0, last_inc)))
    label = f" for {name}" if name else ""
    raise NonStabilizing(
        f"Cesàro average{label} did not stabilize by X = {X:.3g} "
        f"(last increment {worst:.3g}, tol {ctl.tol:g})", name=name, residual=worst)


def cesaro_limit(g: Callable, direction: str, ctl: AveragingControl | None = None,
                 name: str | None = None) -> tuple[float, float]:
    """One-sided Cesàro average of a scalar function of ``x1``.

    ``g`` must accept a numpy array.  Returns ``(limit, residual)`` where the
    residual is the last ladder increment.
    """
    ctl = ctl or AveragingControl()
    gv = lambda t: np.broadcast_to(np.asarray(g(t), dtype=float), t.shape)  # noqa: E731
    limit, resid = _ladder(gv, direction, ctl, name)
    return float(limit), float(resid)


def cesaro_columns(g: Callable, direction: str, ctl: AveragingControl,
                   name: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Column-batched ladder: ``g(t)`` returns ``(len(t), C)`` values."""
    return _ladder(g, direction, ctl, name)


# -------------------------------------------------------------- model pieces

@dataclass
class _Branch:
    """An averaged scalar coefficient as a function of x2.

    ``kind`` is ``fixed`` (x1-free expression, evaluated directly), ``const``
    (x2-free average) or ``table`` (x2 lattice with linear interpolation).
    """
    kind: str
    expr: Optional[cx.Expr] = None
    plus: object = None
    minus: object = None

    def values(self, spec: ProblemSpec, x2, lattice=None):
        x2 = np.asarray(x2, dtype=float)
        shape = x2.shape[:-1]
        if self.kind == "fixed":
            v = cx.evaluate_array(self.expr, spec.x_env(np.zeros(shape), x2))
            return v, v
        if self.kind == "const":
            return np.full(shape, self.plus), np.full(shape, self.minus)
        return (np.interp(x2[..., 0], lattice, self.plus),
                np.interp(x2[..., 0], lattice, self.minus))


def sigma_rows(spec: ProblemSpec):
    return [list(spec.phi)] + [list(r) for r in spec.sigma_tilde]


@dataclass
class AveragedModel:
    spec: ProblemSpec
    ctl: AveragingControl
    rho: _Branch
    b_parts: list          # d+1 entries; index 0 is identically zero
    a_parts: dict          # (i, j) with i <= j -> _Branch of (rho a_ij)^± / rho^±
    fbar_mode: str         # fixed | separable | generic
    lattice: Optional[np.ndarray] = None
    g_avg: Optional[_Branch] = None   # separable mode: (rho g)^± / rho^±
    residuals: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def separable_fast_path(self) -> bool:
        return self.fbar_mode == "separable"

    @property
    def d(self) -> int:
        return self.spec.d

    # -- per-branch values, used by the mollifier and the PDE solver
    def rho_branches(self, x2):
        return self.rho.values(self.spec, x2, self.lattice)

    def rho_plus(self, x2):
        return self.rho_branches(x2)[0]

    def rho_minus(self, x2):
        return self.rho_branches(x2)[1]

    def b_branches(self, x2):
        x2 = np.asarray(x2, dtype=float)
        shape = x2.shape[:-1] + (self.d + 1,)
        plus, minus = np.zeros(shape), np.zeros(shape)
        for i in range(1, self.d + 1):
            plus[..., i], minus[..., i] = self.b_parts[i].values(self.spec, x2, self.lattice)
        return plus, minus

    def a_branches(self, x2):
        x2 = np.asarray(x2, dtype=float)
        n = self.d + 1
        shape = x2.shape[:-1] + (n, n)
        plus, minus = np.empty(shape), np.empty(shape)
        for (i, j), part in self.a_parts.items():
            p, m = part.values(self.spec, x2, self.lattice)
            plus[..., i, j] = plus[..., j, i] = p
            minus[..., i, j] = minus[..., j, i] = m
        return plus, minus

    # -- pointwise evaluators, x has a trailing axis of length d+1
    @staticmethod
    def _pick(x1, plus, minus):
        sel = np.asarray(x1) > 0
        while sel.ndim < np.ndim(plus):
            sel = sel[..., None]
        return np.where(sel, plus, minus)

    def bbar(self, x):
        x = np.asarray(x, dtype=float)
        return self._pick(x[..., 0], *self.b_branches(x[..., 1:]))

    def abar(self, x):
        x = np.asarray(x, dtype=float)
        return self._pick(x[..., 0], *self.a_branches(x[..., 1:]))

    def sigbar(self, x):
        return cholesky_factor(2.0 * self.abar(x))

    def fbar_branches(self, x2, y, z):
        """``(fbar^+, fbar^-)`` at slow state ``x2``, value ``y`` and gradient ``z``."""
        x2 = np.asarray(x2, dtype=float)
        env = self.spec.x_env(np.zeros(x2.shape[:-1]), x2)
        env.update(self.spec.yz_env(y, z))
        if self.fbar_mode == "fixed":
            v = cx.evaluate_array(self.spec.f, env)
            return v, v
        if self.fbar_mode == "separable":
            _, h, ell = self.spec.f_split
            hv = cx.evaluate_array(h, env)
            lv = cx.evaluate_array(ell, env)
            gp, gm = self.g_avg.values(self.spec, x2, self.lattice)
            return hv * gp + lv, hv * gm + lv
        return self._generic_fbar(x2, np.asarray(y, dtype=float), np.asarray(z, dtype=float))

    def fbar(self, x, y, z):
        x = np.asarray(x, dtype=float)
        return self._pick(x[..., 0], *self.fbar_branches(x[..., 1:], y, z))

    def _generic_fbar(self, x2, y, z):
        shape = np.broadcast_shapes(x2.shape[:-1], y.shape, z.shape[:-1])
        x2 = np.broadcast_to(x2, shape + x2.shape[-1:])
        y = np.broadcast_to(y, shape)
        z = np.broadcast_to(z, shape + z.shape[-1:])
        keys = np.rint(np.concatenate([x2, y[..., None], z], axis=-1).reshape(-1, 2 * self.d + 2)
                       / FBAR_QUANTUM).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        with self._lock:
            missing = [tuple(k) for k in uniq.tolist() if tuple(k) not in self.cache]
        if missing:
            computed = self._compute_fbar(np.array(missing, dtype=float) * FBAR_QUANTUM)
            with self._lock:
                for k, v in zip(missing, computed):
                    self.cache.setdefault(k, v)
        with self._lock:
            vals = np.array([self.cache[tuple(k)] for k in uniq.tolist()])
        out = vals[inverse]
        return out[:, 0].reshape(shape), out[:, 1].reshape(shape)

    def _compute_fbar(self, pts):
        """Cesàro averages of ``rho*f`` and ``rho`` at quantized points."""
        d, spec = self.d, self.spec
        x2, y, z = pts[:, :d], pts[:, d], pts[:, d + 1:]

        def integrand(t):
            tt = t[:, None]
            env = spec.x_env(tt, x2[None, :, :])
            env.update(spec.yz_env(y[None, :], z[None, :, :]))
            a00 = 0.5 * sum(cx.evaluate_array(e, env) ** 2 for e in spec.phi)
            rho = 1.0 / a00
            return np.concatenate([rho * cx.evaluate_array(spec.f, env), rho], axis=1)

        out = np.empty((len(pts), 2))
        n = len(pts)
        for col, direction in enumerate((PLUS, MINUS)):
            lim, _ = cesaro_columns(integrand, direction, self.ctl, "rho*f")
            out[:, col] = lim[:n] / lim[n:]
        return out

    def to_csv(self, x2_values=None) -> str:
        """Lattice dump of rho^±, bbar^± and abar^± (upper triangle)."""
        if self.d != 1:
            raise ValueError("lattice dump is available for d = 1")
        x2 = self.lattice if x2_values is None and self.lattice is not None else x2_values
        if x2 is None:
            x2 = self.ctl.lattice()
        x2 = np.asarray(x2, dtype=float)
        pts = x2[:, None]
        rp, rm = self.rho_branches(pts)
        bp, bm = self.b_branches(pts)
        ap, am = self.a_branches(pts)
        n = self.d + 1
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
        header = ["x2", "rho_plus", "rho_minus"]
        header += [f"bbar_plus_{i}" for i in range(n)]
        header += [f"abar_plus_{i}{j}" for i, j in pairs]
        header += [f"bbar_minus_{i}" for i in range(n)]
        header += [f"abar_minus_{i}{j}" for i, j in pairs]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in range(len(x2)):
            row = [x2[r], rp[r], rm[r], *bp[r], *(ap[r, i, j] for i, j in pairs),
                   *bm[r], *(am[r, i, j] for i, j in pairs)]
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def cholesky_factor(m):
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure(f"2*abar is not positive definite: {exc}") from None


# ------------------------------------------------------------------ building

def _average_product(spec, ctl, exprs_fn, reads_x2, name, lattice):
    """(rho * prod)^± as a const pair or a lattice table pair.

    ``exprs_fn(env)`` returns the product values (without rho) for an env.
    """
    def rho_of(env):
        return 1.0 / (0.5 * sum(cx.evaluate_array(e, env) ** 2 for e in spec.phi))

    if not reads_x2:
        def g(t):
            env = spec.x_env(t, np.zeros(t.shape + (spec.d,)))
            return rho_of(env) * exprs_fn(env)
        p, rp = cesaro_limit(g, PLUS, ctl, name)
        m, rm = cesaro_limit(g, MINUS, ctl, name)
        return "const", p, m, max(rp, rm)
    if spec.d != 1:
        raise NotImplementedError(
            f"x2-dependent average of {name} needs d = 1 (lattice tables are one-dimensional)")

    def g(t):
        env = spec.x_env(t[:, None], lattice[None, :, None])
        return rho_of(env) * exprs_fn(env)
    p, rp = cesaro_columns(g, PLUS, ctl, name)
    m, rm = cesaro_columns(g, MINUS, ctl, name)
    return "table", p, m, float(max(rp.max(), rm.max()))


def build_averaged_model(spec: ProblemSpec, ctl: AveragingControl | None = None,
                         auto_split: bool = True) -> AveragedModel:
    """Average every x1-dependent coefficient of ``spec``.

    x1-free coefficients pass through unchanged (they are fixed points of
    the averaging); the others are ``(rho g)^± / rho^±``.  With
    ``auto_split`` an ``f`` without ``f_split`` is factored when its tree
    allows it (see ``problem.detect_split``).
    """
    ctl = ctl or AveragingControl()
    d = spec.d
    lattice = ctl.lattice() if d == 1 else None
    residuals = {}
    phi_vars = frozenset().union(*(cx.free_vars(e) for e in spec.phi))
    rho_x1, rho_x2 = "x1" in phi_vars, bool(phi_vars - {"x1"})

    def make(name, exprs, fn):
        """Branch for coefficient ``name`` built from ``exprs`` via ``fn(env)``."""
        vars_ = frozenset().union(*(cx.free_vars(e) for e in exprs)) if exprs else frozenset()
        if "x1" not in vars_:
            return None  # x1-free: (rho g)^± / rho^± == g, caller passes it through
        kind, p, m, r = _average_product(spec, ctl, fn, bool(vars_ - {"x1"}) or rho_x2,
                                         name, lattice)
        residuals[name] = r
        return _Branch(kind, plus=p, minus=m)

    # rho^±
    if rho_x1:
        kind, p, m, r = _average_product(spec, ctl, lambda env: 1.0, rho_x2, "rho", lattice)
        residuals["rho"] = r
        rho = _Branch(kind, plus=p, minus=m)
    else:
        rho_expr = cx.Binary("/", cx.Num(1.0), cx.Binary(
            "*", cx.Num(0.5), _sum_of_squares(spec.phi)))
        rho = _Branch("fixed", expr=rho_expr)

    def quotient(avg: _Branch | None, expr: cx.Expr) -> _Branch:
        if avg is None:
            return _Branch("fixed", expr=expr)
        return _divide(avg, rho, spec, lattice)

    b_parts = [_Branch("const", plus=0.0, minus=0.0)]
    for i, e in enumerate(spec.b_tilde):
        avg = make(f"rho*b_{i + 1}", [e], lambda env, e=e: cx.evaluate_array(e, env))
        b_parts.append(quotient(avg, e))

    rows = sigma_rows(spec)
    a_parts = {}
    for i in range(d + 1):
        for j in range(i, d + 1):
            expr = a_entry_expr(rows[i], rows[j])
            if i == 0 and j == 0 and rho_x1:
                # rho * a00 == 1 identically, so abar_00 = 1 / rho^±
                a_parts[(0, 0)] = _reciprocal(rho)
                continue
            exprs = rows[i] + rows[j]
            avg = make(f"rho*a_{i}{j}", exprs, lambda env, ex=expr: cx.evaluate_array(ex, env))
            a_parts[(i, j)] = quotient(avg, expr)

    g_avg = None
    if auto_split and "x1" in cx.free_vars(spec.f) and spec.f_split is None:
        split = detect_split(spec)
        if split is not None:
            spec = _replace(spec, f_split=split)
    if "x1" not in cx.free_vars(spec.f):
        fmode = "fixed"
    elif spec.f_split is not None:
        fmode = "separable"
        g = spec.f_split[0]
        avg = make("rho*g", [g], lambda env: cx.evaluate_array(g, env))
        g_avg = quotient(avg, g)
    else:
        fmode = "generic"

    model = AveragedModel(spec=spec, ctl=ctl, rho=rho, b_parts=b_parts, a_parts=a_parts,
                          fbar_mode=fmode, lattice=lattice, g_avg=g_avg, residuals=residuals)
    _check_factorizable(model)
    return model


def _sum_of_squares(exprs):
    out = None
    for e in exprs:
        sq = cx.Binary("*", e, e)
        out = sq if out is None else cx.Binary("+", out, sq)
    return out


def a_entry_expr(row_i, row_j):
    """Expression for a_ij = 1/2 sum_k sigma_ik sigma_jk."""
    acc = None
    for si, sj in zip(row_i, row_j):
        term = cx.Binary("*", si, sj)
        acc = term if acc is None else cx.Binary("+", acc, term)
    return cx.Binary("*", cx.Num(0.5), acc)


def _as_table(br: _Branch, spec, lattice):
    if br.kind == "table":
        return br.plus, br.minus
    if br.kind == "const":
        return br.plus, br.minus
    v = br.values(spec, lattice[:, None])[0]
    return v, v


def _divide(num: _Branch, den: _Branch, spec, lattice) -> _Branch:
    if num.kind == "const" and den.kind in ("const",):
        return _Branch("const", plus=num.plus / den.plus, minus=num.minus / den.minus)
    if num.kind == "const" and den.kind == "fixed" and lattice is None:
        raise NotImplementedError("x2-dependent averages need d = 1")
    np_, nm = _as_table(num, spec, lattice)
    dp, dm = _as_table(den, spec, lattice)
    p = np.broadcast_to(np.asarray(np_) / np.asarray(dp), lattice.shape).copy()
    m = np.broadcast_to(np.asarray(nm) / np.asarray(dm), lattice.shape).copy()
    return _Branch("table", plus=p, minus=m)


def _reciprocal(br: _Branch) -> _Branch:
    if br.kind == "fixed":
        return _Branch("fixed", expr=cx.Binary("/", cx.Num(1.0), br.expr))
    return _Branch(br.kind, plus=1.0 / np.asarray(br.plus), minus=1.0 / np.asarray(br.minus))


def _check_factorizable(model: AveragedModel):
    if model.d == 1:
        x2 = model.lattice[:, None]
    else:
        x2 = np.zeros((1, model.d))
    for m in model.a_branches(x2):
        cholesky_factor(2.0 * m)
