"""Corrector ODE in x1 and its scaling diagnostics.

For frozen ``(x2, y, z)`` the corrector solves::

    a00(x1/eps, x2) u'' = f(x1/eps, x2, y, z) - fbar(x, y, z),   u(0) = u'(0) = 0

i.e. ``u'' = rho (f - fbar)``, integrated twice by cumulative trapezoid
from 0 outward.  The averaged ``fbar`` jumps at ``x1 = 0``; the right half
starts from the ``plus`` limit and the left half from the ``minus`` limit so
each side is integrated from its own one-sided value.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .cesaro import AveragedModel
from .problem import ProblemSpec, coefficient_arrays, eval_f


@dataclass
class CorrectorSolution:
    x1_grid: np.ndarray
    u: np.ndarray
    du: np.ndarray
    rhs: np.ndarray          # u'' = rho (f - fbar); node 0 holds the x1 <= 0 branch
    params: dict = field(default_factory=dict)

    @property
    def weight(self) -> float:
        """``1 + |x2|^2 + |y|^2 + |z|^2``."""
        p = self.params
        return float(1.0 + np.sum(np.square(p["x2"])) + p["y"] ** 2 + np.sum(np.square(p["z"])))

    @property
    def beta2(self) -> np.ndarray:
        """``u / (x1^2 (1 + ...))``, NaN at ``x1 = 0``."""
        x = self.x1_grid
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.u / (x ** 2 * self.weight)
        out[x == 0] = np.nan
        return out

    @property
    def beta1(self) -> np.ndarray:
        """``du / (x1 (1 + ...))``, NaN at ``x1 = 0``."""
        x = self.x1_grid
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.du / (x * self.weight)
        out[x == 0] = np.nan
        return out

    def residual(self, a00: np.ndarray | None = None) -> np.ndarray:
        """``a00 u'' - a00 rhs`` at interior nodes by second differences (node 0 excluded).

        Returns an array over ``x1_grid[1:-1]`` with NaN at the origin.
        """
        h = self.x1_grid[1] - self.x1_grid[0]
        d2 = (self.u[2:] - 2 * self.u[1:-1] + self.u[:-2]) / h ** 2
        a = np.ones_like(self.u) if a00 is None else a00
        res = a[1:-1] * (d2 - self.rhs[1:-1])
        res[self.x1_grid[1:-1] == 0] = np.nan
        return res

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "x1", "u", "du", "beta2"])
        eps = repr(float(self.params.get("eps", float("nan"))))
        for x, u, du, b in zip(self.x1_grid, self.u, self.du, self.beta2):
            w.writerow([eps, repr(float(x)), repr(float(u)), repr(float(du)), repr(float(b))])
        return buf.getvalue()


def symmetric_grid(L: float, h: float) -> np.ndarray:
    if not (L > 0 and h > 0):
        raise ValueError("L and h must be positive")
    n = int(round(L / h))
    return h * np.arange(-n, n + 1)


def integrate_twice(x1: np.ndarray, rhs_right: np.ndarray, rhs_left: np.ndarray):
    """``(u, du)`` with ``u'' = rhs``, ``u(0) = du(0) = 0``.

    ``rhs_right`` and ``rhs_left`` are the right side on ``x1`` with the
    one-sided value at 0 used by each half.
    """
    n = len(x1) // 2
    if x1[n] != 0:
        raise ValueError("grid must be symmetric with a node at 0")
    h = x1[1] - x1[0]
    du = np.empty_like(x1)
    u = np.empty_like(x1)
    du[n:] = cumulative_trapezoid(rhs_right[n:], dx=h, initial=0.0)
    u[n:] = cumulative_trapezoid(du[n:], dx=h, initial=0.0)
    du[n::-1] = cumulative_trapezoid(rhs_left[n::-1], dx=-h, initial=0.0)
    u[n::-1] = cumulative_trapezoid(du[n::-1], dx=-h, initial=0.0)
    return u, du


def solve_corrector(spec: ProblemSpec, model: AveragedModel | None, eps: float, x2, y: float,
                    z, L: float = 10.0, h: float = 1e-3,
                    rhs: Optional[Callable] = None) -> CorrectorSolution:
    """Corrector on ``[-L, L]`` at frozen ``(x2, y, z)``.

    ``rhs`` bypasses ``rho (f - fbar)`` with a callable of ``x1`` (manufactured
    solutions); ``spec`` and ``model`` may then be None.
    """
    x1 = symmetric_grid(L, h)
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    params = {"eps": float(eps), "x2": x2, "y": float(y), "z": z, "L": float(L), "h": float(h)}
    if rhs is not None:
        g = np.asarray(rhs(x1), dtype=float)
        u, du = integrate_twice(x1, g, g)
        return CorrectorSolution(x1, u, du, g, params)

    N = len(x1)
    X2 = np.broadcast_to(x2, (N, len(x2)))
    Y = np.full(N, float(y))
    Z = np.broadcast_to(z, (N, len(z)))
    rho = coefficient_arrays(spec, x1 / eps, X2).rho
    fv = eval_f(spec, x1 / eps, X2, Y, Z)
    fp, fm = model.fbar_branches(X2, Y, Z)
    g = rho * (fv - np.where(x1 > 0, fp, fm))
    g_right = rho * (fv - fp)
    u, du = integrate_twice(x1, g_right, g)
    params["a00"] = 1.0 / rho
    return CorrectorSolution(x1, u, du, g, params)


def corrector_residual(sol: CorrectorSolution) -> np.ndarray:
    """Self-consistency residual ``|a00 u'' - (f - fbar)|`` away from ``x1 = 0``."""
    return np.abs(sol.residual(sol.params.get("a00")))


def corrector_derivatives(spec: ProblemSpec, model: AveragedModel, eps: float, x2, y: float, z,
                          L: float = 10.0, h: float = 1e-3, delta: float = 1e-4) -> dict:
    """Central differences of ``u`` in ``x2``, ``y`` and each ``z`` component."""
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))

    def u_at(x2_, y_, z_):
        return solve_corrector(spec, model, eps, x2_, y_, z_, L, h).u

    out = {}
    for i in range(len(x2)):
        e = np.zeros_like(x2)
        e[i] = delta
        out[f"x2_{i + 1}"] = (u_at(x2 + e, y, z) - u_at(x2 - e, y, z)) / (2 * delta)
    out["y"] = (u_at(x2, y + delta, z) - u_at(x2, y - delta, z)) / (2 * delta)
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = delta
        out[f"z_{i}"] = (u_at(x2, y, z + e) - u_at(x2, y, z - e)) / (2 * delta)
    return out


@dataclass
class DiagnosticTable:
    rows: list       # dicts: eps, threshold, sup_beta2, sup_beta1, nodes

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["eps", "threshold", "sup_beta2", "sup_beta1", "nodes"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()


def scaling_diagnostic(sols) -> DiagnosticTable:
    """Per eps: sup of ``|beta2|`` and ``|beta1|`` over ``|x1| >= sqrt(eps)``.

    Rows are sorted by decreasing eps.
    """
    sols = list(sols)
    if not sols:
        raise ValueError("empty sweep")
    if len(sols) < 3:
        raise ValueError("scaling diagnostic needs at least three eps values")
    rows = []
    for s in sorted(sols, key=lambda s: -s.params["eps"]):
        eps = s.params["eps"]
        thr = float(np.sqrt(eps))
        mask = np.abs(s.x1_grid) >= thr
        if not mask.any():
            raise ValueError(f"no grid nodes with |x1| >= sqrt(eps) = {thr:g}")
        rows.append({"eps": float(eps), "threshold": thr,
                     "sup_beta2": float(np.max(np.abs(s.beta2[mask]))),
                     "sup_beta1": float(np.max(np.abs(s.beta1[mask]))),
                     "nodes": int(mask.sum())})
    return DiagnosticTable(rows)
