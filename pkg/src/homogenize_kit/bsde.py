"""Least-squares Monte Carlo for the backward equation along a PathEnsemble.

Backward induction on the ensemble grid ``t_0 < ... < t_n``::

    zeta_i = P_i[(Y_{i+1} - P_i Y_{i+1}) dW_i] / dt      (martingale density)
    Z_i    = zeta_i sigma(X_i)^{-1}
    Y_i    = P_i[Y_{i+1} + f(X_i, Y_i, Z_i) dt]          (Picard in Y_i)

where ``P_i`` is the least-squares projection on polynomials of ``X_i``.
``Y_n = H(X_t)`` exactly and ``P_0`` is the sample mean, so ``y0`` is a
single number.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import coeffex as cx
from .problem import eval_f
from .sdesim import AveragedDynamics, EpsilonDynamics, PathEnsemble


class ContractionViolated(ValueError):
    pass


class RankDeficientBasis(np.linalg.LinAlgError):
    pass


class NonFiniteTarget(FloatingPointError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    family: str = "polynomial"
    degree: int = 3
    include_indicator: bool = False
    rank_tol: float = 1e-10

    def __post_init__(self):
        if self.family != "polynomial":
            raise ValueError(f"unsupported basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    def describe(self) -> str:
        split = "+sign(x1) split" if self.include_indicator else ""
        return f"poly(total degree {self.degree}){split}"


def default_basis(dyn) -> BasisSpec:
    # averaged coefficients can only jump at x1 = 0 when the problem reads x1
    return BasisSpec(include_indicator=isinstance(dyn, AveragedDynamics) and dyn.spec.reads_x1())


def design_matrix(x: np.ndarray, basis: BasisSpec) -> np.ndarray:
    """Monomials of the standardized state up to total degree ``basis.degree``."""
    n, d1 = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    u = (x - mu) / sd
    cols = []
    for deg in range(basis.degree + 1):
        for combo in itertools.combinations_with_replacement(range(d1), deg):
            c = np.ones(n)
            for j in combo:
                c = c * u[:, j]
            cols.append(c)
    phi = np.column_stack(cols)
    if basis.include_indicator:
        pos = (x[:, 0] > 0)[:, None]
        phi = np.concatenate([np.where(pos, phi, 0.0), np.where(pos, 0.0, phi)], axis=1)
        # a side with no paths contributes empty columns; those are not degeneracies
        phi = phi[:, np.any(phi != 0.0, axis=0)]
    return phi


class Projector:
    """Orthogonal projection onto the span of the (pivot-pruned) design columns."""

    def __init__(self, phi: np.ndarray, rank_tol: float = 1e-10):
        n, m = phi.shape
        q, r, piv = scipy.linalg.qr(phi, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > rank_tol * diag[0])) if diag.size and diag[0] > 0 else 0
        if rank == 0 or rank > n:
            raise RankDeficientBasis(f"design matrix has rank {rank} with {n} samples")
        self.q = q[:, :rank]
        self.rank = rank
        self.dropped = m - rank
        self.kept = np.sort(piv[:rank])

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if np.all(y == y[:1]):
            # constants lie in the span; skip the rounding of q q^T
            return y.copy()
        return self.q @ (self.q.T @ y)


@dataclass
class BsdeSolution:
    y: np.ndarray            # (n_steps+1, n_paths)
    z: np.ndarray            # (n_steps, n_paths, d+1), gradient form
    zeta: np.ndarray         # (n_steps, n_paths, k) = Z sigma
    fvals: np.ndarray        # (n_steps, n_paths) generator along the final iterate
    y0: float
    y0_stderr: float
    basis_spec: BasisSpec
    picard_iters: int
    dropped_columns: dict = field(default_factory=dict)
    dt: float = 0.0


def generator_for(dyn) -> Callable:
    """Generator ``f(x, y, z)`` on raw states for the given dynamics."""
    if isinstance(dyn, EpsilonDynamics):
        spec, eps = dyn.spec, dyn.eps
        return lambda x, y, z: eval_f(spec, x[..., 0] / eps, x[..., 1:], y, z)
    if isinstance(dyn, AveragedDynamics):
        return dyn.model.fbar
    raise TypeError("unknown dynamics")


def terminal_values(ens: PathEnsemble, spec, H: cx.Expr) -> np.ndarray:
    x = ens.states[-1]
    return cx.evaluate_array(H, spec.x_env(x[:, 0], x[:, 1:]))


def solve_regression(ens: PathEnsemble, dyn, H: cx.Expr | None = None, *,
                     generator: Optional[Callable] = None, basis: BasisSpec | None = None,
                     picard_max: int = 50, picard_tol: float = 1e-13,
                     lipschitz: float | None = None) -> BsdeSolution:
    """Backward regression along ``ens``.

    ``dyn`` supplies ``sigma`` (and the default generator): an
    :class:`EpsilonDynamics` or :class:`AveragedDynamics` matching the ensemble.
    """
    spec = dyn.spec
    H = spec.H if H is None else H
    f = generator or generator_for(dyn)
    basis = basis or default_basis(dyn)
    K = spec.bounds.K if lipschitz is None else lipschitz
    dt = ens.dt
    if K * dt >= 1.0:
        raise ContractionViolated(f"K*dt = {K * dt:.3g} >= 1; the implicit step may not contract")

    n, P = ens.n_steps, ens.n_paths
    d1, k = ens.states.shape[-1], ens.dW.shape[-1]
    y = np.empty((n + 1, P))
    z = np.empty((n, P, d1))
    zeta = np.empty((n, P, k))
    fvals = np.empty((n, P))
    y[n] = terminal_values(ens, spec, H)
    dropped = {}
    max_iters = 0
    for i in range(n - 1, -1, -1):
        x = ens.states[i]
        if i == 0:
            proj = _mean_projector
        else:
            proj = Projector(design_matrix(x, basis), basis.rank_tol)
            if proj.dropped:
                dropped[i] = proj.dropped
        nxt = y[i + 1]
        resid = nxt - proj(nxt)
        zeta_i = proj(resid[:, None] * ens.dW[i]) / dt
        _, sig = dyn.coefficients(x)
        z_i = np.linalg.solve(np.swapaxes(sig, -1, -2), zeta_i[..., None])[..., 0]
        yi = proj(nxt)
        it = 0
        for it in range(1, picard_max + 1):
            fi = f(x, yi, z_i)
            target = nxt + fi * dt
            if not np.all(np.isfinite(target)):
                raise NonFiniteTarget(f"non-finite regression target at step {i}")
            new = proj(target)
            delta = np.max(np.abs(new - yi))
            yi = new
            if delta <= picard_tol * max(1.0, np.max(np.abs(yi))):
                break
        max_iters = max(max_iters, it)
        y[i], z[i], zeta[i], fvals[i] = yi, z_i, zeta_i, f(x, yi, z_i)
    if dropped:
        warnings.warn(f"dropped dependent basis columns at {len(dropped)} steps", stacklevel=2)

    # pathwise H + sum f dt has mean y0 (projections preserve means) and gives
    # an honest Monte Carlo error bar
    pathwise = y[n] + fvals.sum(axis=0) * dt
    stderr = float(pathwise.std(ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    return BsdeSolution(y=y, z=z, zeta=zeta, fvals=fvals, y0=float(y[0, 0]),
                        y0_stderr=stderr, basis_spec=basis, picard_iters=max_iters,
                        dropped_columns=dropped, dt=dt)


def _mean_projector(v):
    return np.broadcast_to(v.mean(axis=0), v.shape).copy()


# ------------------------------------------------------------ diagnostics

def martingale_integral(sol: BsdeSolution, ens: PathEnsemble) -> np.ndarray:
    """Running ``int Z dM = sum zeta_i . dW_i``, shape (n_steps+1, n_paths)."""
    inc = np.einsum("ipk,ipk->ip", sol.zeta, ens.dW)
    return np.concatenate([np.zeros((1, ens.n_paths)), np.cumsum(inc, axis=0)])


def apriori_bound_estimate(sol: BsdeSolution, ens: PathEnsemble) -> tuple[float, float]:
    """``(E sup_s |Y_s|^2, E sum_i |Z_i sigma(X_i)|^2 dt)``."""
    sup_y_sq = float(np.mean(np.max(sol.y ** 2, axis=0)))
    z_energy = float(np.mean(np.sum(np.sum(sol.zeta ** 2, axis=-1), axis=0)) * ens.dt)
    return sup_y_sq, z_energy


def conditional_variation_bound(sol: BsdeSolution, ens: PathEnsemble,
                                generator: Callable | None = None) -> float:
    """Ensemble estimate of ``E int_0^t |f(X, Y, Z)| ds`` (left Riemann sum)."""
    if generator is None:
        vals = sol.fvals
    else:
        vals = np.stack([generator(ens.states[i], sol.y[i], sol.z[i])
                         for i in range(ens.n_steps)])
    return float(np.mean(np.sum(np.abs(vals), axis=0)) * ens.dt)


def upcrossings(y_path, a: float, b: float) -> int:
    """Completed up-crossings of ``[a, b]``: reach ``<= a``, then ``>= b``."""
    if not a < b:
        raise ValueError("need a < b")
    count, below = 0, False
    for v in np.asarray(y_path, dtype=float):
        if not below:
            below = v <= a
        elif v >= b:
            count += 1
            below = False
    return count


def upcrossings_paths(y: np.ndarray, a: float, b: float) -> np.ndarray:
    """Vectorized :func:`upcrossings` over the columns of ``y`` (time-major)."""
    if not a < b:
        raise ValueError("need a < b")
    y = np.asarray(y, dtype=float)
    count = np.zeros(y.shape[1:], dtype=np.int64)
    below = np.zeros(y.shape[1:], dtype=bool)
    for row in y:
        up = below & (row >= b)
        count += up
        below = np.where(below, ~up, row <= a)
    return count
