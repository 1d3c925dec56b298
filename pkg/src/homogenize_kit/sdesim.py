"""Euler-Maruyama ensembles for the oscillating and the averaged forward SDE.

Arrays are time-major: ``states[i, p, :]`` is path ``p`` at time ``t_grid[i]``
and ``dW[i, p, :]`` the Brownian increment over ``[t_grid[i], t_grid[i+1]]``.
Increments come from :mod:`homogenize_kit.rng`, keyed by the fine step
index, so any split of the paths over workers reproduces the same draws.

``store_every`` keeps one state in ``store_every`` fine steps (and sums the
increments in between), which bounds memory when ``dt`` must resolve a
small ``eps``.
"""
from __future__ import annotations

import csv
import io
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import coeffex as cx
from . import rng
from .cesaro import AveragedModel
from .problem import ProblemSpec, coefficient_arrays

ETA_RES = 4.0


class StepTooCoarse(ValueError):
    pass


class NonFiniteState(FloatingPointError):
    def __init__(self, path, step):
        self.path, self.step = path, step
        super().__init__(f"non-finite state on path {path} at step {step}")


# ------------------------------------------------------------------ dynamics

class EpsilonDynamics:
    """Coefficients of the oscillating system, read at ``(x1/eps, x2)``."""

    def __init__(self, spec: ProblemSpec, eps: float):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.spec, self.eps = spec, float(eps)
        self.tag = f"epsilon={self.eps!r}"

    def fast(self, x):
        return x[..., 0] / self.eps

    def coefficients(self, x):
        c = coefficient_arrays(self.spec, self.fast(x), x[..., 1:])
        return c.b, c.sigma


class AveragedDynamics:
    """Piecewise coefficients ``bbar`` and ``sigbar`` of the averaged system."""

    def __init__(self, model: AveragedModel):
        self.model = model
        self.spec = model.spec
        self.tag = "averaged"

    def coefficients(self, x):
        return self.model.bbar(x), self.model.sigbar(x)


# ------------------------------------------------------------------ ensemble

@dataclass
class PathEnsemble:
    n_paths: int
    n_steps: int
    dt: float
    t_grid: np.ndarray
    states: np.ndarray        # (n_steps+1, n_paths, d+1)
    dW: np.ndarray            # (n_steps, n_paths, k)
    seed: int
    model_tag: str
    fine_dt: float = 0.0
    store_every: int = 1
    rng_algorithm: str = rng.ALGORITHM

    @property
    def t(self) -> float:
        return float(self.t_grid[-1])

    @property
    def x0(self) -> np.ndarray:
        return self.states[0, 0].copy()

    @property
    def eps(self) -> Optional[float]:
        if self.model_tag.startswith("epsilon="):
            return float(self.model_tag.split("=", 1)[1])
        return None

    def time_index(self, s: float, warn=None) -> int:
        i = int(round(s / self.dt))
        i = min(max(i, 0), self.n_steps)
        if abs(self.t_grid[i] - s) > 1e-9 * max(1.0, abs(s)):
            msg = f"time {s} not on grid; using t = {self.t_grid[i]:.6g}"
            if warn is not None:
                warn.append(msg)
            warnings.warn(msg, stacklevel=2)
        return i

    def sup_moment(self) -> float:
        """Ensemble estimate of E sup_s |X_s|^2 over the stored grid."""
        return float(np.mean(np.max(np.sum(self.states ** 2, axis=-1), axis=0)))

    def to_csv(self, paths: Sequence[int] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d1 = self.states.shape[-1]
        w.writerow(["path", "step", "t", "X1"] + [f"X2_{i}" for i in range(1, d1)])
        for p in (range(self.n_paths) if paths is None else paths):
            for i in range(self.n_steps + 1):
                w.writerow([p, i, repr(float(self.t_grid[i]))]
                           + [repr(float(v)) for v in self.states[i, p]])
        return buf.getvalue()


# ------------------------------------------------------------ fast resolution

def sup_phi(spec: ProblemSpec, x0, t: float, n_x1: int = 2001, n_x2: int = 13) -> float:
    """Sampled sup of |phi| over a fast window and the likely x2 range."""
    x1 = np.linspace(-200.0, 200.0, n_x1)
    spread = 4.0 * np.sqrt(max(t, 1e-12)) + 1.0
    offs = np.linspace(-spread, spread, n_x2)
    x2c = np.asarray(x0, dtype=float)[1:]
    best = 0.0
    for o in offs:
        x2 = np.broadcast_to(x2c + o, (n_x1, spec.d))
        env = spec.x_env(x1, x2)
        best = max(best, float(np.sqrt(np.max(sum(cx.evaluate_array(e, env) ** 2
                                                  for e in spec.phi)))))
    return best


def max_resolved_dt(spec: ProblemSpec, eps: float, x0, t: float, eta: float = ETA_RES) -> float:
    """Largest dt allowed by ``dt <= (eps / (eta * phi_max))**2``.

    Infinite when no forward coefficient reads ``x1`` (nothing to resolve).
    """
    if not spec.forward_reads_x1():
        return np.inf
    return (eps / (eta * sup_phi(spec, x0, t))) ** 2


# ---------------------------------------------------------------- simulation

def _grid(t: float, dt: float, store_every: int):
    if not (t > 0 and dt > 0):
        raise ValueError("t and dt must be positive")
    n_fine = int(round(t / dt))
    if n_fine < 1 or abs(n_fine * dt - t) > 1e-9 * t:
        raise ValueError(f"t = {t} is not an integer multiple of dt = {dt}")
    if store_every < 1 or n_fine % store_every:
        raise ValueError(f"store_every = {store_every} must divide the {n_fine} fine steps")
    return n_fine


def _euler_chunk(dyn, x0, dt, n_fine, store_every, seed, paths, k, block=64):
    """Euler-Maruyama for one slice of path indices."""
    n = len(paths)
    d1 = len(x0)
    n_store = n_fine // store_every
    states = np.empty((n_store + 1, n, d1))
    dW_out = np.zeros((n_store, n, k))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, d1)).copy()
    states[0] = x
    sqdt = np.sqrt(dt)
    for i0 in range(0, n_fine, block):
        i1 = min(n_fine, i0 + block)
        z = rng.normals(seed, np.arange(i0, i1), paths, k)
        for i in range(i0, i1):
            dw = sqdt * z[i - i0]
            b, sig = dyn.coefficients(x)
            with np.errstate(over="ignore", invalid="ignore"):
                x = x + b * dt + np.einsum("pij,pj->pi", sig, dw)
            j = i // store_every
            dW_out[j] += dw
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.all(np.isfinite(x), axis=1))[0, 0])
                raise NonFiniteState(int(paths[bad]), i + 1)
            if (i + 1) % store_every == 0:
                states[j + 1] = x
    return states, dW_out


def _run(dyn, x0, t, dt, n_paths, seed, store_every, threads, chunk_paths):
    n_fine = _grid(t, dt, store_every)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (dyn.spec.d + 1,):
        raise ValueError(f"x0 must have {dyn.spec.d + 1} entries")
    k = dyn.spec.k
    bounds = list(range(0, n_paths, chunk_paths)) + [n_paths]
    slices = [np.arange(a, b, dtype=np.uint64) for a, b in zip(bounds[:-1], bounds[1:])]
    job = lambda p: _euler_chunk(dyn, x0, dt, n_fine, store_every, seed, p, k)  # noqa: E731
    if threads and threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, slices))
    else:
        parts = [job(p) for p in slices]
    states = np.concatenate([p[0] for p in parts], axis=1)
    dW = np.concatenate([p[1] for p in parts], axis=1)
    n_store = n_fine // store_every
    coarse = dt * store_every
    return PathEnsemble(
        n_paths=n_paths, n_steps=n_store, dt=coarse,
        t_grid=np.linspace(0.0, t, n_store + 1), states=states, dW=dW, seed=int(seed),
        model_tag=dyn.tag, fine_dt=dt, store_every=store_every)


def simulate_multiscale(spec: ProblemSpec, eps: float, x0, t: float, dt: float,
                        n_paths: int, seed: int, *, store_every: int = 1,
                        eta: float = ETA_RES, threads: int = 0,
                        chunk_paths: int = 4096) -> PathEnsemble:
    """Euler-Maruyama for the forward pair with coefficients at ``x1/eps``.

    Raises :class:`StepTooCoarse` if ``dt`` cannot resolve the oscillation.
    """
    limit = max_resolved_dt(spec, eps, x0, t, eta)
    if dt > limit * (1 + 1e-12):
        raise StepTooCoarse(
            f"dt = {dt:.3g} exceeds the fast-resolution limit {limit:.3g} for eps = {eps:g}")
    return _run(EpsilonDynamics(spec, eps), x0, t, dt, n_paths, seed, store_every,
                threads, chunk_paths)


def simulate_averaged(model: AveragedModel, x0, t: float, dt: float, n_paths: int,
                      seed: int, *, store_every: int = 1, threads: int = 0,
                      chunk_paths: int = 4096) -> PathEnsemble:
    """Euler-Maruyama for the averaged SDE driven by ``bbar`` and ``sigbar``."""
    return _run(AveragedDynamics(model), x0, t, dt, n_paths, seed, store_every,
                threads, chunk_paths)


def martingale_part(ens: PathEnsemble, dyn) -> np.ndarray:
    """``sum_i sigma(X_i) dW_i`` per path, (n_paths, d+1)."""
    total = np.zeros(ens.states.shape[1:])
    for i in range(ens.n_steps):
        _, sig = dyn.coefficients(ens.states[i])
        total += np.einsum("pij,pj->pi", sig, ens.dW[i])
    return total


def drift_part(ens: PathEnsemble, dyn) -> np.ndarray:
    total = np.zeros(ens.states.shape[1:])
    for i in range(ens.n_steps):
        b, _ = dyn.coefficients(ens.states[i])
        total += b * ens.dt
    return total


# ---------------------------------------------------------------- comparison

@dataclass
class MarginalComparison:
    rows: list                    # dicts: time, coord, mean_a, mean_b, var_a, var_b, ks, pooled_se
    warnings: list = field(default_factory=list)

    def get(self, time: float, coord: int) -> dict:
        for r in self.rows:
            if r["coord"] == coord and abs(r["time"] - time) < 1e-12:
                return r
        raise KeyError((time, coord))


def ks_statistic(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value ``c(alpha) sqrt((n+m)/(n m))``."""
    c = np.sqrt(-0.5 * np.log(alpha / 2.0))
    return float(c * np.sqrt((n + m) / (n * m)))


def pooled_se(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))


def weak_marginal_report(a: PathEnsemble, b: PathEnsemble, times) -> MarginalComparison:
    if a.states.shape[-1] != b.states.shape[-1]:
        raise ValueError("ensembles have different dimensions")
    if abs(a.t - b.t) > 1e-12:
        raise ValueError("ensembles have different horizons")
    notes = []
    rows = []
    for s in times:
        ia, ib = a.time_index(s, notes), b.time_index(s, notes)
        for c in range(a.states.shape[-1]):
            xa, xb = a.states[ia, :, c], b.states[ib, :, c]
            rows.append({
                "time": float(a.t_grid[ia]), "coord": c,
                "mean_a": float(xa.mean()), "mean_b": float(xb.mean()),
                "var_a": float(xa.var(ddof=1)), "var_b": float(xb.var(ddof=1)),
                "ks": ks_statistic(xa, xb), "pooled_se": pooled_se(xa, xb),
            })
    return MarginalComparison(rows=rows, warnings=notes)


# -------------------------------------------------------------- persistence

_MAGIC = b"HKENSMB\0"
_VERSION = 1
_HEADER = struct.Struct("<8sIQQIIQddd64s")


def save_ensemble(ens: PathEnsemble, path: str | Path) -> None:
    """Flat binary file: fixed header, then states and dW as little-endian f8."""
    d1, k = ens.states.shape[-1], ens.dW.shape[-1]
    tag = ens.model_tag.encode("utf-8")
    if len(tag) > 64:
        raise ValueError("model tag too long")
    header = _HEADER.pack(_MAGIC, _VERSION, ens.n_paths, ens.n_steps, d1, k, ens.seed,
                          ens.dt, ens.fine_dt, ens.t, tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", ens.store_every))
        fh.write(np.ascontiguousarray(ens.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.dW, dtype="<f8").tobytes())


def load_ensemble(path: str | Path) -> PathEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ValueError("truncated ensemble file")
        magic, version, n_paths, n_steps, d1, k, seed, dt, fine_dt, t, tag = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ValueError("not an ensemble file")
        if version != _VERSION:
            raise ValueError(f"unsupported ensemble file version {version}")
        (store_every,) = struct.unpack("<I", fh.read(4))
        states = np.frombuffer(fh.read(8 * (n_steps + 1) * n_paths * d1), dtype="<f8")
        dW = np.frombuffer(fh.read(8 * n_steps * n_paths * k), dtype="<f8")
    if states.size != (n_steps + 1) * n_paths * d1 or dW.size != n_steps * n_paths * k:
        raise ValueError("truncated ensemble file")
    return PathEnsemble(
        n_paths=n_paths, n_steps=n_steps, dt=dt, t_grid=np.linspace(0.0, t, n_steps + 1),
        states=states.reshape(n_steps + 1, n_paths, d1).astype(float),
        dW=dW.reshape(n_steps, n_paths, k).astype(float), seed=seed,
        model_tag=tag.rstrip(b"\0").decode("utf-8"), fine_dt=fine_dt, store_every=store_every)
