"""Multiscale problem data: coefficients, structural bounds, benchmarks.

A :class:`ProblemSpec` holds the fast-row diffusion ``phi``, the slow drift
``b_tilde`` and diffusion ``sigma_tilde``, the BSDE generator ``f`` and the
datum ``H`` as coefficient expressions, together with the constants
``(lambda, C1, K, p)`` that the structural checks are run against.

Coefficients are always evaluated at the *fast* abscissa: callers pass
``x1 / eps`` for the oscillating model and ``x1`` otherwise.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import coeffex as cx

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BENCHMARK_IDS = ("BM1_tanh_fast", "BM2_periodic", "BM3_x1_free")


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    lam: float
    C1: float
    K: float
    p: int


@dataclass(frozen=True)
class ProblemSpec:
    d: int
    k: int
    phi: tuple
    b_tilde: tuple
    sigma_tilde: tuple  # d rows of k Exprs
    f: cx.Expr
    H: cx.Expr
    bounds: Bounds
    name: str = "custom"
    # (g, h, ell) with f == g*h + ell, g over (x1, x2), h over x2, ell free of x1
    f_split: Optional[tuple] = None

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("d must be a positive integer")
        if self.k != self.d + 1:
            raise ValidationError(f"k must equal d+1 = {self.d + 1}, got {self.k}")
        if len(self.phi) != self.k:
            raise ValidationError(f"phi needs {self.k} entries, got {len(self.phi)}")
        if len(self.b_tilde) != self.d:
            raise ValidationError(f"b_tilde needs {self.d} entries")
        if len(self.sigma_tilde) != self.d or any(len(r) != self.k for r in self.sigma_tilde):
            raise ValidationError(f"sigma_tilde must be {self.d}x{self.k}")
        xs = cx.slot_vars(self.d)
        for e in (*self.phi, *self.b_tilde, *(e for r in self.sigma_tilde for e in r), self.H):
            _check_slot(e, xs)
        _check_slot(self.f, cx.slot_vars(self.d, yz=True))
        if self.f_split is not None:
            g, h, ell = self.f_split
            _check_slot(g, xs)
            _check_slot(h, xs - {"x1"})
            _check_slot(ell, cx.slot_vars(self.d, yz=True) - {"x1"})

    # --- variable bookkeeping
    @property
    def x2_names(self) -> list[str]:
        return [f"x2_{i}" for i in range(1, self.d + 1)]

    @property
    def z_names(self) -> list[str]:
        return [f"z_{i}" for i in range(self.d + 1)]

    def forward_exprs(self):
        return (*self.phi, *self.b_tilde, *(e for r in self.sigma_tilde for e in r))

    def reads_x1(self) -> bool:
        """True when any forward coefficient or ``f`` depends on x1."""
        return any("x1" in cx.free_vars(e) for e in (*self.forward_exprs(), self.f))

    def forward_reads_x1(self) -> bool:
        return any("x1" in cx.free_vars(e) for e in self.forward_exprs())

    def x_env(self, x1, x2) -> dict:
        x2 = np.asarray(x2, dtype=float)
        env = {"x1": np.asarray(x1, dtype=float)}
        for i, name in enumerate(self.x2_names):
            env[name] = x2[..., i]
        return env

    def yz_env(self, y, z) -> dict:
        z = np.asarray(z, dtype=float)
        env = {"y": np.asarray(y, dtype=float)}
        for i, name in enumerate(self.z_names):
            env[name] = z[..., i]
        return env

    def with_bounds(self, **changes) -> "ProblemSpec":
        b = self.bounds
        new = Bounds(**{**b.__dict__, **changes})
        return _replace(self, bounds=new)


def _replace(spec: ProblemSpec, **changes) -> ProblemSpec:
    fields = dict(spec.__dict__)
    fields.update(changes)
    return ProblemSpec(**fields)


def _check_slot(e, allowed):
    extra = cx.free_vars(e) - allowed
    if extra:
        raise ValidationError(
            f"{cx.to_source(e)!r} uses variables {sorted(extra)} not allowed in its slot")


# ------------------------------------------------------------- evaluation

@dataclass
class Coefficients:
    """Coefficient arrays at a batch of points; leading dims are the batch."""
    sigma: np.ndarray  # (..., d+1, k)
    b: np.ndarray      # (..., d+1)
    a: np.ndarray      # (..., d+1, d+1)

    @property
    def a00(self):
        return self.a[..., 0, 0]

    @property
    def rho(self):
        return 1.0 / self.a00


def coefficient_arrays(spec: ProblemSpec, x1, x2) -> Coefficients:
    """Evaluate ``sigma``, ``b`` and ``a = sigma sigma^T / 2`` elementwise.

    ``x1`` has the batch shape, ``x2`` the batch shape plus a trailing ``d``.
    """
    env = spec.x_env(x1, x2)
    shape = np.broadcast_shapes(*(np.shape(v) for v in env.values()))
    d1, k = spec.d + 1, spec.k
    sigma = np.empty(shape + (d1, k))
    for j, e in enumerate(spec.phi):
        sigma[..., 0, j] = cx.evaluate_array(e, env)
    for i, row in enumerate(spec.sigma_tilde):
        for j, e in enumerate(row):
            sigma[..., i + 1, j] = cx.evaluate_array(e, env)
    b = np.zeros(shape + (d1,))
    for i, e in enumerate(spec.b_tilde):
        b[..., i + 1] = cx.evaluate_array(e, env)
    a = 0.5 * np.einsum("...ik,...jk->...ij", sigma, sigma)
    return Coefficients(sigma=sigma, b=b, a=a)


def eval_coefficients(spec: ProblemSpec, x1: float, x2) -> dict:
    """Scalar coefficient evaluation at ``(x1, x2)``.

    Returns a dict with ``a``, ``a00``, ``rho``, ``b`` and ``sigma``.
    """
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    c = coefficient_arrays(spec, np.float64(x1), x2)
    a00 = float(c.a00)
    if a00 <= 0.0:
        raise cx.CoeffexError("domain", f"a00 = {a00} is not positive at x1={x1}")
    return {"a": c.a, "a00": a00, "rho": 1.0 / a00, "b": c.b, "sigma": c.sigma}


def eval_f(spec: ProblemSpec, x1, x2, y, z):
    env = spec.x_env(x1, x2)
    env.update(spec.yz_env(y, z))
    return cx.evaluate_array(spec.f, env)


def eval_H(spec: ProblemSpec, x1, x2):
    return cx.evaluate_array(spec.H, spec.x_env(x1, x2))


# ------------------------------------------------------------- validation

@dataclass
class SampleBox:
    x1: tuple = (-10.0, 10.0)
    x2: tuple = (-3.0, 3.0)
    y: tuple = (-3.0, 3.0)
    z: tuple = (-3.0, 3.0)


@dataclass
class ValidationReport:
    min_ellipticity: float
    max_a00: float
    max_growth_ratio: float      # sum_i (a~_ii + b_i^2) / (1 + |x2|^2)
    max_f_growth_ratio: float    # |f| / (1 + |x2|^p + |y| + |z|)
    max_lipschitz: float
    bounds: Bounds
    failures: list = field(default_factory=list)  # (check, value, point)

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_if_failed(self):
        if self.failures:
            check, value, point = self.failures[0]
            raise ValidationError(f"{check} violated (value {value:.6g}) at {point}")


def validate(spec: ProblemSpec, sample_box: SampleBox | None = None,
             n_samples: int = 2000, seed: int = 0) -> ValidationReport:
    """Check ellipticity, (A2) growth and (C1) bounds on random samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    box = sample_box or SampleBox()
    rng = np.random.default_rng(seed)
    d, bnd = spec.d, spec.bounds
    x1 = rng.uniform(*box.x1, size=n_samples)
    x2 = rng.uniform(*box.x2, size=(n_samples, d))
    y = rng.uniform(*box.y, size=n_samples)
    z = rng.uniform(*box.z, size=(n_samples, d + 1))
    pts = lambda i: {"x1": x1[i], "x2": x2[i].tolist()}  # noqa: E731

    c = coefficient_arrays(spec, x1, x2)
    failures = []
    eig = np.linalg.eigvalsh(c.a)[..., 0]
    i = int(np.argmin(eig))
    if eig[i] < bnd.lam:
        failures.append(("ellipticity", float(eig[i]), pts(i)))
    i = int(np.argmax(c.a00))
    if c.a00[i] > bnd.C1:
        failures.append(("A2(i) a00 <= C1", float(c.a00[i]), pts(i)))
    a_tilde_trace = np.trace(c.a[..., 1:, 1:], axis1=-2, axis2=-1)
    x2sq = np.sum(x2 ** 2, axis=-1)
    growth = (a_tilde_trace + np.sum(c.b[..., 1:] ** 2, axis=-1)) / (1.0 + x2sq)
    i = int(np.argmax(growth))
    if growth[i] > bnd.C1:
        failures.append(("A2(ii) growth", float(growth[i]), pts(i)))

    fval = eval_f(spec, x1, x2, y, z)
    znorm = np.linalg.norm(z, axis=-1)
    fgrowth = np.abs(fval) / (1.0 + np.sqrt(x2sq) ** bnd.p + np.abs(y) + znorm)
    i = int(np.argmax(fgrowth))
    if fgrowth[i] > bnd.K:
        failures.append(("C1(ii) f growth", float(fgrowth[i]), pts(i)))

    # difference quotients: random pairs plus single-coordinate moves
    quotients = []
    y2 = rng.uniform(*box.y, size=n_samples)
    z2 = rng.uniform(*box.z, size=(n_samples, d + 1))
    num = np.abs(fval - eval_f(spec, x1, x2, y2, z2))
    quotients.append(num / (np.abs(y - y2) + np.linalg.norm(z - z2, axis=-1)))
    h = 1e-3 * (box.y[1] - box.y[0])
    quotients.append(np.abs(eval_f(spec, x1, x2, y + h, z) - fval) / h)
    for j in range(d + 1):
        zj = z.copy()
        zj[:, j] += h
        quotients.append(np.abs(eval_f(spec, x1, x2, y, zj) - fval) / h)
    q = np.stack(quotients)
    lip_idx = np.unravel_index(int(np.argmax(q)), q.shape)
    max_lip = float(q[lip_idx])
    # small slack for rounding in the finite-difference quotients
    if max_lip > bnd.K * (1 + 1e-9) + 1e-9:
        failures.append(("C1(i) Lipschitz", max_lip, pts(lip_idx[1])))

    return ValidationReport(
        min_ellipticity=float(eig.min()), max_a00=float(c.a00.max()),
        max_growth_ratio=float(growth.max()), max_f_growth_ratio=float(fgrowth.max()),
        max_lipschitz=max_lip, bounds=bnd, failures=failures)


# ---------------------------------------------------------------- registry

def _bm_fast(name: str, fn: str) -> ProblemSpec:
    src = {
        "phi": [f"sqrt(2/(2+{fn}(x1)))", "0"],
        "b_tilde": [f"{fn}(x1)"],
        "sigma_tilde": [["0", "1"]],
        "f": f"{fn}(x1)*cos(x2_1) - y + 0.5*z_1",
        "H": "exp(-x1^2 - x2_1^2)",
        "f_split": [f"{fn}(x1)", "cos(x2_1)", "-y + 0.5*z_1"],
    }
    return from_sources(name, 1, src, Bounds(lam=0.3, C1=1.5, K=1.0, p=1))


def registry(benchmark_id: str) -> ProblemSpec:
    """Fully specified benchmark problems (all with d = 1, k = 2)."""
    if benchmark_id == "BM1_tanh_fast":
        return _bm_fast(benchmark_id, "tanh")
    if benchmark_id == "BM2_periodic":
        return _bm_fast(benchmark_id, "sin")
    if benchmark_id == "BM3_x1_free":
        src = {
            "phi": ["1", "0"],
            "b_tilde": ["-0.2*x2_1"],
            "sigma_tilde": [["0", "1"]],
            "f": "-y + 0.5*z_1 + cos(x2_1)",
            "H": "exp(-x1^2 - x2_1^2)",
        }
        return from_sources(benchmark_id, 1, src, Bounds(lam=0.25, C1=1.0, K=1.0, p=1))
    raise KeyError(f"unknown benchmark {benchmark_id!r}; expected one of {BENCHMARK_IDS}")


def from_sources(name: str, d: int, src: dict, bounds: Bounds) -> ProblemSpec:
    xs, fx = cx.slot_vars(d), cx.slot_vars(d, yz=True)
    split = src.get("f_split")
    if split is not None:
        split = (cx.parse(split[0], xs), cx.parse(split[1], xs),
                 cx.parse(split[2], fx))
    return ProblemSpec(
        d=d, k=d + 1,
        phi=tuple(cx.parse(s, xs) for s in src["phi"]),
        b_tilde=tuple(cx.parse(s, xs) for s in src["b_tilde"]),
        sigma_tilde=tuple(tuple(cx.parse(s, xs) for s in row) for row in src["sigma_tilde"]),
        f=cx.parse(src["f"], fx),
        H=cx.parse(src["H"], xs),
        bounds=bounds, name=name, f_split=split,
    )


def variant(spec: ProblemSpec, name: str | None = None, **sources) -> ProblemSpec:
    """Copy of ``spec`` with some coefficients replaced from source text."""
    d = spec.d
    xs, fx = cx.slot_vars(d), cx.slot_vars(d, yz=True)
    changes = {}
    for key, val in sources.items():
        if key in ("phi", "b_tilde"):
            changes[key] = tuple(cx.parse(s, xs) for s in val)
        elif key == "sigma_tilde":
            changes[key] = tuple(tuple(cx.parse(s, xs) for s in r) for r in val)
        elif key == "H":
            changes[key] = cx.parse(val, xs)
        elif key == "f":
            changes[key] = cx.parse(val, fx)
            changes.setdefault("f_split", None)
        elif key == "f_split":
            changes[key] = None if val is None else (
                cx.parse(val[0], xs), cx.parse(val[1], xs), cx.parse(val[2], fx))
        else:
            raise KeyError(key)
    changes["name"] = name or f"{spec.name}*"
    return _replace(spec, **changes)


# ------------------------------------------------------ problem definition file

def load_problem(path: str | Path) -> ProblemSpec:
    with open(path, "rb") as fh:
        return problem_from_mapping(tomllib.load(fh), default_name=Path(path).stem)


def problem_from_mapping(data: dict, default_name: str = "custom") -> ProblemSpec:
    if "benchmark" in data:
        return registry(data["benchmark"])
    try:
        d = int(data["d"])
        k = int(data.get("k", d + 1))
        src = {key: data[key] for key in ("phi", "b_tilde", "sigma_tilde", "f", "H")}
        bounds = Bounds(lam=float(data["lambda"]), C1=float(data["C1"]),
                        K=float(data["K"]), p=int(data["p"]))
    except KeyError as exc:
        raise ValidationError(f"problem definition is missing key {exc.args[0]!r}") from None
    if "f_split" in data:
        src["f_split"] = data["f_split"]
    spec = from_sources(data.get("name", default_name), d, src, bounds)
    if k != spec.k:
        raise ValidationError(f"k must equal d+1 = {d + 1}, got {k}")
    return spec


def dump_problem(spec: ProblemSpec) -> str:
    """Serialize to the flat TOML problem-definition format."""
    q = json.dumps  # TOML basic strings accept JSON string escapes
    s = cx.to_source
    lines = [
        f"name = {q(spec.name)}",
        f"d = {spec.d}",
        f"k = {spec.k}",
        f"phi = [{', '.join(q(s(e)) for e in spec.phi)}]",
        f"b_tilde = [{', '.join(q(s(e)) for e in spec.b_tilde)}]",
        "sigma_tilde = [" + ", ".join(
            "[" + ", ".join(q(s(e)) for e in row) + "]" for row in spec.sigma_tilde) + "]",
        f"f = {q(s(spec.f))}",
        f"H = {q(s(spec.H))}",
        f"lambda = {spec.bounds.lam!r}",
        f"C1 = {spec.bounds.C1!r}",
        f"K = {spec.bounds.K!r}",
        f"p = {spec.bounds.p}",
    ]
    if spec.f_split is not None:
        lines.append(f"f_split = [{', '.join(q(s(e)) for e in spec.f_split)}]")
    return "\n".join(lines) + "\n"


def f_split_residual(spec: ProblemSpec, x1, x2, y, z) -> np.ndarray:
    """``f - (g*h + ell)`` at the given points (zero for a valid split)."""
    g, h, ell = spec.f_split
    env = spec.x_env(x1, x2)
    env.update(spec.yz_env(y, z))
    split = (cx.evaluate_array(g, env) * cx.evaluate_array(h, env)
             + cx.evaluate_array(ell, env))
    return cx.evaluate_array(spec.f, env) - split


def sample_sup_phi(spec: ProblemSpec, x2_center: Sequence[float], n: int = 4001,
                   fast_range: float = 100.0) -> float:
    """Sampled sup of ``|phi|`` over a fast-variable window around ``x2_center``."""
    x1 = np.linspace(-fast_range, fast_range, n)
    x2 = np.broadcast_to(np.asarray(x2_center, dtype=float), (n, spec.d))
    env = spec.x_env(x1, x2)
    sq = sum(cx.evaluate_array(e, env) ** 2 for e in spec.phi)
    return float(np.sqrt(np.max(sq)))


# ------------------------------------------------------------ split detection

def _terms(e: cx.Expr, sign: float = 1.0):
    """Flatten top-level sums into ``(sign, term)`` pairs."""
    if isinstance(e, cx.Binary) and e.op in "+-":
        right = sign if e.op == "+" else -sign
        return _terms(e.left, sign) + _terms(e.right, right)
    if isinstance(e, cx.Unary) and e.op == "-":
        return _terms(e.operand, -sign)
    return [(sign, e)]


def _factors(e: cx.Expr):
    if isinstance(e, cx.Binary) and e.op == "*":
        return _factors(e.left) + _factors(e.right)
    return [e]


def _product(fs):
    out = fs[0]
    for f in fs[1:]:
        out = cx.Binary("*", out, f)
    return out


def _signed_sum(terms):
    out = None
    for s, t in terms:
        if out is None:
            out = t if s > 0 else cx.Unary("-", t)
        else:
            out = cx.Binary("+" if s > 0 else "-", out, t)
    return cx.Num(0.0) if out is None else out


def detect_split(spec: ProblemSpec, n_check: int = 64, seed: int = 0):
    """``(g, h, ell)`` with ``f = g*h + ell`` read off the expression tree, or None.

    Works when the summands of ``f`` that read ``x1`` are free of ``y, z``.
    A single such summand is factored into its ``x1`` and ``x2`` parts,
    several are collected into ``g`` with ``h = 1``.  The split is confirmed
    numerically at random points.
    """
    terms = _terms(spec.f)
    fast = [(s, t) for s, t in terms if "x1" in cx.free_vars(t)]
    slow = [(s, t) for s, t in terms if "x1" not in cx.free_vars(t)]
    xs = set(cx.slot_vars(spec.d))
    if not fast or any(cx.free_vars(t) - xs for _, t in fast):
        return None
    ell = _signed_sum(slow)
    if len(fast) > 1:
        # several x-only summands: g collects them all, h = 1
        split = (_signed_sum(fast), cx.Num(1.0), ell)
    else:
        sign, term = fast[0]
        facs = _factors(term)
        gf = [f for f in facs if "x1" in cx.free_vars(f)]
        hf = [f for f in facs if "x1" not in cx.free_vars(f)]
        h = _product(hf) if hf else cx.Num(1.0)
        if sign < 0:
            h = cx.Unary("-", h)
        split = (_product(gf), h, ell)
    cand = _replace(spec, f_split=split)
    r = np.random.default_rng(seed)
    resid = f_split_residual(cand, r.uniform(-5, 5, n_check), r.normal(size=(n_check, spec.d)),
                             r.normal(size=n_check), r.normal(size=(n_check, spec.k)))
    if np.max(np.abs(resid)) > 1e-9:
        return None
    return split
