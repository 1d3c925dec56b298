import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homogenize_kit import cesaro as ce
from homogenize_kit import coeffex as cx
from homogenize_kit import problem as pb


def lncosh_average(X):
    """(1/X) int_0^X (2 + tanh t) dt = 2 + ln cosh(X)/X, in overflow-safe form."""
    lncosh = X - math.log(2.0) + math.log1p(math.exp(-2.0 * X))
    return 2.0 + lncosh / X


@pytest.fixture(scope="module")
def bm1():
    return ce.build_averaged_model(pb.registry("BM1_tanh_fast"))


@pytest.fixture(scope="module")
def bm2():
    return ce.build_averaged_model(pb.registry("BM2_periodic"))


@pytest.fixture(scope="module")
def bm3():
    return ce.build_averaged_model(pb.registry("BM3_x1_free"))


def test_constant_is_exact():
    lim, res = ce.cesaro_limit(lambda t: 5.0, "plus")
    assert lim == pytest.approx(5.0, abs=1e-12)
    assert res <= 1e-12


def test_tanh_against_lncosh_oracle():
    plus_oracle = lncosh_average(1e6)
    minus_oracle = 4.0 - plus_oracle  # tanh is odd
    plus, _ = ce.cesaro_limit(lambda t: 2 + np.tanh(t), "plus")
    minus, _ = ce.cesaro_limit(lambda t: 2 + np.tanh(t), "minus")
    assert abs(plus - plus_oracle) <= 1e-3 and abs(plus - 3) <= 1e-3
    assert abs(minus - minus_oracle) <= 1e-3 and abs(minus - 1) <= 1e-3


@pytest.mark.parametrize("direction", ["plus", "minus"])
def test_sin_average(direction):
    lim, res = ce.cesaro_limit(lambda t: 2 + np.sin(t), direction)
    assert abs(lim - 2.0) <= 1e-3
    assert 0 <= res < 1e-4


def test_non_stabilizing_is_reported():
    ctl = ce.AveragingControl(j_max=8)
    with pytest.raises(ce.NonStabilizing) as info:
        ce.cesaro_limit(lambda t: np.sin(np.log1p(np.abs(t))), "plus", ctl, name="slow")
    assert info.value.name == "slow"
    assert info.value.residual > ctl.tol


def test_bad_direction():
    with pytest.raises(ValueError):
        ce.cesaro_limit(lambda t: t, "up")


def test_control_validation():
    with pytest.raises(ValueError):
        ce.AveragingControl(growth=1.0)
    with pytest.raises(ValueError):
        ce.AveragingControl(tol=0.0)
    with pytest.raises(ValueError):
        ce.AveragingControl(X0=1e300, j_max=100)


_POOL = [
    lambda t: 2 + np.tanh(t),
    lambda t: 2 + np.sin(t),
    lambda t: np.exp(-t * t),
    lambda t: 1.0 / (1.0 + t * t),
    lambda t: np.tanh(t - 3.0) * 0.5,
    lambda t: np.cos(2 * t) + 1.0,
]


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, len(_POOL) - 1),
       st.integers(0, len(_POOL) - 1), st.sampled_from(["plus", "minus"]))
def test_linearity(alpha, beta, i, j, direction):
    g, h = _POOL[i], _POOL[j]
    # the stopping residual is not an error bound for periodic integrands, whose
    # running mean oscillates like 1/X; each limit is good to a few 1e-4
    both, _ = ce.cesaro_limit(lambda t: alpha * g(t) + beta * h(t), direction)
    lg, _ = ce.cesaro_limit(g, direction)
    lh, _ = ce.cesaro_limit(h, direction)
    assert abs(both - (alpha * lg + beta * lh)) <= 5e-4 * (1 + abs(alpha) + abs(beta))


def test_column_ladder_matches_scalar():
    shifts = np.array([0.0, 1.0, -2.0])
    lim, _ = ce.cesaro_columns(lambda t: 2 + np.tanh(t[:, None] - shifts[None, :]),
                               "plus", ce.AveragingControl())
    for k, s in enumerate(shifts):
        ref, _ = ce.cesaro_limit(lambda t: 2 + np.tanh(t - s), "plus")
        assert lim[k] == pytest.approx(ref, abs=1e-12)


# ---- averaged model -------------------------------------------------------

def test_bm3_is_a_fixed_point(bm3):
    spec = bm3.spec
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(-5, 5, 50), rng.normal(size=50)])
    assert np.all(bm3.bbar(x)[:, 0] == 0)
    np.testing.assert_array_equal(bm3.bbar(x)[:, 1], -0.2 * x[:, 1])
    np.testing.assert_array_equal(bm3.abar(x), np.broadcast_to(0.5 * np.eye(2), (50, 2, 2)))
    y, z = rng.normal(size=50), rng.normal(size=(50, 2))
    np.testing.assert_array_equal(bm3.fbar(x, y, z), pb.eval_f(spec, x[:, 0], x[:, 1:], y, z))
    assert bm3.fbar_mode == "fixed"
    assert np.all(bm3.rho_plus(x[:, 1:]) == 2.0) and np.all(bm3.rho_minus(x[:, 1:]) == 2.0)


def test_bm1_rho_and_drift(bm1):
    x2 = np.array([[0.0], [2.5]])
    assert np.allclose(bm1.rho_plus(x2), 3.0, atol=1e-3)
    assert np.allclose(bm1.rho_minus(x2), 1.0, atol=1e-3)
    bp, bm = bm1.b_branches(x2)
    assert np.allclose(bp[:, 1], 1.0, atol=1e-3) and np.allclose(bm[:, 1], -1.0, atol=1e-3)
    assert np.all(bp[:, 0] == 0) and np.all(bm[:, 0] == 0)


def test_bm2_averages(bm2):
    x2 = np.array([[0.0]])
    assert bm2.rho_plus(x2)[0] == pytest.approx(2.0, abs=1e-3)
    assert bm2.rho_minus(x2)[0] == pytest.approx(2.0, abs=1e-3)
    # (rho b)^± = avg of (2 + sin) sin = 1/2, divided by rho^± = 2
    bp, bm = bm2.b_branches(x2)
    assert bp[0, 1] == pytest.approx(0.25, abs=1e-3) and bm[0, 1] == pytest.approx(0.25, abs=1e-3)


def test_bm1_fbar_closed_form(bm1):
    rng = np.random.default_rng(7)
    n = 20
    x2 = rng.uniform(-3, 3, (n, 1))
    y = rng.uniform(-3, 3, n)
    z = rng.uniform(-3, 3, (n, 2))
    fp, fm = bm1.fbar_branches(x2, y, z)
    base = -y + 0.5 * z[:, 1]
    np.testing.assert_allclose(fp, np.cos(x2[:, 0]) + base, atol=1e-3)
    np.testing.assert_allclose(fm, -np.cos(x2[:, 0]) + base, atol=1e-3)


def test_fbar_eval_examples(bm1):
    z0 = np.zeros(2)
    assert bm1.fbar(np.array([1.0, 0.0]), 0.0, z0) == pytest.approx(1.0, abs=1e-3)
    assert bm1.fbar(np.array([-1.0, 0.0]), 0.0, z0) == pytest.approx(-1.0, abs=1e-3)


def test_jump_convention(bm1):
    for x2 in (-1.0, 0.0, 0.7):
        ap, am = bm1.a_branches(np.array([[x2]]))
        np.testing.assert_array_equal(bm1.abar(np.array([1e-12, x2])), ap[0])
        np.testing.assert_array_equal(bm1.abar(np.array([0.0, x2])), am[0])
        np.testing.assert_array_equal(bm1.abar(np.array([-0.0, x2])), am[0])
    assert bm1.abar(np.array([1e-12, 0.0]))[0, 0] != bm1.abar(np.array([0.0, 0.0]))[0, 0]


@pytest.mark.parametrize("name", pb.BENCHMARK_IDS)
def test_ellipticity_preserved_and_sigbar(name):
    model = ce.build_averaged_model(pb.registry(name))
    lam = model.spec.bounds.lam
    x2 = model.lattice[:, None]
    for a in model.a_branches(x2):
        assert np.max(np.abs(a - np.swapaxes(a, -1, -2))) == 0
        assert np.linalg.eigvalsh(a)[:, 0].min() >= lam - 1e-8
    x = np.column_stack([np.linspace(-3, 3, 61), np.linspace(-4, 4, 61)])
    s = model.sigbar(x)
    np.testing.assert_allclose(s @ np.swapaxes(s, -1, -2), 2 * model.abar(x), atol=1e-10)
    assert np.all(np.triu(s, 1) == 0) and np.all(np.diagonal(s, axis1=-2, axis2=-1) > 0)


def test_fbar_lipschitz(bm1):
    rng = np.random.default_rng(3)
    n = 2000
    x = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-4, 4, n)])
    y1, y2 = rng.uniform(-3, 3, (2, n))
    z1, z2 = rng.uniform(-3, 3, (2, n, 2))
    q = np.abs(bm1.fbar(x, y1, z1) - bm1.fbar(x, y2, z2)) / (
        np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=-1))
    assert q.max() <= bm1.spec.bounds.K + 1e-6


def test_factorization_failure():
    with pytest.raises(ce.FactorizationFailure):
        ce.cholesky_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))


# ---- generic (non-separable) fbar path ------------------------------------

@pytest.fixture(scope="module")
def bm1_generic():
    spec = pb.variant(pb.registry("BM1_tanh_fast"), f_split=None)
    return ce.build_averaged_model(spec, auto_split=False)


def test_generic_fbar_matches_separable(bm1_generic, bm1):
    assert bm1_generic.fbar_mode == "generic" and bm1.separable_fast_path
    # points on the 1e-3 key lattice: quantization is exact there
    x = np.array([[0.5, 0.25], [-2.0, -1.5], [1.0, 0.0], [-0.125, 2.0]])
    y = np.array([0.5, -1.0, 0.0, 2.25])
    z = np.array([[0.0, 1.0], [1.0, -2.0], [0.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(bm1_generic.fbar(x, y, z), bm1.fbar(x, y, z), atol=1e-3)
    assert len(bm1_generic.cache) == 4


def test_generic_fbar_memo_is_thread_safe(bm1_generic):
    x = np.array([[0.3, 0.1], [-0.3, 0.1]])
    y = np.array([0.2, 0.2])
    z = np.array([[0.0, 0.4], [0.0, 0.4]])
    results = []

    def work():
        results.append(bm1_generic.fbar(x, y, z))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for r in results[1:]:
        np.testing.assert_array_equal(r, results[0])


def test_x2_dependent_rho_uses_lattice():
    # phi depends on x1 and x2: rho = 2 + tanh(x1) * (1 + x2^2)/(2 + x2^2)
    spec = pb.variant(pb.registry("BM1_tanh_fast"),
                      phi=["sqrt(2/(2+tanh(x1)*(1+x2_1^2)/(2+x2_1^2)))", "0"], f_split=None,
                      f="-y + 0.5*z_1")
    model = ce.build_averaged_model(spec, ce.AveragingControl(lattice_half_width=2.0))
    assert model.rho.kind == "table"
    x2 = np.array([[0.0], [1.0], [1.5]])
    r = (1 + x2[:, 0] ** 2) / (2 + x2[:, 0] ** 2)
    np.testing.assert_allclose(model.rho_plus(x2), 2 + r, atol=2e-3)
    np.testing.assert_allclose(model.rho_minus(x2), 2 - r, atol=2e-3)


def test_average_csv_dump(bm1):
    text = bm1.to_csv(np.array([-1.0, 0.0, 1.0]))
    lines = text.strip().split("\n")
    assert lines[0].startswith("x2,rho_plus,rho_minus,bbar_plus_0,bbar_plus_1,abar_plus_00")
    assert len(lines) == 4
    row = dict(zip(lines[0].split(","), map(float, lines[2].split(","))))
    assert row["rho_plus"] == pytest.approx(3, abs=1e-3)
    assert row["bbar_minus_1"] == pytest.approx(-1, abs=1e-3)


def test_auto_split_recovers_separable_path():
    spec = pb.variant(pb.registry("BM1_tanh_fast"), f_split=None)
    m = ce.build_averaged_model(spec)
    assert m.fbar_mode == "separable"
    assert [cx.to_source(e) for e in m.spec.f_split] == ["tanh(x1)", "cos(x2_1)", "-y+0.5*z_1"]
