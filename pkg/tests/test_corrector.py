import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homogenize_kit import cesaro as ce
from homogenize_kit import corrector as co
from homogenize_kit import problem as pb


@pytest.fixture(scope="module")
def models():
    return {b: (pb.registry(b), ce.build_averaged_model(pb.registry(b))) for b in pb.BENCHMARK_IDS}


def test_manufactured_sine():
    sol = co.solve_corrector(None, None, 1.0, 0.0, 0.0, [0.0, 0.0], L=10, h=1e-3, rhs=np.sin)
    x = sol.x1_grid
    assert np.max(np.abs(sol.u - (x - np.sin(x)))) <= 1e-6
    assert np.max(np.abs(sol.du - (1 - np.cos(x)))) <= 1e-6
    n = len(x) // 2
    assert sol.u[n] == 0 and sol.du[n] == 0


def test_odd_rhs_gives_odd_u_even_du():
    sol = co.solve_corrector(None, None, 1.0, 0.0, 0.0, [0.0], L=3, h=1e-2,
                             rhs=lambda x: x ** 3 - np.sin(2 * x))
    np.testing.assert_allclose(sol.u, -sol.u[::-1], atol=1e-13)
    np.testing.assert_allclose(sol.du, sol.du[::-1], atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_quadratic_rhs_exact(c0, c1):
    # trapezoid is exact for du when rhs is linear; u then carries only the h^2 term
    sol = co.solve_corrector(None, None, 1.0, 0.0, 0.0, [0.0], L=2, h=1e-3,
                             rhs=lambda x: c0 + c1 * x)
    x = sol.x1_grid
    np.testing.assert_allclose(sol.du, c0 * x + c1 * x ** 2 / 2, atol=1e-12)
    np.testing.assert_allclose(sol.u, c0 * x ** 2 / 2 + c1 * x ** 3 / 6, atol=1e-6)


def test_bm3_corrector_vanishes(models):
    spec, model = models["BM3_x1_free"]
    sol = co.solve_corrector(spec, model, 0.25, 0.4, -0.3, [0.2, 0.1], L=5, h=1e-2)
    assert np.all(sol.u == 0) and np.all(sol.du == 0)


@pytest.mark.parametrize("bench", ["BM1_tanh_fast", "BM2_periodic", "BM3_x1_free"])
def test_residual_self_consistency(models, bench):
    spec, model = models[bench]
    sol = co.solve_corrector(spec, model, 1.0, 0.0, 0.0, [0.0, 0.0])
    res = co.corrector_residual(sol)
    assert np.isnan(res[len(res) // 2])
    assert np.nanmax(res) <= 1e-4


def test_right_half_uses_plus_branch(models):
    spec, model = models["BM1_tanh_fast"]
    sol = co.solve_corrector(spec, model, 1.0, 0.0, 0.0, [0.0, 0.0], L=1, h=1e-3)
    n = len(sol.x1_grid) // 2
    # near 0: u'' ~ rho(0) (tanh(0) - fbar^+) = 2 * (0 - 1) on the right, 2 * (0 + 1) on the left
    assert sol.u[n + 1] == pytest.approx(-1.0 * 1e-6, rel=1e-2)
    assert sol.u[n - 1] == pytest.approx(1.0 * 1e-6, rel=1e-2)


def test_bm1_scaling_strictly_decreasing(models):
    spec, model = models["BM1_tanh_fast"]
    sols = [co.solve_corrector(spec, model, e, 0.0, 0.0, [0.0, 0.0]) for e in (1, 0.25, 1 / 16)]
    tab = co.scaling_diagnostic(sols)
    s2 = tab.column("sup_beta2")
    assert np.all(np.diff(s2) < 0)
    s1 = tab.column("sup_beta1")
    assert np.all(np.isfinite(s1)) and s1.max() <= 10
    assert tab.column("eps").tolist() == [1.0, 0.25, 0.0625]


def test_bm3_scaling_all_zero(models):
    spec, model = models["BM3_x1_free"]
    sols = [co.solve_corrector(spec, model, e, 0.0, 0.5, [1.0, 0.0], L=4, h=1e-2)
            for e in (0.25, 1, 1 / 16)]
    tab = co.scaling_diagnostic(sols)
    assert tab.column("sup_beta2").tolist() == [0, 0, 0]


def test_scaling_needs_a_sweep():
    with pytest.raises(ValueError):
        co.scaling_diagnostic([])
    sol = co.solve_corrector(None, None, 1.0, 0.0, 0.0, [0.0], L=1, h=0.1, rhs=np.sin)
    with pytest.raises(ValueError):
        co.scaling_diagnostic([sol, sol])


def test_beta_weights_and_excluded_origin():
    sol = co.solve_corrector(None, None, 1.0, [2.0], 1.0, [1.0, 1.0], L=1, h=0.5,
                             rhs=lambda x: 2 + 0 * x)
    # u = x^2, weight = 1 + 4 + 1 + 2 = 8
    np.testing.assert_allclose(sol.beta2[[0, 1, 3, 4]], 1 / 8)
    np.testing.assert_allclose(sol.beta1[[0, 1, 3, 4]], 2 / 8)
    assert np.isnan(sol.beta2[2]) and np.isnan(sol.beta1[2])


def test_derivatives_in_frozen_arguments(models):
    spec, model = models["BM1_tanh_fast"]
    der = co.corrector_derivatives(spec, model, 0.5, 0.3, 0.2, [0.1, 0.0], L=2, h=1e-2)
    # f - fbar = tanh cos(x2) - sign cos(x2): linear in cos(x2), free of y and z
    base = co.solve_corrector(spec, model, 0.5, 0.3, 0.2, [0.1, 0.0], L=2, h=1e-2).u
    np.testing.assert_allclose(der["x2_1"], -np.tan(0.3) * base, atol=1e-6)
    assert np.max(np.abs(der["y"])) <= 1e-9 and np.max(np.abs(der["z_0"])) <= 1e-9


def test_csv_columns():
    sol = co.solve_corrector(None, None, 0.5, 0.0, 0.0, [0.0], L=0.2, h=0.1, rhs=np.sin)
    lines = sol.to_csv().strip().split("\n")
    assert lines[0] == "eps,x1,u,du,beta2"
    assert len(lines) == 6 and lines[3].startswith("0.5,0.0,0.0,0.0,nan")
