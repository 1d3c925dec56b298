"""
The corrector and the mollified averaged problem
================================================

For frozen (x2, y, z) the corrector solves a00 u'' = f - fbar in x1 with
u(0) = u'(0) = 0.  Its size relative to x1^2 shrinks with eps on |x1| >= sqrt(eps).

The averaged coefficients jump at x1 = 0; smoothing them with a bump of
radius 1/n gives solutions v^n that converge to v with bounded Sobolev norms.
"""
import numpy as np

from homogenize_kit import cesaro as ce
from homogenize_kit import corrector as co
from homogenize_kit import pdesolve as pd
from homogenize_kit import problem as pb

spec = pb.registry("BM1_tanh_fast")
model = ce.build_averaged_model(spec)

sols = [co.solve_corrector(spec, model, eps, [0.0], 0.0, [0.0, 0.0], L=10, h=1e-3)
        for eps in (1.0, 0.25, 1 / 16)]
print(co.scaling_diagnostic(sols).to_csv())
print(f"residual at eps = 1: {np.nanmax(co.corrector_residual(sols[0])):.1e}")

# mixing weight between the two branches: 1/2 at 0, 0 / 1 beyond radius 1/n
s = np.array([-0.2, -0.05, 0.0, 0.05, 0.2])
for n in (4, 8, 16):
    print(f"n = {n:<3d} w = {np.round(pd.mollifier_weight(n * s), 4)}")

t = 0.1
grid = pd.Grid(2.0, 2.0, 1 / 32, 1 / 8, t)
v = pd.solve_semilinear(model, None, grid)
box = pd.Box((-1.0, 1.0), (-1.0, 1.0))
mask = pd.region_weights(grid, box) > 0
for n in (4, 8, 16):
    vn = pd.solve_semilinear(pd.mollify(model, n), None, grid)
    diff = np.abs(vn.values[-1] - v.values[-1])[mask].max()
    w12 = pd.w12_norm(pd.sobolev_norms(vn, 2, box), 2)
    print(f"n = {n:<3d} sup|v^n - v| = {diff:.2e}  W12_2 = {w12:.4f}")
