"""
Averaged coefficients of a fast null-recurrent coordinate
=========================================================

The fast coordinate x1/eps never settles into an invariant law, so the
effective coefficients are one-sided running means (x1 -> +inf and -inf),
weighted by rho = 1/a00.  They can differ on the two sides, which gives
coefficients that jump at x1 = 0.
"""
import numpy as np

from homogenize_kit import cesaro as ce
from homogenize_kit import problem as pb

# running means of 2 + tanh: 3 on the right, 1 on the left
plus, res = ce.cesaro_limit(lambda t: 2 + np.tanh(t), "plus")
minus, _ = ce.cesaro_limit(lambda t: 2 + np.tanh(t), "minus")
print(f"2+tanh  plus {plus:.5f}  minus {minus:.5f}  (last increment {res:.1e})")

# periodic coefficients average to the same value on both sides
s_plus, _ = ce.cesaro_limit(lambda t: 2 + np.sin(t), "plus")
print(f"2+sin   plus {s_plus:.5f}")

# BM1: phi_0 = sqrt(2/(2+tanh)), so rho = 1/a00 = 2+tanh and the slow drift
# tanh(x1) averages to +1 / -1 after rho-weighting
spec = pb.registry("BM1_tanh_fast")
model = ce.build_averaged_model(spec)
x2 = np.array([[-1.0], [0.0], [1.0]])
print("rho+ ", model.rho_plus(x2))
print("rho- ", model.rho_minus(x2))
bp, bm = model.b_branches(x2)
print("bbar+", bp[:, 1], " bbar-", bm[:, 1])

# the generator averages through its tanh(x1) factor only
y = np.zeros(3)
z = np.zeros((3, 2))
fp, fm = model.fbar_branches(x2, y, z)
print("fbar+", fp, " cos(x2) =", np.cos(x2[:, 0]))
print("fbar-", fm)

# points with x1 <= 0 take the minus branch, x1 > 0 the plus branch
pts = np.array([[-0.5, 0.0], [0.0, 0.0], [0.5, 0.0]])
print("bbar at x1 = -0.5, 0, 0.5:", model.bbar(pts)[:, 1])
