"""Tape-based gradients on float64 arrays, checked against central differences."""

import numpy as np

from tosa import numerics as nx
from tosa.numerics import GradTape, Tensor, check_gradients

rng = np.random.default_rng(0)

# Every op records itself on the active tape; backward replays the tape in reverse.
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
with GradTape() as tape:
    y = nx.sum(nx.gelu(x @ w))
tape.backward(y)
print("loss", y.item())
print("dL/dw\n", w.grad)

# A tape runs backward exactly once.
try:
    tape.backward(y)
except nx.TapeError as e:
    print("second backward:", e)

# The finite-difference oracle: worst deviation relative to each gradient's scale.
report = check_gradients(lambda: nx.sum(nx.gelu(x @ w)), [x, w])
print(f"max relative error {report.max_rel_error:.2e} (passed={report.passed})")

# conv1d along the last axis with zero padding keeps the length.
seq = Tensor(rng.standard_normal((2, 9)))
kernels = Tensor(rng.standard_normal((3, 2, 3)))
print("conv1d", nx.conv1d(seq, kernels, Tensor(np.zeros(3))).shape)
