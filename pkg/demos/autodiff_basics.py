"""
Reverse-mode differentiation on numpy arrays
============================================

A few lines showing how gradients flow through the small tensor core, and
how to confirm them against central finite differences.
"""

import numpy as np

from vig_landcover.gradcheck import grad_check
from vig_landcover.tensor import Tensor, conv2d, precision, relu

rng = np.random.default_rng(0)

###############################################################################
# A scalar function of two tensors. ``backward`` fills ``.grad`` on every
# tensor that asked for one.
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = relu(a @ b).sum()
y.backward()
print("loss", float(y.data))
print("d loss / d b\n", b.grad)

###############################################################################
# Finite differences are only trustworthy in 64-bit arithmetic, so the check
# runs inside the ``precision`` context.
with precision(np.float64):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(1, 3, 3, 3)))

    def f(x, w):
        return (conv2d(x, w, stride=2, pad=1) * proj).sum()

    report = grad_check(f, [x, w], tol=1e-6)
print(report)
