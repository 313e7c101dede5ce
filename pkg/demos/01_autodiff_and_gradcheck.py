"""
Autodiff basics and the finite-difference checker
=================================================

Build a tiny conv -> relu -> cross-entropy graph by hand, backpropagate,
and compare against central differences.
"""

import numpy as np

from secpnet import tensor as T
from secpnet.tensor import Parameter, Tensor, grad_check_details

rng = np.random.default_rng(0)

# float64 parameters so the comparison has room for ~1e-10 resolution
x = Parameter(rng.standard_normal((2, 3, 6, 6)), "x", dtype=np.float64)
w = Parameter(rng.standard_normal((4, 3, 3, 3)) * 0.3, "w", dtype=np.float64)
b = Parameter(rng.standard_normal(4) * 0.1, "b", dtype=np.float64)
target = rng.integers(0, 4, size=(2, 6, 6))


def loss():
    return T.softmax_cross_entropy(T.relu(T.conv2d(x, w, b, stride=1, padding=1)), target)


value = loss()
value.backward()
print("loss", round(value.item(), 6))
print("grad shapes", x.grad.shape, w.grad.shape, b.grad.shape)

res = grad_check_details(loss, [x, w, b])
print(f"max relative error {res.max_rel_error:.2e} over {res.checked} coordinates")
print(f"{res.kinks_skipped} coordinates skipped because +/-eps crossed a relu or max-pool kink")

# uniform logits over 14 classes cost exactly ln 14
uniform = T.softmax_cross_entropy(Tensor(np.zeros((1, 14, 2, 2))), np.zeros((1, 2, 2), dtype=int))
print("uniform loss", uniform.item(), "ln 14 =", np.log(14))

# a frozen parameter never gets a gradient
w.frozen = True
loss().backward()
print("frozen weight grad:", w.grad)
