"""
Reverse-mode autodiff in a few dozen lines
==========================================

Builds a tiny computation, checks the gradient by hand, then fits a least
squares problem with Adam.  Everything runs in float64 on plain numpy.
"""

import numpy as np

from retinagen.autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    matmul,
    tanh,
    tsum,
    zero_grad,
)

# A leaf tensor opts into gradient tracking; ops build the graph as they run.
x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
y = tsum(tanh(x))
backward(y)

# d/dx sum(tanh(x)) = 1 - tanh(x)^2, entry by entry
expected = 1.0 - np.tanh(x.data) ** 2
print("max gradient error:", np.abs(x.grad - expected).max())

# Now a least squares fit: recover w from noisy observations of X @ w.
rng = np.random.default_rng(0)
true_w = np.array([[2.0], [-1.0], [0.5]])
X = rng.standard_normal((64, 3))
targets = X @ true_w + 0.01 * rng.standard_normal((64, 1))

w = Tensor(np.zeros((3, 1)), requires_grad=True)
params = {"w": w}
state = AdamState()
X_t, t_t = Tensor(X), Tensor(targets)

for step in range(300):
    zero_grad(params)
    residual = matmul(X_t, w) - t_t
    loss = tsum(residual * residual) * (1.0 / len(X))
    backward(loss)
    adam_step(params, state, lr=0.05)

print("fitted w:", w.data.ravel().round(3))
print("true   w:", true_w.ravel())
