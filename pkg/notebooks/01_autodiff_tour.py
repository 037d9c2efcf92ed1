# A short walk through the tape-based autodiff layer.
# Run with: python notebooks/01_autodiff_tour.py

import numpy as np

from eitphys import autodiff as ad

rng = np.random.default_rng(0)

# Gradients of a tiny expression, checked by hand.
x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
y = ad.sum(ad.mul(x, x))
ad.backward(y)
print("d/dx sum(x^2) =", x.grad, "(expect 2x)")

# The same check, done numerically, for a conv layer in float64.
with ad.precision(np.float64):
    img = ad.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    errors = ad.gradcheck(lambda: ad.sum(ad.relu(ad.conv2d(img, w, b, stride=2, padding=1))), [img, w, b])
print("conv2d relative gradient errors:", {k: f"{v:.1e}" for k, v in errors.items()})

# One LSTM step over a batch of 2.
with ad.precision(np.float64):
    hidden = 4
    xt = ad.Tensor(rng.standard_normal((2, 3)))
    h0 = ad.Tensor(np.zeros((2, hidden)))
    c0 = ad.Tensor(np.zeros((2, hidden)))
    w_ih = ad.Tensor(rng.standard_normal((4 * hidden, 3)) * 0.3)
    w_hh = ad.Tensor(rng.standard_normal((4 * hidden, hidden)) * 0.3)
    bias = ad.Tensor(np.zeros(4 * hidden))
    h1, c1 = ad.lstm_step(xt, h0, c0, w_ih, w_hh, bias)
print("h1 =", np.round(h1.data, 4))
