"""
The reverse-mode engine on a two-layer network, checked against finite differences
==================================================================================
"""

import numpy as np

from lungsound import autodiff as ad
from lungsound.autodiff import Tensor, backward, finite_difference_check

rng = np.random.default_rng(0)

# parameters as named leaf tensors
w1 = Tensor(rng.standard_normal((4, 8)) * 0.3, requires_grad=True, name="w1")
w2 = Tensor(rng.standard_normal((8, 3)) * 0.3, requires_grad=True, name="w2")
x = Tensor(rng.standard_normal((5, 4)))

# forward: linear, relu, linear, mean of squares
hidden = ad.relu(ad.matmul(x, w1))
out = ad.matmul(hidden, w2)
loss = ad.mean_all(ad.mul(out, out))
print(f"loss {float(loss.data):.4f}")

# one backward pass fills d loss / d parameter for every leaf
grads = backward(loss, {"w1": w1, "w2": w2})
for name, g in grads.items():
    print(f"  {name}: grad shape {g.shape}, |g| {np.abs(g).mean():.4f}")

# the engine ships its own numerical cross-check
def rebuild(a, b):
    h = ad.relu(ad.matmul(x, a))
    y = ad.matmul(h, b)
    return ad.mean_all(ad.mul(y, y))

err = finite_difference_check(rebuild, [w1.data.copy(), w2.data.copy()])
print(f"max relative error vs central differences: {err:.2e}")
