"""Walk through the autodiff core: build a small graph, backpropagate,
verify against finite differences, and clip a gradient set.

Run:  python demos/01_autodiff_and_gradients.py
"""

import numpy as np

from knmt import tensor as T

# Tensors wrap numpy arrays; requires_grad marks trainable leaves.
rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True, name="x")
w = T.Tensor(rng.normal(size=(4, 2)), dtype=np.float64, requires_grad=True, name="w")

# A forward pass records the graph; backward() fills .grad on the leaves.
loss = T.mean_(T.mul(T.tanh(T.matmul(x, w)), T.tanh(T.matmul(x, w))))
loss.backward()
print("loss:", loss.item())
print("grad w (first row):", w.grad[0])

# grad_check compares those gradients with central finite differences.
report = T.grad_check(lambda: T.mean_(T.mul(T.tanh(T.matmul(x, w)),
                                            T.tanh(T.matmul(x, w)))),
                      [("x", x), ("w", w)], step=1e-3, tol=1e-4)
print(report)
for name, err in report.errors.items():
    print(f"  {name}: max rel err {err:.2e}")

# Gradient clipping rescales a whole gradient set to a global norm budget.
grads = [np.array([6.0]), np.array([8.0])]
pre = T.clip_global_norm(grads, max_norm=5.0)
print(f"pre-clip norm {pre:.1f} -> clipped to {grads[0][0]:.4f}, {grads[1][0]:.4f}")

# softmax is computed with max subtraction, so large logits stay stable.
big = T.softmax(T.Tensor([1000.0, 1000.0, 999.0]))
print("softmax of large logits:", big.data)
