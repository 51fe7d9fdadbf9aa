# %% [markdown]
# # The tape
#
# Operations on Tensors that need gradients are recorded on the active Tape.
# backward() walks the tape in reverse and returns adjoints keyed by tensor.

# %%
import numpy as np

from flowguard import autodiff as ad
from flowguard.autodiff import Tape, Tensor, backward, grad

w = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
x = Tensor(np.array([[1.0, 2.0]]))
with Tape() as tape:
    y = ad.tanh(x @ w).sum()
print("y =", y.data, " dy/dw =\n", backward(tape, y)[w])

# %% grad() is the functional shortcut
f = lambda a: (a * a).exp().mean()
(g,) = grad(f, np.array([0.1, -0.3, 0.7]))
print("analytic", g)

h = 1e-6
e = np.eye(3)
fd = [(f(Tensor(np.array([0.1, -0.3, 0.7]) + h * e[i])).data - f(Tensor(np.array([0.1, -0.3, 0.7]) - h * e[i])).data)
      / (2 * h) for i in range(3)]
print("central differences", np.array(fd))
