# A short walk through the tape that every other part of the package sits on.
# Run with:  python demos/01_autodiff_tour.py

import numpy as np

from hamreid import tensor as T
from hamreid.tensor import Tape, Tensor, grad_check, make_rng

# A tape records operations as they run. Leaves are "watched" arrays.
tape = Tape()
x = tape.watch(np.array([[1.0, 2.0], [3.0, 4.0]]), "x")
w = tape.watch(np.array([[0.5], [-1.0]]), "w")

y = T.sigmoid(T.matmul(x, w))   # 2x1
loss = T.sum(T.square(y))
print("loss:", loss.item())

grads = tape.backward(loss)
print("d loss / d w:\n", grads["w"])
print("recorded ops:", [n.kind for n in tape.nodes])

# Nothing is traced when no tape is involved, which is how inference runs.
plain = T.sigmoid(T.matmul(Tensor(x.data), Tensor(w.data)))
print("same forward without a tape:", np.array_equal(plain.data, y.data))

# Central differences agree with the tape to roughly 1e-10 on smooth functions.
A = make_rng(0).normal(size=(4, 4))
quad = lambda v: T.sum(T.mul(v, T.matmul(Tensor(A), v)))
err = grad_check(quad, make_rng(1).normal(size=(4, 1)))
print(f"quadratic form gradient error: {err:.2e}")

# Max pooling routes the gradient to the first maximum only.
t = Tape()
v = t.watch(np.array([3.0, 1.0, 3.0]))
print("amax gradient:", t.backward(T.amax(v))[v])
