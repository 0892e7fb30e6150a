# Reverse-mode autodiff on plain numpy arrays.
import numpy as np

from agegender import ops
from agegender.gradcheck import finite_diff_check
from agegender.tensor import Tensor, backward

rng = np.random.default_rng(0)

# a small two-layer net, by hand
x = Tensor(rng.standard_normal((4, 3)), dtype="f64")
w1 = Tensor(rng.standard_normal((3, 5)) * 0.5, dtype="f64", requires_grad=True)
w2 = Tensor(rng.standard_normal((5, 2)) * 0.5, dtype="f64", requires_grad=True)
labels = np.array([0, 1, 1, 0])

loss = ops.cross_entropy(ops.dense(ops.relu(ops.dense(x, w1)), w2), labels)
print("loss", loss.item())

backward(loss)
print("dL/dw1 shape", w1.grad.shape)
print("dL/dw2\n", w2.grad)

# compare against central differences
f = lambda a, b: ops.cross_entropy(ops.dense(ops.relu(ops.dense(x, a)), b), labels)
print("max relative error vs finite differences:", finite_diff_check(f, [w1, w2]))

# convolution goes through the same tape
img = Tensor(rng.standard_normal((1, 2, 6, 6)), dtype="f64")
k = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype="f64")
print("conv2d out dims", ops.conv2d(img, k, pad=1).dims)
print("conv2d gradcheck", finite_diff_check(lambda a, b: ops.conv2d(a, b, stride=2, pad=1), [img, k]))
