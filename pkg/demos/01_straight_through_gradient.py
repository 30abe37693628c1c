"""The straight-through gate on one searching block.

The forward pass uses the sampled one-hot z, so the block output is exactly
the selected candidate's output.  The backward pass routes dL/dz into the
softmax probabilities, which gives every architecture weight a gradient even
though only one candidate ran with a graph.
"""
import numpy as np

from stnas import autodiff as ad
from stnas import estimators as est
from stnas.autodiff import Tensor
from stnas.supernet import NetSpec, SuperNetwork, arch_probabilities

ad.set_precision(64)
rng = np.random.default_rng(0)

net = SuperNetwork(NetSpec(3, 2, 4, 0.0, [{"type": "block", "candidates":
                                           ["TDNN-1-1", "TDNN-1-2", "TDNN-2-1", "TDNN-2-2"]}]))
block = net.blocks[0]
block.alpha.values = np.array([0.3, -0.2, 0.5, 0.0])
x = rng.standard_normal((2, 8, 3))
g = rng.standard_normal((2, 8, 4))     # stands in for dL/d(block output)

z = 2
out = est.st_block(block, x, z)
with ad.no_grad():
    outs = [op(Tensor(x)).values for op in block.ops]
print("forward equals candidate", z, "exactly:", np.array_equal(out.values, outs[z]))

ad.backward(ad.sum(ad.mul(out, g)), [block.alpha])
pi = arch_probabilities(block)
dz = np.array([np.sum(g * o) for o in outs])
closed_form = (np.diag(pi) - np.outer(pi, pi)) @ dz
print("pi          ", np.round(pi, 4))
print("dL/dalpha   ", np.round(block.alpha.grad, 6))
print("closed form ", np.round(closed_form, 6))

# the smallest example: alpha = 0, linear loss picking component 0
alpha = Tensor(np.zeros(2), requires_grad=True)
gate = ad.straight_through(est.one_hot(1, 2), ad.softmax(alpha))
ad.backward(ad.sum(ad.mul(gate, np.array([1.0, 0.0]))), [alpha])
print("two candidates, v=(1,0):", alpha.grad)
