"""
Reverse-mode gradients on a tape
================================

Build a small network loss on a tape, read gradients off the backward pass,
and compare them with central finite differences.  Then differentiate a
gradient a second time, which is what the full meta-gradient needs.
"""

import numpy as np

from bmcl import autodiff as ad

rng = np.random.default_rng(0)

# a two-layer network with a cross-entropy loss on five samples
params = {"w1": rng.normal(size=(4, 6)), "w2": rng.normal(size=(6, 3))}
x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)


def loss_of(tape, p):
    hidden = ad.relu(tape.constant(x) @ p["w1"])
    return ad.softmax_cross_entropy(hidden @ p["w2"], y)


tape = ad.Tape()
loss = loss_of(tape, tape.parameters_from(params))
grads = tape.backward(loss)
print("loss", float(loss.value), "nodes on tape", len(tape.nodes))

# central differences on one entry of each weight matrix
for name in params:
    step = np.zeros_like(params[name])
    step[0, 0] = 1e-5

    def value(delta):
        t = ad.Tape()
        p = {k: t.constant(v + (delta if k == name else 0.0)) for k, v in params.items()}
        return float(loss_of(t, p).value)

    fd = (value(step) - value(-step)) / 2e-5
    print(f"d loss / d {name}[0,0]: tape {grads[name][0, 0]:+.8f}  finite difference {fd:+.8f}")

# second order: the gradient of sum(g * g) where g = d/da sum(a^3)
tape = ad.Tape()
a = tape.parameter("a", np.array([1.0, -2.0, 0.5]))
(g,) = tape.grad(ad.sum(a * a * a), [a], create_graph=True)
print("g = 3a^2            ", g.value)
print("d/da sum(g^2) = 36a^3", tape.backward(ad.sum(ad.square(g)))["a"])
