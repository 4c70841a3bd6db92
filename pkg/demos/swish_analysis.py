"""
Swish and its derivatives
=========================

Swish, ``z * sigmoid(z)``, is smooth and its second derivative is not
constant. That is what lets a network built from it represent a curl-free
field as the gradient of a learned potential: differentiating the potential
twice still leaves a useful, input-dependent signal. With ReLU the second
derivative vanishes almost everywhere.

Run with ``python3 demos/swish_analysis.py``.
"""
import numpy as np

from metassm import autodiff as ad

z = np.linspace(-10, 10, 9)

# first and second derivatives by reverse mode, the second by differentiating
# the recorded backward pass
tape = ad.Tape()
zv = tape.variable(z)
f = ad.swish(zv)
d1 = tape.grad(ad.sum(f), zv)
d2 = ad.elementwise_second_derivative(ad.swish, z)

s = 1 / (1 + np.exp(-z))
closed = s * (1 - s) * (2 + z * (1 - 2 * s))

print(f"{'z':>6} {'swish':>10} {'swish_1':>10} {'swish_2':>10} {'closed form':>12}")
for row in zip(z, ad.value_of(f), d1, d2, closed):
    print("{:6.1f} {:10.5f} {:10.5f} {:10.5f} {:12.5f}".format(*row))

# the minimum of swish sits where swish' = 0, near z = -1.278
grid = np.linspace(-3, 0, 30001)
vals = grid / (1 + np.exp(-grid))
print("\nminimum of swish: %.4f at z = %.4f" % (vals.min(), grid[vals.argmin()]))

# ReLU has no second derivative to offer on a curl-free path
try:
    ad.elementwise_second_derivative(ad.relu, z)
except ad.NotTwiceDifferentiableError as exc:
    print("relu:", exc)
