"""
Hard state constraints with a conic output layer
================================================

The conic layer writes the decoded state as a nonnegative combination of
the rays of the cone ``{x : G x <= 0}``. Every output is feasible by
construction, whatever the weights. This script pushes random inputs
through a layer with random weights and checks the worst constraint value.
It also shows the projection step the EKF uses for the same cone.

Run with ``python3 demos/cone_constraint.py``.
"""
import numpy as np

from metassm import constraints as cons
from metassm import nssm, ekf

rng = np.random.default_rng(0)

G, R = cons.rotated_cone(angle=0.8, rotation=0.3)
print("rays (columns):\n", R.round(3))
print("G R =\n", (G @ R).round(12), "\n")

c = cons.ConicConstraint(G, R)
fc = (rng.normal(size=(2, 6)), rng.normal(size=2))
x = cons.conic_apply(c, rng.normal(size=(10_000, 6)) * 10, fc)
print("largest G x over 10^4 random decodings: %.2e" % (x @ G.T).max())

# the same cone inside a Case II model; the EKF projects an estimate by
# passing it through the autoencoder, whose conic decoder lands in the cone
m = nssm.NssmCase2(2, 1, 1, n_psi=4, encoder_hidden=(8,), transition_hidden=(8,), decoder_x_hidden=(8,),
                   decoder_y_hidden=(8,), conic=c)
ws = m.init(1)
fm = ekf.NssmFilterModel(m, ws)
outside = np.array([-1.0, 2.0])
print("\nstate estimate", outside, "has G x =", (G @ outside).round(3))
inside = ekf.project_estimate(ekf.GaussianBelief(outside, np.eye(2)), np.zeros(1), fm).mean
print("projected to  ", inside.round(4), "with G x =", (G @ inside).round(6))
