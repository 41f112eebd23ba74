"""Best linear approximation of a linear system.

A full-band random-phase multisine drives a third-order discrete-time
system.  The local polynomial method recovers the FRF to machine precision
and the weighted rational fit recovers the transfer-function coefficients.
"""
import numpy as np

from nlident.freqid import RationalTf, estimate_bla
from nlident.plant import SyntheticWienerSpec, generate_dataset
from nlident.signals import MultisineSpec, design_multisine

G = RationalTf([0.0, 0.4, 0.25, -0.1], [1.0, -0.9, 0.44, -0.06])
N = 1024
exc = design_multisine(MultisineSpec.random(N // 2 - 1, N, 1.0, seed=11))
ds = generate_dataset(SyntheticWienerSpec(G, [0.0, 1.0]), exc, [0.0], 2)

frf, tf = estimate_bla(ds, 0, 3, 3)
G0 = G.freqresp(frf.frequencies)
rel = np.abs(frf.response - G0) / np.abs(G0)
print(f"lines: {frf.frequencies.size}")
print(f"max relative FRF error (interior lines): {rel[6:-6].max():.2e}")
print("true  a:", G.a)
print("fit   a:", np.round(tf.a, 12))
print("true  b:", G.b)
print("fit   b:", np.round(tf.b, 12))
