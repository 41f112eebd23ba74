"""Wiener and Wiener-Schetzen models on a polynomial Wiener system.

The BLA at the middle operating point initializes both block models.  The
Wiener model (BLA followed by a cubic) matches the oracle structure; the
Wiener-Schetzen model expands the input on orthonormal basis functions
built from the BLA poles, and improves with more pole repetitions.
"""
import numpy as np

from nlident import harness as hz
from nlident.blocknl import fit_wiener, fit_wiener_schetzen
from nlident.freqid import RationalTf, estimate_bla
from nlident.plant import SyntheticWienerSpec, generate_dataset
from nlident.signals import MultisineSpec, design_multisine

G = RationalTf([0.0, 0.4, 0.25, -0.1], [1.0, -0.9, 0.44, -0.06])
system = SyntheticWienerSpec(G, [0.2, 1.0, 0.3, -0.2])
offsets = np.linspace(-1.0, 1.0, 6)
N = 1024
est, val = (generate_dataset(system,
                             design_multisine(MultisineSpec.random(400, N, r, seed=k)),
                             list(offsets), 2, role)
            for k, (r, role) in enumerate([(0.5, "estimation"), (0.4, "validation")]))

_, bla = estimate_bla(est, 2, 3, 3)
print("validation e_rel [%] per operating point")
print("offset        " + " ".join(f"{o:7.2f}" for o in offsets))
rows = {"BLA": hz.BlaModel(bla, 2), "Wiener poly(3)": fit_wiener(est, bla, "poly(3)")}
for reps in (1, 2, 3):
    rows[f"WS reps={reps}"] = fit_wiener_schetzen(est, bla, reps, 3)
for name, model in rows.items():
    print(f"{name:14s}" + " ".join(f"{e:7.3f}" for e in hz.evaluate(model, val)))
