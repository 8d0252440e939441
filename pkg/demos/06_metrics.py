"""Evaluation: Dice, Jacobian folding percentage, NCC, endpoint error.

    python demos/06_metrics.py
"""

import numpy as np

from ofgreg.data import make_pair
from ofgreg.metrics import evaluate, jacobian_det, pct_nondiffeo
from ofgreg.optimizer import refine_pair
from ofgreg.volume import DisplacementField
from ofgreg.warp import identity_field

pair = make_pair(seed=5)
for name, field in (("zero field", identity_field(pair.grid)),
                    ("refined", refine_pair(pair, identity_field(pair.grid))[0])):
    print(name, {k: round(v, 4) for k, v in evaluate(pair, field).row().items()})

# a field that folds: u_x = -2 x flips the x axis, so det J = -1 everywhere
u = np.zeros((3, 8, 8, 8))
u[0] = -2.0 * np.arange(8)[:, None, None]
folded = DisplacementField.from_array(u)
print("det J of the flip: %.2f, folding %.1f%%" % (jacobian_det(folded).data[4, 4, 4], pct_nondiffeo(folded)))
