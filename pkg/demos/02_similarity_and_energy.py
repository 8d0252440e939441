"""Windowed NCC, the smoothness penalty, and the registration energy.

The energy is (1 - mean local NCC) plus a smoothness term averaged over the
field. Its analytic gradient is compared against a central difference.

    python demos/02_similarity_and_energy.py
"""

import numpy as np

from ofgreg.data import make_pair
from ofgreg.energy import EnergyConfig, energy, energy_grad, local_ncc, smoothness
from ofgreg.volume import DisplacementField
from ofgreg.warp import identity_field, warp_trilinear

pair = make_pair(seed=4)
zero = identity_field(pair.grid)
cfg = EnergyConfig()

mean_cc, _ = local_ncc(pair.fixed, pair.fixed, cfg)
print("NCC of the fixed image with itself: %.4f" % mean_cc)
mean_cc, _ = local_ncc(pair.fixed, pair.moving, cfg)
print("NCC of the unregistered pair:       %.4f" % mean_cc)
print("smoothness of the truth field:      %.2f" % smoothness(pair.truth_field))
print("energy at the zero field:           %.5f" % energy(pair.fixed, pair.moving, zero, cfg))

# trilinear sampling has kinks at voxel centres, so check away from them
base = np.full((3, *pair.grid.dims), 0.3)
g = energy_grad(pair.fixed, pair.moving, DisplacementField(pair.grid, base), cfg).data
idx = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(g)), g.shape))
h = 1e-3
bumped = []
for s in (h, -h):
    u = base.copy()
    u[idx] += s
    bumped.append(energy(pair.fixed, pair.moving, DisplacementField(pair.grid, u), cfg))
print("dE/du at %s: analytic %.4e  numeric %.4e" % (idx, g[idx], (bumped[0] - bumped[1]) / (2 * h)))

warped, _ = warp_trilinear(pair.moving, zero)
assert np.allclose(warped.data, pair.moving.data)
