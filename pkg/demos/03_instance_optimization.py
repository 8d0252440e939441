"""Refine a field by a few Adam steps on the energy, at full and half resolution.

    python demos/03_instance_optimization.py
"""

from dataclasses import replace

from ofgreg.data import make_pair
from ofgreg.metrics import dice
from ofgreg.optimizer import OptimConfig, refine_pair
from ofgreg.warp import identity_field, warp_nearest

pair = make_pair(seed=2)
start = identity_field(pair.grid)
print("Dice unregistered %.4f" % dice(pair.fixed_labels, pair.moving_labels)[1])

for label, cfg in (("full", OptimConfig()), ("half", replace(OptimConfig(), downsample=True))):
    u, trace = refine_pair(pair, start, cfg)
    # the half-resolution trace is measured on the coarse grid
    print("%s resolution: E %.4f -> %.4f in %.2fs, Dice %.4f, flagged=%s" % (
        label, trace.energies[0], trace.energies[-1], trace.seconds,
        dice(pair.fixed_labels, warp_nearest(pair.moving_labels, u))[1], trace.flagged))

# more steps keep lowering the energy
u, trace = refine_pair(pair, start, OptimConfig(steps=40))
print("40 steps: E %.4f, Dice %.4f" % (trace.energies[-1], dice(pair.fixed_labels, warp_nearest(pair.moving_labels, u))[1]))
