"""The encoder-decoder predictor: forward pass, manual backward, checkpoints.

    python demos/04_predictor_network.py
"""

import tempfile
from pathlib import Path

import numpy as np

from ofgreg.data import make_pair
from ofgreg.gradcheck import check_predictor_toy
from ofgreg.predictor import Architecture, backward, init_params, load_params, predict, save_params
from ofgreg.volume import DisplacementField

arch = Architecture()
params = init_params(arch, seed=0)
print("levels %d, %d parameters" % (arch.levels, arch.n_params))

pair = make_pair(seed=0)
u, cache = predict(params, pair.fixed, pair.moving)
print("initial prediction is near zero: max |u| = %.2e" % np.abs(u.data).max())

# gradient of 0.5 * ||u - target||^2 flows back to every weight
target = pair.truth_field.data
grads = backward(params, cache, DisplacementField(pair.grid, u.data - target))
print("largest weight gradient %.3e" % np.abs(grads.flat()).max())
print(check_predictor_toy(np.random.default_rng(0)).line())

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ofgp"
    save_params(path, params)
    print("checkpoint %d bytes, round trip exact: %s" % (
        path.stat().st_size, np.array_equal(load_params(path).flat(), params.flat())))
