"""Train the predictor with optimizer guidance and compare it with plain
unsupervised training. A small network and a few epochs keep this under
a couple of minutes; the acceptance suite runs the full-size comparison.

    python demos/05_training_modes.py
"""

from ofgreg.data import make_dataset
from ofgreg.optimizer import OptimConfig
from ofgreg.predictor import Architecture
from ofgreg.training import Dataset, TrainConfig, train

data = Dataset.split(make_dataset(10, seed=7), 3)
common = dict(epochs=4, lr=3e-3, arch=Architecture(levels=2, channels=(8, 16)), optim=OptimConfig(steps=5))

for mode in ("ofg", "unsup", "blend-prob"):
    res = train(data, TrainConfig(mode=mode, **common))
    print("%-10s val Dice per epoch: %s   folding %.3f%%   flagged refines %d/%d" % (
        mode, " ".join("%.3f" % l.dice for l in res.logs), res.final.jac_pct, res.flagged, res.refine_calls))
