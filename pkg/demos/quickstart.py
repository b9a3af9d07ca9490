"""Train a vanilla and a MAPR model on a small synthetic set and attack both.

Takes about fifteen seconds on one core. The full grid is what
``mapr eval --config configs/desk.json --seed 0`` runs.

    python demos/quickstart.py
"""

import numpy as np

from mapr import harness as H
from mapr.attacks import AttackConfig
from mapr.diagnostics import diagnostics_lipschitz

cfg = H.resolve_config({
    "seed": 0,
    "dataset": {"classes": ["sphere", "cube", "cylinder", "torus"], "train_per_class": 20,
                "test_per_class": 10, "n_points": 96},
    "train": {"epochs": 12, "decay_every": 6},
    "model": {"point_widths": [32, 64], "head_widths": [32], "k": 12},
    "modes": ["vanilla", "mapr"],
})
ds = H.get_dataset(cfg)
models = {m: H.train_mode(cfg, ds, m) for m in cfg["modes"]}

attacks = [AttackConfig("fgsm"), AttackConfig("pgd_linf", steps=10), AttackConfig("sma_drop", k_points=6)]
report = H.evaluate(models, ds.test_points, ds.test_labels, attacks, None)
print(report.to_csv())

for mode, params in models.items():
    lip = diagnostics_lipschitz(params, ds.test_points, pairs=20, seed=0)
    print(f"{mode}: intrinsic Lipschitz ratio max {lip['max']:.3f}, median {lip['q50']:.3f}")

# adversarial clouds are ordinary arrays
adv = H.adversarial_set(attacks[1], models["mapr"], ds.test_points[:2], ds.test_labels[:2], None, 40)
print("perturbation linf:", [float(np.abs(a - x).max()) for a, x in zip(adv, ds.test_points[:2])])
