"""A seconds-scale experiment config shared by harness, CLI and determinism tests."""

import copy

TINY = {
    "seed": 7,
    "dataset": {"classes": ["sphere", "cube", "torus"], "train_per_class": 6, "test_per_class": 3,
                "n_points": 32, "noise": 0.01, "seed": 2},
    "modes": ["vanilla", "mapr"],
    "train": {"epochs": 2, "batch_size": 6, "lr": 0.003, "lr_decay": 0.7, "decay_every": 1},
    "model": {"point_widths": [8, 16], "head_widths": [8], "k": 6},
    "attacks": [
        {"kind": "sma_drop", "k_points": 2},
        {"kind": "pgd_l2", "epsilon": 1.25, "steps": 2, "step_size": 0.125},
        {"kind": "pgd_linf", "epsilon": 0.05, "steps": 2, "step_size": 0.01},
        {"kind": "fgsm", "epsilon": 0.05, "steps": 1},
        {"kind": "bim", "epsilon": 0.05, "steps": 2, "step_size": 0.01},
        {"kind": "add_k", "k_points": 2, "steps": 2, "step_size": 0.01},
        {"kind": "tpgd", "epsilon": 0.05, "steps": 2, "step_size": 0.01},
        {"kind": "sipgd", "epsilon": 0.05, "steps": 2, "step_size": 0.01, "si_k": 4},
    ],
    "surrogates": {"count": 2, "epochs": 1},
    "lambda_grid": [0.1, 0.25, 0.5, 1.0, 1.5, 2.0],
    "diagnostic_pairs": 4,
}


def tiny(**overrides):
    cfg = copy.deepcopy(TINY)
    cfg.update(overrides)
    return cfg
