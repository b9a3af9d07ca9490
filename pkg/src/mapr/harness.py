"""Experiment orchestration: train the requested modes, attack them, report.

An experiment is described by a JSON-compatible dict (see
:data:`DEFAULT_CONFIG`); :func:`resolve_config` fills in defaults and
validates it. :func:`run_experiment` returns an :class:`EvalReport` and
writes its CSV/JSON, checkpoints and per-epoch metric logs.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import ATTACK_KINDS, AttackConfig, default_attack_suite, run_attack
from .data import DatasetConfig, generate_dataset, load_dataset
from .diagnostics import diagnostics_lipschitz
from .model import ModelParams, forward_points, load_checkpoint, init_params, save_checkpoint
from .perturb import PerturbConfig, SorConfig, sor_defense
from .training import LAMBDA_GRID, MODES, ATConfig, LossConfig, TrainConfig, train

logger = logging.getLogger(__name__)

DEFENSES = ("none", "sor")

DEFAULT_CONFIG = {
    "seed": None,
    "data_dir": None,
    "dataset": {"classes": list(DatasetConfig().classes), "train_per_class": 100, "test_per_class": 30,
                "n_points": 512, "noise": 0.01, "seed": 0},
    "modes": ["vanilla", "at", "mapr"],
    "train": {"epochs": 100, "batch_size": 12, "lr": 0.002, "lr_decay": 0.7, "decay_every": 20},
    "loss": {"lambda_max": 1.0, "ramp_epochs": 15, "epsilon": 1e-6, "at_alpha": 0.5},
    "perturb": {"max_rotation_deg": 15.0, "jitter_sigma": 0.01, "jitter_clip": 0.05, "full_rotation": False},
    "at": {"epsilon": 0.05, "steps": 20, "step_size": 0.005},
    "model": {"point_widths": [64, 128, 256], "head_widths": [128], "k": 20},
    "attacks": None,
    "attack_k_points": 100,
    "surrogates": {"count": 2, "epochs": None},
    "sor": {"k": 2, "alpha": 1.1},
    "defenses": ["none", "sor"],
    "lambda_grid": list(LAMBDA_GRID),
    "eval_batch": 40,
    "diagnostic_pairs": None,
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged = dict(base[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config: dict | None = None, require_seed: bool = True) -> dict:
    """Defaults merged with ``config``; raises :class:`ConfigError` when invalid."""
    cfg = _merge(DEFAULT_CONFIG, config or {})
    if require_seed and cfg["seed"] is None:
        raise ConfigError("an experiment seed is required")
    bad = [m for m in cfg["modes"] if m not in MODES]
    if bad or not cfg["modes"]:
        raise ConfigError(f"unknown modes {bad}; expected a subset of {MODES}")
    bad = [d for d in cfg["defenses"] if d not in DEFENSES]
    if bad:
        raise ConfigError(f"unknown defenses {bad}")
    try:
        train_cfg(cfg, cfg["modes"][0])
        LossConfig(**cfg["loss"])
        PerturbConfig(**cfg["perturb"])
        SorConfig(**cfg["sor"])
        ATConfig(**cfg["at"])
        attack_suite(cfg)
        if cfg["data_dir"] is None:
            dataset_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def dataset_config(cfg: dict) -> DatasetConfig:
    d = dict(cfg["dataset"])
    d["classes"] = tuple(d["classes"])
    return DatasetConfig(**d)


def train_cfg(cfg: dict, mode: str, seed: int | None = None) -> TrainConfig:
    return TrainConfig(mode=mode, seed=cfg["seed"] if seed is None else seed, **cfg["train"])


def attack_suite(cfg: dict) -> list[AttackConfig]:
    seed = cfg["seed"] or 0
    if cfg["attacks"] is None:
        return default_attack_suite(seed=seed, k_points=cfg["attack_k_points"])
    suite = []
    for i, spec in enumerate(cfg["attacks"]):
        spec = dict(spec)
        spec.setdefault("seed", seed * 1000 + i)
        suite.append(AttackConfig(**spec))
    return suite


def get_dataset(cfg: dict):
    if cfg["data_dir"] is not None:
        return load_dataset(cfg["data_dir"], cfg["dataset"]["n_points"], seed=cfg["seed"] or 0)
    return generate_dataset(dataset_config(cfg))


# -- report --------------------------------------------------------------------

@dataclass
class EvalReport:
    """Accuracy table: one row per (mode, defense), one column per attack.

    ``avg`` is the mean of the attack columns (clean excluded). Cells that
    failed hold the string ``"ERR"``.
    """

    attacks: list
    rows: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def columns(self) -> list:
        return ["mode", "defense", "clean", *self.attacks, "avg"]

    def add_row(self, mode: str, defense: str, clean, cells: dict) -> dict:
        values = [cells[a] for a in self.attacks]
        numeric = all(isinstance(v, float) for v in values)
        avg = float(np.mean(values)) if numeric and values else "ERR"
        row = {"mode": mode, "defense": defense, "clean": clean, **cells, "avg": avg}
        self.rows.append(row)
        return row

    def row(self, mode: str, defense: str = "none") -> dict:
        for r in self.rows:
            if r["mode"] == mode and r["defense"] == defense:
                return r
        raise KeyError((mode, defense))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows, "diagnostics": self.diagnostics},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        attacks = data["columns"][3:-1]
        return cls(attacks, data["rows"], data.get("diagnostics", {}))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def accuracy(pred, labels) -> float:
    """Percentage of correct predictions."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.size == 0:
        raise ValueError("no predictions")
    return 100.0 * float(np.sum(pred == labels)) / float(pred.size)


# -- evaluation ----------------------------------------------------------------

def predict_clouds(params: ModelParams, clouds, batch: int = 40) -> np.ndarray:
    """Predictions for a list of clouds; equal-size runs are batched."""
    out = np.empty(len(clouds), dtype=np.int64)
    i = 0
    while i < len(clouds):
        j = i + 1
        while j < len(clouds) and j - i < batch and len(clouds[j]) == len(clouds[i]):
            j += 1
        logits = forward_points(params, np.stack(clouds[i:j])).data
        out[i:j] = np.argmax(logits, axis=-1)
        i = j
    return out


def defended(clouds, defense: str, sor_cfg: SorConfig) -> list:
    if defense == "none":
        return list(clouds)
    return [sor_defense(c, sor_cfg) for c in clouds]


def adversarial_set(attack: AttackConfig, params: ModelParams, x, y, surrogates, batch: int) -> list:
    out = []
    for s in range(0, len(x), batch):
        res = run_attack(attack, params, x[s:s + batch], y[s:s + batch], surrogates)
        out.extend(list(res.adv_cloud))
    return out


def _eval_cell(args):
    attack, params, x, y, surrogates, defenses, sor_cfg, batch = args
    try:
        adv = adversarial_set(attack, params, x, y, surrogates, batch)
        return {d: accuracy(predict_clouds(params, defended(adv, d, sor_cfg), batch), y) for d in defenses}
    except Exception as exc:  # one failing cell must not sink the grid
        logger.exception("attack %s failed: %s", attack.kind, exc)
        return {d: "ERR" for d in defenses}


def evaluate(models: dict, x: np.ndarray, y: np.ndarray, attacks: list[AttackConfig], surrogates,
             defenses=DEFENSES, sor_cfg: SorConfig = SorConfig(), batch: int = 40,
             workers: int = 1) -> EvalReport:
    """Accuracy of every model under every attack, with and without defense.

    Attacks are crafted against the undefended model; SOR then filters the
    adversarial cloud before classification.
    """
    names = [a.kind for a in attacks]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate attack kinds in {names}")
    jobs = [(mode, a) for mode in models for a in attacks]
    args = [(a, models[mode], x, y, surrogates, tuple(defenses), sor_cfg, batch) for mode, a in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_cell, args))
    else:
        results = [_eval_cell(a) for a in args]
    cell = {(mode, a.kind): r for (mode, a), r in zip(jobs, results)}
    report = EvalReport(names)
    for mode, params in models.items():
        for d in defenses:
            clean = accuracy(predict_clouds(params, defended(list(x), d, sor_cfg), batch), y)
            report.add_row(mode, d, clean, {k: cell[(mode, k)][d] for k in names})
    return report


# -- experiment ----------------------------------------------------------------

def save_model(params: ModelParams, path, mode: str) -> None:
    path = Path(path)
    save_checkpoint(params, path)
    meta = {"mode": mode, "in_channels": params.in_channels, "num_classes": params.num_classes,
            "point_widths": list(params.point_widths), "head_widths": list(params.head_widths), "k": params.k}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> tuple[ModelParams, str]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    template = init_params(meta["in_channels"], meta["num_classes"], seed=0,
                           point_widths=meta["point_widths"], head_widths=meta["head_widths"], k=meta["k"])
    return load_checkpoint(path, template), meta["mode"]


def train_mode(cfg: dict, ds, mode: str, *, seed: int | None = None, epochs: int | None = None,
               lambda_max: float | None = None, metrics_path=None) -> ModelParams:
    tc = train_cfg(cfg, mode, seed)
    if epochs is not None:
        tc = TrainConfig(**{**tc.__dict__, "epochs": epochs})
    loss = dict(cfg["loss"])
    if lambda_max is not None:
        loss["lambda_max"] = lambda_max
    if metrics_path is not None:
        Path(metrics_path).unlink(missing_ok=True)
    params, _ = train(ds.train_points, ds.train_labels, ds.num_classes, tc, LossConfig(**loss),
                      PerturbConfig(**cfg["perturb"]), ATConfig(**cfg["at"]), k=cfg["model"]["k"],
                      metrics_path=metrics_path, point_widths=cfg["model"]["point_widths"],
                      head_widths=cfg["model"]["head_widths"])
    return params


def train_surrogates(cfg: dict, ds) -> list[ModelParams]:
    """Vanilla models with seeds distinct from every evaluated model."""
    sc = cfg["surrogates"]
    return [train_mode(cfg, ds, "vanilla", seed=cfg["seed"] + 1000 + i, epochs=sc["epochs"])
            for i in range(sc["count"])]


def run_experiment(config: dict, out_dir=None) -> EvalReport:
    """Train every requested mode, evaluate it under the attack grid, write artifacts."""
    cfg = resolve_config(config)
    ds = get_dataset(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "metrics").mkdir(parents=True, exist_ok=True)
    attacks = attack_suite(cfg)
    surrogates = train_surrogates(cfg, ds) if any(a.kind == "tpgd" for a in attacks) else None
    models = {}
    for mode in cfg["modes"]:
        logger.info("training %s", mode)
        metrics = out / "metrics" / f"{mode}.ndjson" if out is not None else None
        models[mode] = train_mode(cfg, ds, mode, metrics_path=metrics)
        if out is not None:
            save_model(models[mode], out / "checkpoints" / f"{mode}.ckpt", mode)
    report = evaluate(models, ds.test_points, ds.test_labels, attacks, surrogates, cfg["defenses"],
                      SorConfig(**cfg["sor"]), cfg["eval_batch"], cfg["workers"])
    for mode, params in models.items():
        report.diagnostics[mode] = {"lipschitz": diagnostics_lipschitz(
            params, ds.test_points, cfg["diagnostic_pairs"], PerturbConfig(**cfg["perturb"]),
            seed=cfg["seed"], epsilon=cfg["loss"]["epsilon"])}
    if out is not None:
        report.write(out)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return report


def run_ablation(config: dict, out_dir=None) -> EvalReport:
    cfg = dict(config)
    cfg["modes"] = ["intrinsic_only", "lip_only", "mapr"]
    return run_experiment(cfg, out_dir)


# -- lambda sweep --------------------------------------------------------------

@dataclass
class SweepResult:
    """Clean test accuracy per ``lambda_max`` value, for each swept mode."""

    lambdas: list
    accuracy: dict  # mode -> list aligned with lambdas

    def best(self, mode: str | None = None) -> float:
        mode = mode or next(iter(self.accuracy))
        acc = self.accuracy[mode]
        return self.lambdas[int(np.argmax(acc))]

    def to_json(self) -> str:
        return json.dumps({"lambdas": self.lambdas, "accuracy": self.accuracy}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        d = json.loads(text)
        return cls(d["lambdas"], d["accuracy"])


def sweep_lambda(config: dict, out_dir=None, modes=("mapr",)) -> SweepResult:
    """Train each mode once per ``lambda_max`` in the grid and record clean accuracy."""
    cfg = resolve_config(config)
    ds = get_dataset(cfg)
    grid = [float(v) for v in cfg["lambda_grid"]]
    acc = {}
    for mode in modes:
        if mode not in ("mapr", "lip_only"):
            raise ConfigError(f"mode {mode} has no consistency weight to sweep")
        acc[mode] = []
        for lam in grid:
            params = train_mode(cfg, ds, mode, lambda_max=lam)
            pred = predict_clouds(params, list(ds.test_points), cfg["eval_batch"])
            acc[mode].append(accuracy(pred, ds.test_labels))
            logger.info("%s lambda_max=%g clean=%.2f", mode, lam, acc[mode][-1])
    result = SweepResult(grid, acc)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(result.to_json())
        (out / "sweep.csv").write_text(report_plot_data(result))
    return result


def report_plot_data(sweep: SweepResult) -> str:
    """Plot-ready CSV: ``lambda_max``, one clean-accuracy column per mode, and
    a ``best`` flag on the row maximizing the first mode's accuracy."""
    if not sweep.lambdas or not sweep.accuracy:
        raise ValueError("empty sweep")
    modes = list(sweep.accuracy)
    best = int(np.argmax(sweep.accuracy[modes[0]]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda_max", *modes, "best"])
    for i, lam in enumerate(sweep.lambdas):
        w.writerow([f"{lam:g}", *(f"{sweep.accuracy[m][i]:.4f}" for m in modes), "true" if i == best else "false"])
    return buf.getvalue()


def attack_bar_data(report: EvalReport) -> str:
    """Long-format CSV ``mode,defense,attack,accuracy`` for per-attack bar charts."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "defense", "attack", "accuracy"])
    for r in report.rows:
        for a in ["clean", *report.attacks, "avg"]:
            w.writerow([r["mode"], r["defense"], a, _fmt(r[a])])
    return buf.getvalue()
