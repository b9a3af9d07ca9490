"""Command line entry point: ``mapr <subcommand> [options]``.

Experiment subcommands read an optional JSON config (``--config``) whose
values are overridden by flags, and require ``--seed``. Generic overrides
use dotted keys, e.g. ``--set train.epochs=5 --set loss.lambda_max=0.5``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence during training.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import harness as H  # noqa: E402
from .attacks import ATTACK_KINDS, AttackConfigError  # noqa: E402
from .data import DataFormatError, generate_dataset, write_dataset, write_pcx  # noqa: E402
from .model import CheckpointError  # noqa: E402
from .training import MODES, TrainingDivergence  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise H.ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise H.ConfigError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw)


def build_config(args, require_seed: bool = True) -> dict:
    """Config file values, then named flags, then ``--set`` overrides."""
    cfg = H.load_config(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "data_dir", None):
        cfg["data_dir"] = str(args.data_dir)
    named = {
        "epochs": ("train", "epochs"), "lr": ("train", "lr"), "lambda_max": ("loss", "lambda_max"),
        "n_points": ("dataset", "n_points"), "k": ("model", "k"),
    }
    for flag, (section, key) in named.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.setdefault(section, {})[key] = value
    if getattr(args, "modes", None):
        cfg["modes"] = args.modes
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    for item in getattr(args, "set", None) or []:
        _apply_set(cfg, item)
    return H.resolve_config(cfg, require_seed=require_seed)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = build_config(args, require_seed=False)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    for flag, key in (("train_per_class", "train_per_class"), ("test_per_class", "test_per_class"),
                      ("noise", "noise")):
        if getattr(args, flag) is not None:
            cfg["dataset"][key] = getattr(args, flag)
    if args.classes:
        cfg["dataset"]["classes"] = args.classes.split(",")
    try:
        dcfg = H.dataset_config(cfg)
    except ValueError as exc:
        raise H.ConfigError(str(exc)) from exc
    manifest = write_dataset(generate_dataset(dcfg), args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    ds = H.get_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in cfg["modes"]:
        params = H.train_mode(cfg, ds, mode, metrics_path=out / f"{mode}.ndjson")
        H.save_model(params, out / f"{mode}.ckpt", mode)
        print(f"{mode}: {params.parameter_count()} parameters -> {out / (mode + '.ckpt')}")
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _load_models(paths) -> dict:
    models = {}
    for p in paths:
        params, mode = H.load_model(p)
        models[mode] = params
    return models


def cmd_attack(args) -> int:
    cfg = build_config(args)
    ds = H.get_dataset(cfg)
    params, mode = H.load_model(args.checkpoint)
    suite = {a.kind: a for a in H.attack_suite(cfg)}
    attack = suite[args.attack]
    surrogates = H.train_surrogates(cfg, ds) if attack.kind == "tpgd" else None
    x, y = ds.test_points, ds.test_labels
    if args.limit:
        x, y = x[:args.limit], y[:args.limit]
    adv = H.adversarial_set(attack, params, x, y, surrogates, cfg["eval_batch"])
    summary = {"mode": mode, "attack": attack.kind, "count": len(adv),
               "clean": H.accuracy(H.predict_clouds(params, list(x)), y),
               "adversarial": H.accuracy(H.predict_clouds(params, adv), y)}
    if args.out:
        out = Path(args.out)
        (out / "clouds").mkdir(parents=True, exist_ok=True)
        rows = ["path,label,split"]
        for i, (cloud, label) in enumerate(zip(adv, y)):
            rel = f"clouds/test_{i:05d}.pcx"
            write_pcx(out / rel, cloud)
            rows.append(f"{rel},{int(label)},test")
        (out / "manifest.csv").write_text("\n".join(rows) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if args.checkpoints:
        ds = H.get_dataset(cfg)
        models = _load_models(sorted(Path(args.checkpoints).glob("*.ckpt")))
        if not models:
            raise DataFormatError(f"no checkpoints in {args.checkpoints}")
        attacks = H.attack_suite(cfg)
        surrogates = H.train_surrogates(cfg, ds) if any(a.kind == "tpgd" for a in attacks) else None
        report = H.evaluate(models, ds.test_points, ds.test_labels, attacks, surrogates, cfg["defenses"],
                            H.SorConfig(**cfg["sor"]), cfg["eval_batch"], cfg["workers"])
        if args.out:
            report.write(args.out)
    else:
        report = H.run_experiment(cfg, args.out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    result = H.sweep_lambda(cfg, args.out, modes=tuple(args.sweep_modes.split(",")))
    sys.stdout.write(H.report_plot_data(result))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    report = H.run_ablation(cfg, args.out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.input)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if "lambdas" in data:
        text = H.report_plot_data(H.SweepResult.from_json(path.read_text()))
        name = "sweep_plot.csv"
    elif "rows" in data:
        text = H.attack_bar_data(H.EvalReport.from_json(path.read_text()))
        name = "attack_bars.csv"
    else:
        raise DataFormatError(f"{path}: neither a sweep nor an evaluation report")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _experiment_flags(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, required=seed_required, help="experiment seed")
    p.add_argument("--data-dir", type=Path, help="dataset written by gen-data (default: generate in memory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--n-points", type=int)
    p.add_argument("--k", type=int, help="graph neighbor count")
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapr", description="Manifold-aligned robust point cloud classification")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark as PCX files and a manifest")
    _experiment_flags(p, seed_required=False)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", help="comma-separated shape names")
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one or more modes and save checkpoints")
    _experiment_flags(p)
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a saved model on the test split")
    _experiment_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--attack", choices=ATTACK_KINDS, required=True)
    p.add_argument("--limit", type=int, help="attack only the first LIMIT test clouds")
    p.add_argument("--out", type=Path, help="write adversarial clouds here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="train and evaluate the full attack grid (or evaluate saved checkpoints)")
    _experiment_flags(p)
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--checkpoints", type=Path, help="directory of saved checkpoints to evaluate")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="clean accuracy over the lambda_max grid")
    _experiment_flags(p)
    p.add_argument("--sweep-modes", default="mapr", help="comma-separated modes to sweep")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="intrinsic-only / lip-only / full comparison")
    _experiment_flags(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plot-ready CSV from a report.json or sweep.json")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (H.ConfigError, AttackConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.dump, sort_keys=True), file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
