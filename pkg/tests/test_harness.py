import csv
import io
import json

import numpy as np
import pytest

from mapr import harness as H
from mapr.attacks import AttackConfig
from mapr.data import generate_dataset, write_dataset
from mapr.model import init_params
from mapr.perturb import SorConfig
from tiny import tiny


def test_accuracy_hand_counted():
    pred = [0, 1, 2, 2, 1, 0, 0, 1, 2, 2]
    labels = [0, 1, 1, 2, 1, 0, 2, 1, 0, 2]
    # correct at indices 0,1,3,4,5,7,9
    assert H.accuracy(pred, labels) == 70.0
    with pytest.raises(ValueError):
        H.accuracy([], [])


def test_resolve_config_validation():
    with pytest.raises(H.ConfigError, match="seed"):
        H.resolve_config({})
    assert H.resolve_config({}, require_seed=False)["seed"] is None
    with pytest.raises(H.ConfigError, match="unknown config key"):
        H.resolve_config({"seed": 1, "bogus": 3})
    with pytest.raises(H.ConfigError, match="modes"):
        H.resolve_config({"seed": 1, "modes": ["nope"]})
    with pytest.raises(H.ConfigError):
        H.resolve_config({"seed": 1, "sor": {"k": 0}})
    with pytest.raises(H.ConfigError):
        H.resolve_config({"seed": 1, "train": {"epochs": 0}})
    with pytest.raises(H.ConfigError):
        H.resolve_config({"seed": 1, "attacks": [{"kind": "fgsm", "epsilon": -1}]})
    with pytest.raises(H.ConfigError):
        H.resolve_config({"seed": 1, "defenses": ["dup"]})
    cfg = H.resolve_config({"seed": 1, "train": {"epochs": 3}})
    assert cfg["train"]["epochs"] == 3 and cfg["train"]["batch_size"] == 12


def test_load_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(H.ConfigError):
        H.load_config(tmp_path / "bad.json")
    with pytest.raises(H.ConfigError):
        H.load_config(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(H.ConfigError):
        H.load_config(tmp_path / "list.json")


def test_default_protocol_values():
    cfg = H.resolve_config({"seed": 0})
    assert cfg["sor"] == {"k": 2, "alpha": 1.1}
    assert cfg["at"] == {"epsilon": 0.05, "steps": 20, "step_size": 0.005}
    assert cfg["loss"]["at_alpha"] == 0.5 and cfg["loss"]["ramp_epochs"] == 15
    assert cfg["lambda_grid"] == [0.1, 0.25, 0.5, 1.0, 1.5, 2.0]
    assert cfg["dataset"]["n_points"] == 512 and len(cfg["dataset"]["classes"]) == 8
    assert cfg["dataset"]["train_per_class"] == 100 and cfg["dataset"]["test_per_class"] == 30
    assert "vanilla" in cfg["modes"]
    kinds = [a.kind for a in H.attack_suite(cfg)]
    assert len(kinds) == 8


def test_report_average_and_formats():
    rep = H.EvalReport(["a", "b", "c"])
    rep.add_row("vanilla", "none", 90.0, {"a": 10.0, "b": 20.0, "c": 60.0})
    rep.add_row("mapr", "none", 91.0, {"a": 10.0, "b": "ERR", "c": 60.0})
    assert rep.row("vanilla")["avg"] == pytest.approx(30.0, abs=1e-9)
    assert rep.row("mapr")["avg"] == "ERR"
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["mode", "defense", "clean", "a", "b", "c", "avg"]
    assert rows[1] == ["vanilla", "none", "90.0000", "10.0000", "20.0000", "60.0000", "30.0000"]
    assert rows[2][4] == "ERR"
    back = H.EvalReport.from_json(rep.to_json())
    assert back.to_csv() == rep.to_csv() and back.to_json() == rep.to_json()
    with pytest.raises(KeyError):
        rep.row("at")


def test_failing_cell_is_err_not_abort():
    p = init_params(3, 3, seed=0, point_widths=(4,), head_widths=(), k=4)
    x = np.random.default_rng(0).normal(size=(4, 10, 3))
    y = np.array([0, 1, 2, 0])
    # dropping more points than exist raises inside the cell
    attacks = [AttackConfig("fgsm"), AttackConfig("sma_drop", k_points=50)]
    rep = H.evaluate({"vanilla": p}, x, y, attacks, None, ("none", "sor"), SorConfig(), batch=2)
    assert rep.row("vanilla")["sma_drop"] == "ERR"
    assert isinstance(rep.row("vanilla")["fgsm"], float)
    assert rep.row("vanilla", "sor")["avg"] == "ERR"
    with pytest.raises(H.ConfigError):
        H.evaluate({"vanilla": p}, x, y, [AttackConfig("fgsm")] * 2, None)


def test_sor_applied_to_adversarial_before_classification(monkeypatch):
    p = init_params(3, 3, seed=0, point_widths=(4,), head_widths=(), k=4)
    x = np.random.default_rng(1).normal(size=(2, 12, 3))
    y = np.array([0, 1])
    seen = []
    real = H.sor_defense

    def spy(cloud, cfg):
        seen.append(cloud.copy())
        return real(cloud, cfg)

    monkeypatch.setattr(H, "sor_defense", spy)
    H.evaluate({"vanilla": p}, x, y, [AttackConfig("fgsm", epsilon=0.3)], None, ("none", "sor"))
    adv = H.adversarial_set(AttackConfig("fgsm", epsilon=0.3), p, x, y, None, 40)
    # first the adversarial clouds, then the clean rows for the clean column
    assert all(np.array_equal(a, b) for a, b in zip(seen[:2], adv))
    assert all(np.array_equal(a, b) for a, b in zip(seen[2:], x))


def test_predict_clouds_mixed_sizes():
    p = init_params(3, 3, seed=0, point_widths=(4,), head_widths=(), k=4)
    rng = np.random.default_rng(2)
    clouds = [rng.normal(size=(n, 3)) for n in (10, 10, 8, 10, 8)]
    got = H.predict_clouds(p, clouds, batch=2)
    from mapr.attacks import predict_labels
    want = [int(predict_labels(p, c[None])[0]) for c in clouds]
    assert got.tolist() == want


def test_save_and_load_model(tmp_path):
    p = init_params(20, 4, seed=3, point_widths=(8,), head_widths=(4,), k=5)
    H.save_model(p, tmp_path / "m.ckpt", "mapr")
    q, mode = H.load_model(tmp_path / "m.ckpt")
    assert mode == "mapr" and q.k == 5 and q.shapes() == p.shapes()
    assert all(np.array_equal(a.data, b.data) for a, b in zip(p.tensors(), q.tensors()))


def test_run_experiment_artifacts_and_determinism(tmp_path):
    cfg = tiny()
    rep = H.run_experiment(cfg, tmp_path / "a")
    for name in ("report.csv", "report.json", "config.json", "checkpoints/vanilla.ckpt", "checkpoints/mapr.ckpt",
                 "metrics/vanilla.ndjson", "metrics/mapr.ndjson"):
        assert (tmp_path / "a" / name).exists(), name
    assert rep.row("vanilla")["mode"] == "vanilla"
    assert {(r["mode"], r["defense"]) for r in rep.rows} == {(m, d) for m in ("vanilla", "mapr")
                                                             for d in ("none", "sor")}
    for r in rep.rows:
        vals = [r[a] for a in rep.attacks]
        assert all(0.0 <= v <= 100.0 for v in vals + [r["clean"]])
        assert r["avg"] == pytest.approx(np.mean(vals), abs=1e-9)
    assert set(rep.diagnostics["mapr"]["lipschitz"]) >= {"max", "mean", "q50", "q90", "q99"}
    lines = (tmp_path / "a" / "metrics" / "mapr.ndjson").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]

    H.run_experiment(cfg, tmp_path / "b")
    for name in ("report.csv", "report.json", "checkpoints/mapr.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_experiment_from_data_dir(tmp_path):
    cfg = tiny(modes=["vanilla"], attacks=[{"kind": "fgsm"}])
    ds = generate_dataset(H.dataset_config(H.resolve_config(cfg)))
    write_dataset(ds, tmp_path / "data")
    rep = H.run_experiment({**cfg, "data_dir": str(tmp_path / "data")})
    direct = H.run_experiment(cfg)
    assert rep.row("vanilla")["clean"] == direct.row("vanilla")["clean"]


def test_sweep_and_plot_data(tmp_path):
    cfg = tiny(train={"epochs": 1, "batch_size": 6, "lr": 0.003, "lr_decay": 0.7, "decay_every": 1})
    res = H.sweep_lambda(cfg, tmp_path)
    assert res.lambdas == [0.1, 0.25, 0.5, 1.0, 1.5, 2.0]
    assert len(res.accuracy["mapr"]) == 6
    text = (tmp_path / "sweep.csv").read_text()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["lambda_max", "mapr", "best"]
    assert [r[-1] for r in rows[1:]].count("true") == 1
    best_row = next(r for r in rows[1:] if r[-1] == "true")
    assert float(best_row[0]) == res.best()
    assert H.report_plot_data(H.SweepResult.from_json(res.to_json())) == text
    with pytest.raises(H.ConfigError):
        H.sweep_lambda(cfg, modes=("vanilla",))
    with pytest.raises(ValueError):
        H.report_plot_data(H.SweepResult([], {}))


def test_plot_columns_multi_mode():
    res = H.SweepResult([0.1, 0.5, 1.0], {"mapr": [80.0, 90.0, 90.0], "lip_only": [70.0, 60.0, 75.0]})
    rows = list(csv.reader(io.StringIO(H.report_plot_data(res))))
    assert len(rows[0]) == 2 + 2
    # ties resolve to the smaller lambda
    assert [r[-1] for r in rows[1:]] == ["false", "true", "false"]


def test_attack_bar_data():
    rep = H.EvalReport(["fgsm"])
    rep.add_row("vanilla", "none", 90.0, {"fgsm": 40.0})
    rows = list(csv.reader(io.StringIO(H.attack_bar_data(rep))))
    assert rows == [["mode", "defense", "attack", "accuracy"], ["vanilla", "none", "clean", "90.0000"],
                    ["vanilla", "none", "fgsm", "40.0000"], ["vanilla", "none", "avg", "40.0000"]]


def test_workers_match_serial():
    cfg = H.resolve_config(tiny(modes=["vanilla"]))
    ds = generate_dataset(H.dataset_config(cfg))
    p = H.train_mode(cfg, ds, "vanilla")
    attacks = [AttackConfig("fgsm"), AttackConfig("pgd_linf", steps=2)]
    a = H.evaluate({"vanilla": p}, ds.test_points, ds.test_labels, attacks, None, workers=1)
    b = H.evaluate({"vanilla": p}, ds.test_points, ds.test_labels, attacks, None, workers=2)
    assert a.to_csv() == b.to_csv()
