import json
import subprocess
import sys

import numpy as np
import pytest

from l0arm.checkpoint import load_checkpoint, save_checkpoint
from l0arm.cli import (
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY,
    build_model,
    cmd_estimator_check,
    cmd_eval,
    cmd_report,
    load_bench_spec,
    main,
    table_row,
)
from l0arm.config import ConfigError, RunConfig
from l0arm.estimators import sample_estimates
from l0arm.gates import GateBank

XOR_CONFIG = {
    "name": "xor",
    "model": "toy_dense",
    "data": {"kind": "synthetic", "synthetic": {"name": "xor", "n_train": 200, "n_test": 200, "n_features": 6, "n_classes": 3}},
    "estimator": "ar",
    "lambda_scaled": 0.01,
    "optimizer": {"lr": 0.01},
    "epochs": 20,
    "batch_size": 20,
    "seed": 0,
    "checkpoint_every": 10,
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _train(tmp_path, cfg=XOR_CONFIG, out="run"):
    code = main(["train", str(_write(tmp_path, cfg, f"{out}.json")), "--output-dir", str(tmp_path / out)])
    assert code == EXIT_OK
    return tmp_path / out


# -- config -----------------------------------------------------------------


def test_config_round_trip_is_a_fixpoint():
    cfg = RunConfig.from_dict(XOR_CONFIG)
    text = cfg.to_json()
    again = RunConfig.from_json(text)
    assert again == cfg and again.to_json() == text
    full = RunConfig.from_dict({**XOR_CONFIG, "lambda_scaled": [10, 0.5, 0.1, 10], "gate": {"init": [{"mean": 0.7}]}})
    assert RunConfig.from_json(full.to_json()) == full


def test_unknown_keys_name_the_field():
    with pytest.raises(ConfigError, match="optimizer.lrr: unknown key"):
        RunConfig.from_dict({**XOR_CONFIG, "optimizer": {"lrr": 0.1}})
    with pytest.raises(ConfigError, match="epochz"):
        RunConfig.from_dict({**XOR_CONFIG, "epochz": 3})


def test_invalid_values_name_the_field():
    with pytest.raises(ConfigError, match="optimizer.lr"):
        RunConfig.from_dict({**XOR_CONFIG, "optimizer": {"lr": -1}})
    with pytest.raises(ConfigError, match="gate.init.0.mean"):
        RunConfig.from_dict({**XOR_CONFIG, "gate": {"init": [{"mean": 1.5}]}})
    with pytest.raises(ConfigError, match="data.path"):
        RunConfig.from_dict({**XOR_CONFIG, "data": {"kind": "mnist"}})
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.from_json("{")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("L0ARM_OUTPUT_ROOT", str(tmp_path / "root"))
    assert RunConfig.from_dict(XOR_CONFIG).resolve_output_dir() == tmp_path / "root" / "xor"


def test_build_model_strings():
    assert [g.size for g in build_model("mlp_2_8", 2).gates] == [2, 8]
    assert build_model("lenet5_caffe", 10).name == "lenet5_caffe"
    with pytest.raises(ConfigError, match="model"):
        build_model("resnet", 10)


# -- train ------------------------------------------------------------------


def test_train_emits_all_artifacts(tmp_path):
    run = _train(tmp_path)
    for name in ("config.json", "metrics.csv", "histograms.json", "report.json", "final/manifest.json",
                 "checkpoints/epoch_0010/manifest.json", "checkpoints/epoch_0020/manifest.json"):
        assert (run / name).exists(), name
    assert RunConfig.load(run / "config.json").output_dir == str(run)
    report = json.loads((run / "report.json").read_text())
    assert report["estimator"] == "ar" and report["epochs"] == 20


def test_train_is_deterministic(tmp_path):
    a = _train(tmp_path, out="a")
    b = _train(tmp_path, out="b")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_train_config_errors_exit_1(tmp_path, capsys):
    bad = _write(tmp_path, {**XOR_CONFIG, "data": {"kind": "mnist", "path": str(tmp_path / "nope")}})
    assert main(["train", str(bad)]) == EXIT_USAGE
    assert "data.path" in capsys.readouterr().err
    missing = _write(tmp_path, {**XOR_CONFIG, "data": {"kind": "mnist"}}, "m.json")
    assert main(["train", str(missing)]) == EXIT_USAGE
    assert "data.path" in capsys.readouterr().err
    assert main(["train"]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE


def test_divergence_exits_3(tmp_path, monkeypatch):
    import l0arm.cli as cli

    real = cli.setup_run

    def poisoned(cfg):
        net, bank, tr, te, reg = real(cfg)
        net.params["fc1"]["W"][:] = np.inf
        return net, bank, tr, te, reg

    monkeypatch.setattr(cli, "setup_run", poisoned)
    cfg = _write(tmp_path, {**XOR_CONFIG, "output_dir": str(tmp_path / "div")})
    assert main(["train", str(cfg)]) == EXIT_DIVERGED
    assert (tmp_path / "div" / "divergence" / "manifest.json").exists()


# -- eval -------------------------------------------------------------------


def test_eval_matches_last_logged_accuracy(tmp_path):
    run = _train(tmp_path)
    last = (run / "metrics.csv").read_text().splitlines()[-1].split(",")
    out = cmd_eval(run)
    assert out["reports"][0]["test_acc"] == float(last[2])
    assert out["reports"][0]["prune_rate"] == float(last[3])
    # a bare checkpoint directory resolves its run config too
    assert cmd_eval(run / "checkpoints" / "epoch_0020")["reports"][0]["test_acc"] == float(last[2])


def test_eval_tau_sweep(tmp_path, capsys):
    run = _train(tmp_path)
    capsys.readouterr()
    assert main(["eval", str(run), "--tau-sweep"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert [r["tau"] for r in out["reports"]] == [0.3, 0.4, 0.5, 0.6, 0.7]
    assert main(["eval", str(run), "--tau", "1.5"]) == EXIT_USAGE


def test_eval_all_gates_off_predicts_majority_class(tmp_path):
    run = _train(tmp_path)
    net, bank, opt, meta = load_checkpoint(run / "final")
    cfg = RunConfig.from_dict(meta["config"])
    from l0arm.cli import load_data
    _, test = load_data(cfg)
    hist = test.label_histogram()
    # a constant predictor fitted by cross-entropy sets the output bias to the log class priors
    with np.errstate(divide="ignore"):
        net.params["fc2"]["b"][:] = np.log(np.maximum(hist, 1e-12) / hist.sum())
    off = GateBank(np.full(bank.size, -5.0), bank.layers, bank.gate_fn)
    save_checkpoint(tmp_path / "off", net, off, opt, meta)
    acc = cmd_eval(tmp_path / "off")["reports"][0]["test_acc"]
    assert acc == hist.max() / hist.sum()


def test_eval_rejects_version_mismatch(tmp_path, capsys):
    run = _train(tmp_path)
    manifest = json.loads((run / "final" / "manifest.json").read_text())
    manifest["version"] = 2
    (run / "final" / "manifest.json").write_text(json.dumps(manifest))
    assert main(["eval", str(run)]) == EXIT_USAGE
    assert "unsupported checkpoint" in capsys.readouterr().err


# -- estimator-check --------------------------------------------------------


def test_estimator_check_default_passes(capsys):
    assert main(["estimator-check", "--n-samples", "20000"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["status"] == "PASS" and len(report["cases"]) == 20
    assert {"arm", "ar", "reinforce"} <= set(report["cases"][0]["estimators"])


def test_estimator_check_sign_flip_fails():
    spec = {**load_bench_spec(), "n_samples": 20000}
    flip = {"arm": lambda o, b, u: -sample_estimates(o, b, u, "arm")}
    report, ok = cmd_estimator_check(spec, samplers=flip)
    assert not ok and report["status"] == "FAIL"


def test_estimator_check_exit_code_on_failure(tmp_path, monkeypatch):
    import l0arm.estimators as est

    real = est.sample_estimates
    monkeypatch.setattr(est, "sample_estimates", lambda o, b, u, n: -real(o, b, u, n))
    assert main(["estimator-check", "--n-samples", "5000"]) == EXIT_VERIFY


def test_estimator_check_refuses_large_v(tmp_path, capsys):
    assert main(["estimator-check", "--dim", "25"]) == EXIT_USAGE
    assert "25" in capsys.readouterr().err
    spec = _write(tmp_path, {"cases": [{"dim": 25, "phi": [0.0] * 25, "table": [0.0]}]}, "spec.json")
    assert main(["estimator-check", "--spec", str(spec)]) == EXIT_USAGE


def test_estimator_check_spec_file_and_out(tmp_path):
    spec = _write(tmp_path, {"n_samples": 5000, "cases": [{"dim": 2, "family": "hard_sigmoid", "k": 7,
                                                          "phi": [0.1, -0.2], "table": [0.1, 0.5, 0.3, 0.9]}]})
    out = tmp_path / "bench.json"
    assert main(["estimator-check", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    assert len(json.loads(out.read_text())["cases"]) == 1
    bad = _write(tmp_path, {"n_sample": 5}, "bad.json")
    assert main(["estimator-check", "--spec", str(bad)]) == EXIT_USAGE


# -- report -----------------------------------------------------------------


def test_table_row_layout():
    assert table_row({"arch": "143-153-78", "prune_rate": 0.87005, "test_acc": 0.983}) == "143-153-78 | 87.00 | 98.3"


def test_report_two_runs_pass_ratio(tmp_path, capsys):
    ar = _train(tmp_path, {**XOR_CONFIG, "epochs": 3}, out="ar")
    arm = _train(tmp_path, {**XOR_CONFIG, "epochs": 3, "estimator": "arm"}, out="arm")
    capsys.readouterr()
    out = cmd_report([arm, ar])
    assert out["fwd_pass_ratio_arm_over_ar"] == 2.0
    lines = out["flops_csv"].splitlines()
    assert lines[0] == "run,estimator,epoch,exp_flops_fwd,exp_flops_train,fwd_passes" and len(lines) == 7
    csv_path = tmp_path / "flops.csv"
    assert main(["report", str(arm), str(ar), "--csv-out", str(csv_path)]) == EXIT_OK
    assert "fwd-pass ratio (arm/ar): 2.0" in capsys.readouterr().out
    assert csv_path.read_text() == out["flops_csv"]


def test_report_rejects_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == EXIT_USAGE
    assert "incomplete" in capsys.readouterr().err


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "l0arm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "estimator-check" in out.stdout
