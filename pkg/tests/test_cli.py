import json
import subprocess
import sys

import pytest

from a5.cli import ReportError, emit_report, parse_data_spec, run

FAST = {
    "schema_version": 1,
    "model": "mlp:16",
    "robustifier_model": "robustifier:8",
    "train": {"epochs": 2, "batch_size": 50, "lr": 0.01, "eps_train": 0.05, "eps_d": 0.1,
              "eval_attack_steps": 0},
    "attack": {"steps": 5, "restarts": 2},
    "a5o": {"steps": 3},
    "eval": {"eps": 0.05},
}


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST))
    return path


def records(out):
    return [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]


@pytest.fixture()
def trained(tmp_path, config):
    out = tmp_path / "train"
    assert run(["train", "--config", str(config), "--data", "synth:blobs,150,3,4", "--out", str(out)]) == 0
    return out


def test_train_then_certify(tmp_path, config, trained):
    final = records(trained)[-1]
    assert final["final"] and final["recipe"] == "train" and final["eps_a_c"] == 0.05
    assert (trained / "classifier.ckpt").exists()
    out = tmp_path / "cert"
    assert run(["certify", "--config", str(config), "--checkpoint", str(trained / "classifier.ckpt"),
                "--data", "synth:blobs,150,3,4", "--eps", "0.1", "--out", str(out)]) == 0
    cert = records(out)[-1]
    assert cert["eps"] == 0.1
    assert cert["clean_err"] <= cert["pgd_err"] <= cert["cert_err"]


def test_defense_recipes_run(tmp_path, config, trained):
    ckpt = str(trained / "classifier.ckpt")
    data = "synth:blobs,150,3,4"
    assert run(["a5o", "--config", str(config), "--checkpoint", ckpt, "--data", data, "--eps-d", "0.1",
                "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "robustified.npy").exists()
    assert run(["a5r", "--config", str(config), "--checkpoint", ckpt, "--data", data,
                "--out", str(tmp_path / "r")]) == 0
    rob = str(tmp_path / "r" / "robustifier.ckpt")
    assert run(["a5rc", "--config", str(config), "--checkpoint", ckpt, "--robustifier", rob, "--data", data,
                "--out", str(tmp_path / "rc")]) == 0
    for name in ("o", "r", "rc"):
        final = records(tmp_path / name)[-1]
        assert final["eps_d"] == 0.1 and final["psnr_mean"] >= 20.0
    assert run(["attack", "--config", str(config), "--checkpoint", ckpt, "--data", data,
                "--out", str(tmp_path / "att")]) == 0
    assert (tmp_path / "att" / "adversarial.npy").exists()


def test_rerun_is_byte_identical(tmp_path, config):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train", "--config", str(config), "--data", "synth:two_rings,120", "--seed", "3",
                    "--out", str(out)]) == 0
        outs.append((out / "metrics.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_missing_flag_exit_code_and_message(tmp_path, capsys):
    assert run(["certify", "--data", "synth:blobs,10", "--out", str(tmp_path)]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_bad_config_and_unknown_recipe(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "bogus": 1}))
    assert run(["train", "--config", str(bad), "--data", "synth:blobs,10", "--out", str(tmp_path)]) == 1
    bad.write_text(json.dumps({"schema_version": 2}))
    assert run(["train", "--config", str(bad), "--data", "synth:blobs,10", "--out", str(tmp_path)]) == 1
    assert run(["frobnicate"]) == 1
    capsys.readouterr()


def test_missing_checkpoint_is_exit_1(tmp_path, capsys):
    assert run(["certify", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", "synth:blobs,10",
                "--out", str(tmp_path / "o")]) == 1
    capsys.readouterr()


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "a5.cli", "train", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "--data" in proc.stderr


def test_data_spec_parsing():
    ds = parse_data_spec("synth:blobs,30,3,5")
    assert len(ds) == 30 and ds.num_classes == 3 and ds.sample_shape == (5,)
    from a5.errors import ConfigError

    with pytest.raises(ConfigError):
        parse_data_spec("http://example")


# -- report --------------------------------------------------------------------------------

def write_run(directory, recipe, eps_d, clean, pgd, cert, psnr=None):
    directory.mkdir(parents=True)
    lines = [{"epoch": 0, "clean_err": 0.9},
             {"final": True, "recipe": recipe, "eps_a_c": 0.1, "eps_a_r": None, "eps_d": eps_d,
              "clean_err": clean, "pgd_err": pgd, "cert_err": cert, "psnr_mean": psnr}]
    (directory / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in lines))


def test_report_empty_dir_header_only(tmp_path):
    emit_report(tmp_path)
    assert (tmp_path / "report.csv").read_text() == \
        "recipe,eps_a_c,eps_a_r,eps_d,clean_err,pgd_err,cert_err,psnr_mean\n"


def test_report_sorting_and_cells(tmp_path):
    write_run(tmp_path / "1", "a5r", 0.3, 0.01, 0.02, 0.03, 25.5)
    write_run(tmp_path / "2", "a5r", 0.1, 0.01, 0.02, 0.04, 30.0)
    write_run(tmp_path / "3", "a5o", 0.3, 0.0, 0.0, 0.01, None)
    write_run(tmp_path / "4", "a5r", 0.1, 0.02, 0.02, 0.05, 31.0)
    summary = emit_report(tmp_path)
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert summary["rows"] == 4
    assert [line.split(",")[0] for line in lines[1:]] == ["a5o", "a5r", "a5r", "a5r"]
    assert lines[1].endswith(",")  # no PSNR for this run
    assert [line.split(",")[6] for line in lines[2:]] == ["0.04", "0.05", "0.03"]


def test_report_ordering_violation(tmp_path):
    write_run(tmp_path / "1", "a5r", 0.1, 0.05, 0.02, 0.03)
    with pytest.raises(ReportError):
        emit_report(tmp_path)


def test_report_skips_malformed_lines(tmp_path):
    write_run(tmp_path / "1", "train", None, 0.01, 0.02, 0.03)
    with (tmp_path / "1" / "metrics.jsonl").open("a") as fh:
        fh.write("{not json\n")
    summary = emit_report(tmp_path)
    assert summary["rows"] == 1 and summary["warnings"] == 1
    assert "malformed" in summary["messages"][0]


def test_report_via_cli(tmp_path, capsys):
    write_run(tmp_path / "1", "train", None, 0.01, 0.02, 0.03)
    assert run(["report", "--out", str(tmp_path)]) == 0
    assert "1 rows" in capsys.readouterr().err
