import json
from pathlib import Path

import pytest
import yaml

from forgetlab import cli
from forgetlab.config import config_from_dict, load_config
from forgetlab.nanoformer import ConfigError

TINY = {
    "model": {"num_layers": 2, "d_model": 16, "d_ffn": 32, "num_heads": 2, "max_len": 10},
    "domains": {"vocab_size": 30, "n_train_g": 200, "n_train_i": 100, "n_dev": 20, "n_test": 20,
                "min_len": 3, "max_len": 6},
    "train": {"epochs": 1, "lr": 0.003, "batch_size": 32},
    "continual": {"epochs": 1, "lr": 0.001, "batch_size": 32},
    "analysis": {"t_limit": 20, "fractions": [0.0, 0.5, 1.0], "matrices": ["Decoder/0/CA/v.weight"]},
}


@pytest.fixture()
def config(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "runs"))
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out


@pytest.mark.parametrize(
    "command,files",
    [
        ("forgetting", ["forgetting.csv", "forgetting.json", "model_G.ckpt", "model_I.ckpt"]),
        ("modules", ["modules_position.csv", "modules_position.json"]),
        ("importance", ["importance_correlation.csv", "importance.json", "importance_G.ckpt",
                        "heatmaps/Decoder_0_CA_v_weight_G.png", "heatmaps/Decoder_0_CA_v_weight_I.csv"]),
        ("erasure", ["erasure.csv", "erasure.json"]),
        ("drift", ["drift.csv", "drift.json"]),
    ],
)
def test_subcommands_write_outputs(config, capsys, command, files):
    code, out = run(capsys, command, "--config", str(config))
    assert code == 0, out.err
    run_dir = json.loads(out.out)["run_dir"]
    d = Path(run_dir)
    for f in files + ["config.yaml", "timings.txt"]:
        assert (d / f).exists(), f
    for csv_file in d.rglob("*.csv"):
        assert csv_file.read_text().startswith("# config_hash=")


def test_forgetting_rows_equal_total_epochs(config, capsys):
    code, out = run(capsys, "forgetting", "--config", str(config))
    lines = (Path(json.loads(out.out)["run_dir"]) / "forgetting.csv").read_text().splitlines()
    assert len(lines) == 2 + 1 + 1  # hash, header, one G epoch, one I epoch


def test_modules_grouping_override(config, capsys):
    code, out = run(capsys, "modules", "--config", str(config), "--grouping", "type")
    assert code == 0
    assert json.loads(out.out)["rows"] == {"type": 1 + 8 * 2}


def test_existing_run_dir_kept_unless_overwrite(config, capsys):
    _, a = run(capsys, "drift", "--config", str(config))
    _, b = run(capsys, "drift", "--config", str(config))
    _, c = run(capsys, "drift", "--config", str(config), "--overwrite")
    da, db, dc = (json.loads(o.out)["run_dir"] for o in (a, b, c))
    assert da != db and dc == da


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {d_model: 33, num_heads: 4}\n")
    assert run(capsys, "drift", "--config", str(bad))[0] == 2
    bad.write_text("unknown_key: 1\n")
    assert run(capsys, "drift", "--config", str(bad))[0] == 2
    bad.write_text("train: [1, 2\n")
    assert run(capsys, "drift", "--config", str(bad))[0] == 2
    assert run(capsys, "drift", "--config", str(tmp_path / "missing.yaml"))[0] == 2
    code, out = run(capsys, "drift", "--config", str(bad), "--jobs", "0")
    assert code == 2 and "config error" in out.err


def test_unknown_matrix_is_config_error(tmp_path, capsys):
    cfg = dict(TINY, output_dir=str(tmp_path / "runs"))
    cfg["analysis"] = dict(TINY["analysis"], matrices=["Encoder/7/FFN/fc1.weight"])
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert run(capsys, "erasure", "--config", str(p))[0] == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(dict(TINY, output_dir=str(tmp_path / "runs"), g_checkpoint=str(tmp_path / "nope.ckpt"))))
    code, out = run(capsys, "drift", "--config", str(p))
    assert code == 1 and "error" in out.err


def test_config_hash_is_stable_and_sensitive():
    a = config_from_dict(TINY)
    b = config_from_dict(json.loads(json.dumps(TINY)))
    assert a.config_hash() == b.config_hash()
    c = config_from_dict(dict(TINY, train={"epochs": 2}))
    assert c.config_hash() != a.config_hash()


def test_json_config_accepted(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    assert load_config(p).config_hash() == config_from_dict(TINY).config_hash()


def test_config_validation():
    with pytest.raises(ConfigError):
        config_from_dict({"domains": {"overlap": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"analysis": {"fractions": [0.5, 1.0]}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"max_len": 5}})
