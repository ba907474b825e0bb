import json

import pytest

from difs.cli import ConfigError, main, resolve_config
from difs.runs import read_dataset, write_dataset

TINY = {
    "difs": {"sample_budget": 2000, "samples_per_iter": 1000, "train_steps_per_iter": 40, "hidden": [16],
             "K": 20, "beta_max": 0.3},
    "cem2": {"sample_budget": 2000, "samples_per_iter": 1000},
    "metrics": {"n_eval": 300},
    "ground_truth": {"n_failures": 300},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_defaults_written_back():
    cfg = resolve_config({"difs": {"alpha": 0.25}}, seed=9)
    assert cfg["seed"] == 9 and cfg["difs"]["alpha"] == 0.25
    assert cfg["difs"]["hidden"] == [256, 256] and cfg["metrics"]["k"] == 5


@pytest.mark.parametrize("user, field", [
    ({"difs": {"alphq": 0.1}}, "difs.alphq"),
    ({"difs": {"sample_budget": "many"}}, "difs.sample_budget"),
    ({"env": "cartpole"}, "env"),
    ({"metrics": {"k": 0}}, "metrics.k"),
    ({"difs": {"alpha": 1.5}}, "alpha"),
])
def test_malformed_config_names_field(user, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        resolve_config(user)


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"difs": {"batch_size": -1.5}}))
    assert main(["difs", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert "difs.batch_size" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["difs", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2


def test_eval_without_ground_truth_fails(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "run")]) != 0


def test_analyze_without_model_is_runtime_failure(tmp_path):
    assert main(["analyze", "--out", str(tmp_path / "run")]) == 3


def test_dataset_round_trip_and_corruption(tmp_path):
    import numpy as np

    x = np.arange(6.0).reshape(3, 2)
    r = np.array([0.5, -1.0, 2.0])
    write_dataset(tmp_path / "d.bin", x, r)
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:4] == b"DFDS" and len(raw) == 20 + 3 * 3 * 8
    x2, r2 = read_dataset(tmp_path / "d.bin")
    assert np.array_equal(x, x2) and np.array_equal(r, r2)
    (tmp_path / "d.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "d.bin")


def test_repro_pipeline_layout_and_replay(tmp_path, tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["repro-toy", "--config", str(tiny), "--seed", "5", "--out", str(a)]) == 0
    assert main(["repro-toy", "--config", str(tiny), "--seed", "5", "--threads", "3", "--out", str(b)]) == 0
    for name in ("config.json", "progress.jsonl", "model.ckpt", "dataset.bin", "metrics.json",
                 "ground_truth.csv", "pca/projections.csv", "pca/eigendisturbances.csv"):
        assert (a / name).exists(), name
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "dataset.bin").read_bytes() == (b / "dataset.bin").read_bytes()
    snap = json.loads((a / "config.json").read_text())
    assert snap["seed"] == 5 and snap["difs"]["alpha"] == 0.5
    lines = (a / "progress.jsonl").read_text().splitlines()
    assert [json.loads(ln)["iteration"] for ln in lines] == [0, 1]


def test_cem_subcommands_replay(tmp_path, tiny):
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"cem{threads}"
        for cmd in ("mc", "cem2", "eval"):
            assert main([cmd, "--config", str(tiny), "--seed", "2", "--threads", threads, "--out", str(out)]) == 0
        outs.append((out / "metrics.json").read_bytes())
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["method"] == "cem2"
