"""End-to-end CLI runs: exit codes, artifacts on disk, determinism, overrides."""

import json
import os

import numpy as np
import pytest

from uapforge import cli
from uapforge import config as C
from uapforge.errors import ConfigError


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = {
        "dataset": {"source": "synth", "num_classes": 3, "n": 240, "shape": [1, 8, 8],
                     "spread": 0.08, "subset_size": 90, "seed": 1},
        "model": {"arch": "mlp", "hidden": 12, "train": {"epochs": 8, "lr": 0.3, "batch": 30, "seed": 0}},
        "attack": {"epochs": 2, "batch_size": 30, "k_model": 2, "k_data": 2,
                    "rho": 0.2, "r": 2.0, "epsilon": 0.1, "seed": 3},
        "output": {"directory": "out"},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return tmp_path


def delta_paths(workdir):
    root = workdir / "out" / "deltas"
    return sorted(p for p in root.iterdir() if p.suffix == ".uapt") if root.exists() else []


# -- config assembly ------------------------------------------------------------


def test_defaults_load_without_file():
    cfg = C.load_config(None)
    assert cfg["attack"]["epochs"] == 20
    assert cfg["attack"]["batch_size"] == 125


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"attack": {"epsilonn": 0.1}}))
    with pytest.raises(ConfigError, match="epsilonn"):
        C.load_config(path)


def test_missing_file_rejected():
    with pytest.raises(ConfigError, match="not found"):
        C.load_config("/nonexistent/run.json")


def test_set_overrides_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"attack": {"epsilon": 0.2}}))
    cfg = C.load_config(path, sets=["attack.epsilon=0.3"])
    assert cfg["attack"]["epsilon"] == 0.3


def test_env_overrides(tmp_path):
    cfg = C.load_config(None, environ={"UAPFORGE_ATTACK__GAMMA": "0.5"})
    assert cfg["attack"]["gamma"] == 0.5


def test_flag_beats_env(tmp_path):
    cfg = C.load_config(None, sets=["attack.gamma=0.7"], environ={"UAPFORGE_ATTACK__GAMMA": "0.5"})
    assert cfg["attack"]["gamma"] == 0.7


def test_env_override_reaches_cli(workdir, monkeypatch):
    monkeypatch.setenv("UAPFORGE_MODEL__TRAIN__EPOCHS", "1")
    assert cli.main(["--config", "run.json", "train"]) == 0
    _, meta = __import__("uapforge").load_checkpoint("out/checkpoints/mlp-s0.uapt")
    assert meta["train_config"]["epochs"] == 1


def test_attack_config_validation_maps_to_config_error():
    cfg = C.load_config(None, sets=["attack.rho=-1"])
    with pytest.raises(ConfigError):
        C.attack_config(cfg)


# -- subcommands ------------------------------------------------------------------


def test_train_craft_eval_pipeline(workdir, capsys):
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert os.path.exists("out/checkpoints/mlp-s0.uapt")
    out = capsys.readouterr().out
    assert "train accuracy" in out and "test accuracy" in out

    assert cli.main(["--config", "run.json", "craft"]) == 0
    paths = delta_paths(workdir)
    assert len(paths) == 1
    meta = json.loads(open(str(paths[0]) + ".json").read())
    assert meta["config"]["epsilon"] == 0.1
    assert os.path.exists(str(paths[0]) + ".log.csv")

    rc = cli.main(["--config", "run.json", "--set", f"eval.deltas=[\"{paths[0]}\"]", "eval"])
    assert rc == 0
    reports = list((workdir / "out" / "reports").iterdir())
    assert any(p.suffix == ".json" for p in reports)
    assert any(p.suffix == ".csv" for p in reports)


def test_craft_variant_recorded(workdir):
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert cli.main(["--config", "run.json", "craft", "--variant", "spgd"]) == 0
    (path,) = delta_paths(workdir)
    meta = json.loads(open(str(path) + ".json").read())
    assert meta["config"]["variant"] == "spgd"
    assert meta["config"]["rho"] == 0.0 and meta["config"]["r"] == 0.0


def test_craft_deterministic_artifact(workdir):
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert cli.main(["--config", "run.json", "craft"]) == 0
    (first,) = delta_paths(workdir)
    blob = first.read_bytes()
    first.unlink()
    assert cli.main(["--config", "run.json", "craft"]) == 0
    (second,) = delta_paths(workdir)
    assert second.read_bytes() == blob
    assert first.name == second.name  # content-hashed filename


def test_train_deterministic_checkpoint(workdir):
    assert cli.main(["--config", "run.json", "train"]) == 0
    blob = open("out/checkpoints/mlp-s0.uapt", "rb").read()
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert open("out/checkpoints/mlp-s0.uapt", "rb").read() == blob


def test_missing_dataset_path_exits_2(workdir, capsys):
    rc = cli.main(["--config", "run.json", "--set", "dataset.source=idx",
                   "--set", "dataset.images=missing.idx", "--set", "dataset.labels=missing2.idx", "train"])
    assert rc == 2
    assert "dataset.images" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_3(workdir):
    rc = cli.main(["--config", "run.json", "--set", "model.train.lr=1e12", "train"])
    assert rc == 3


def test_craft_without_checkpoint_exits_5(workdir):
    assert cli.main(["--config", "run.json", "craft"]) == 5


def test_eval_missing_delta_exits_5(workdir, capsys):
    assert cli.main(["--config", "run.json", "train"]) == 0
    rc = cli.main(["--config", "run.json", "--set", "eval.deltas=[\"ghost.uapt\"]", "eval"])
    assert rc == 5
    assert "ghost.uapt" in capsys.readouterr().err


def test_verify_ok_and_mismatch(workdir, capsys):
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert cli.main(["--config", "run.json", "craft"]) == 0
    (path,) = delta_paths(workdir)
    assert cli.main(["verify", str(path), "out/checkpoints/mlp-s0.uapt"]) == 0
    out = capsys.readouterr().out
    assert out.count("OK") == 2
    # corrupt the payload, keep the metadata
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert cli.main(["verify", str(path)]) == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_verify_missing_exits_5(workdir):
    assert cli.main(["verify", "nothing.uapt"]) == 5


def test_ablate_order_sweep(workdir, capsys):
    assert cli.main(["--config", "run.json", "train"]) == 0
    rc = cli.main(["--config", "run.json", "ablate", "--axis", "order",
                   "--values", '["model_first", "none"]'])
    assert rc == 0
    csv = open("out/reports/ablate-order.csv").read().strip().split("\n")
    assert csv[0] == "order,fooling_ratio,n,delta_hash"
    assert len(csv) == 3


def test_ablate_requires_single_known_axis(workdir):
    assert cli.main(["--config", "run.json", "train"]) == 0
    assert cli.main(["--config", "run.json", "ablate", "--values", "[1, 2]"]) == 2
    rc = cli.main(["--config", "run.json", "--set", "ablate.axis=epsilon",
                   "ablate", "--values", "[0.1]"])
    assert rc == 2
