"""End-to-end command tests driven through main(argv) in-process."""

import csv
import json

import numpy as np
import pytest

from taegcn.cli import main
from taegcn.graph_learner import extract_static_features
from taegcn.network import ModelConfig, TaegcnNetwork, load_checkpoint, save_checkpoint


def read_adjacency(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    matrix = np.array([[float(cell) for cell in row[1:]] for row in rows[1:]])
    return header, matrix


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    eye = np.eye(4).tolist()
    ring = np.roll(np.eye(4), 1, axis=1).tolist()
    spec = {"nodes": 4, "noise_std": 0.02, "seed": 3, "spectral_clip": 0.95,
            "regimes": [{"length": 90, "adjacency": eye},
                        {"length": 90, "adjacency": ring}]}
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = root / "out"
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    root = tmp_path_factory.mktemp("train")
    config = {
        "data": {"path": str(synth_dir / "data.csv")},
        "model": {"layers": 1, "windows": [2], "heads": 2, "hidden_channels": 8,
                  "state_dim": 4, "period": 3, "input_length": 6, "horizon": 2,
                  "skip_channels": 8, "head_hidden": 8, "seed": 1},
        "train": {"lr": 1e-3, "weight_decay": 0.0, "epochs": 2, "seed": 1},
        "output": {"dir": str(root / "run")},
    }
    cfg_path = root / "run_config.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root / "run"


class TestSynth:
    def test_artifacts_written(self, synth_dir):
        assert (synth_dir / "data.csv").exists()
        assert (synth_dir / "spec.json").exists()
        header, first = read_adjacency(synth_dir / "regime_0_adjacency.csv")
        _, second = read_adjacency(synth_dir / "regime_1_adjacency.csv")
        assert header == ["n0", "n1", "n2", "n3"]
        np.testing.assert_array_equal(first, np.eye(4))
        np.testing.assert_array_equal(second, np.roll(np.eye(4), 1, axis=1))

    def test_missing_spec_names_path(self, tmp_path, capsys):
        code = main(["synth", "--spec", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_json_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["synth", "--spec", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "bad.json" in capsys.readouterr().err


class TestTrain:
    def test_artifacts_and_progress(self, trained_dir, capsys):
        for name in ("resolved_config.json", "checkpoint.json",
                     "metrics.json", "metrics.txt"):
            assert (trained_dir / name).exists(), name
        resolved = json.loads((trained_dir / "resolved_config.json").read_text())
        assert resolved["train"]["epochs"] == 2
        assert resolved["model"]["target_channel"] == 0  # default applied
        assert resolved["data"]["path"].startswith("/")

    def test_epoch_lines_on_stderr(self, synth_dir, tmp_path, capsys):
        config = {
            "data": {"path": str(synth_dir / "data.csv")},
            "model": {"layers": 1, "windows": [2], "heads": 2,
                      "hidden_channels": 8, "state_dim": 4, "period": 3,
                      "input_length": 6, "horizon": 2, "skip_channels": 8,
                      "head_hidden": 8, "seed": 0},
            "train": {"lr": 1e-3, "epochs": 2, "seed": 0},
            "output": {"dir": str(tmp_path / "run")},
        }
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(config))
        assert main(["train", "--config", str(cfg)]) == 0
        captured = capsys.readouterr()
        lines = [l for l in captured.err.splitlines() if l.startswith("epoch=")]
        assert len(lines) == 2
        assert "train_loss=" in lines[0] and "val_mae=" in lines[0]
        assert "mae" in captured.out

    def test_rerun_from_resolved_config_reproduces_metrics(self, trained_dir):
        before = (trained_dir / "metrics.json").read_bytes()
        checkpoint_before = json.loads((trained_dir / "checkpoint.json").read_text())
        code = main(["train", "--config",
                     str(trained_dir / "resolved_config.json")])
        assert code == 0
        assert (trained_dir / "metrics.json").read_bytes() == before
        checkpoint_after = json.loads((trained_dir / "checkpoint.json").read_text())
        # wall time is the one field a replay may not reproduce
        for payload in (checkpoint_before, checkpoint_after):
            payload["state"]["history"].pop("seconds")
        assert checkpoint_after == checkpoint_before

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.json")])
        assert code == 2
        assert "absent.json" in capsys.readouterr().err

    def test_unknown_keys_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"path": "x.csv"}, "optimizer": {},
                                   "output": {"dir": "o"}}))
        assert main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "optimizer" in err and "c.json" in err

    def test_unknown_model_field_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"path": "x.csv"},
                                   "model": {"dropout": 0.5},
                                   "output": {"dir": "o"}}))
        assert main(["train", "--config", str(cfg)]) == 2
        assert "dropout" in capsys.readouterr().err

    def test_ablate_flag_switches_variant(self, synth_dir, tmp_path):
        config = {
            "data": {"path": str(synth_dir / "data.csv")},
            "model": {"layers": 1, "windows": [2], "heads": 2,
                      "hidden_channels": 8, "state_dim": 4, "period": 3,
                      "input_length": 6, "horizon": 2, "skip_channels": 8,
                      "head_hidden": 8, "seed": 0},
            "train": {"lr": 1e-3, "epochs": 1, "seed": 0},
            "output": {"dir": str(tmp_path / "run")},
        }
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(config))
        assert main(["train", "--config", str(cfg), "--ablate", "egc"]) == 0
        net, state = load_checkpoint(str(tmp_path / "run" / "checkpoint.json"))
        assert net.variant == "static_graph"
        assert state["variant"] == "ablate_egc"


class TestEvalPredict:
    def test_eval_prints_table(self, trained_dir, synth_dir, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"), "--out", str(out)])
        assert code == 0
        assert "rmse" in capsys.readouterr().out
        payload = json.loads(out.read_text())
        assert {"per_step", "aggregate", "window_count",
                "sample_count"} <= set(payload)

    def test_eval_checkpoint_without_stats(self, tmp_path, capsys):
        cfg = ModelConfig(layers=1, windows=(2,), heads=2, hidden_channels=8,
                          state_dim=4, period=3, input_length=6, horizon=2,
                          skip_channels=8, head_hidden=8)
        bare = tmp_path / "bare.json"
        save_checkpoint(str(bare), TaegcnNetwork(cfg, in_channels=1))
        code = main(["eval", "--checkpoint", str(bare),
                     "--data", str(tmp_path / "d.csv")])
        assert code == 2
        assert "normalization" in capsys.readouterr().err

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "gone.json"),
                     "--data", str(tmp_path / "d.csv")])
        assert code == 2
        assert "gone.json" in capsys.readouterr().err

    def test_predict_writes_csv(self, trained_dir, synth_dir, tmp_path):
        out = tmp_path / "forecast.csv"
        code = main(["predict", "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"), "--out", str(out)])
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["window_start", "node_id", "step", "forecast"]
        # 180 steps, input 6, horizon 2 -> 173 windows x 4 nodes x 2 steps
        assert len(rows) - 1 == 173 * 4 * 2
        values = [float(r[3]) for r in rows[1:]]
        assert np.isfinite(values).all()


class TestGradcheckCommand:
    def test_reports_every_op_and_passes(self, capsys):
        assert main(["gradcheck", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "op=" in out and "max_rel_err=" in out
        assert "model_loss" in out
        assert out.strip().splitlines()[-1].startswith("worst=")


class TestExportAdjacency:
    def test_period_files_match_forward_pass(self, trained_dir, synth_dir, tmp_path):
        out = tmp_path / "adj"
        code = main(["export-adjacency",
                     "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"),
                     "--nodes", "0,2,3", "--window", "5", "--out", str(out)])
        assert code == 0
        # input_length 6 at period 3 gives two period matrices
        header, exported = read_adjacency(out / "A_period_1.csv")
        assert header == ["n0", "n2", "n3"]
        assert (out / "A_period_2.csv").exists()
        assert not (out / "A_period_3.csv").exists()

        from taegcn import autodiff as ad
        from taegcn.autodiff import Tensor
        from taegcn.cli import _checkpoint_bundle, _load_series, _windows_for
        net, stats, marker = _checkpoint_bundle(str(trained_dir / "checkpoint.json"))
        dataset = _load_series(str(synth_dir / "data.csv"), marker)
        windows = _windows_for(net, dataset, stats)
        with ad.no_grad():
            _, adjacencies = net.forward(Tensor(windows[5].x), return_adjacency=True)
        expected = adjacencies[-1][0].data[np.ix_([0, 2, 3], [0, 2, 3])]
        np.testing.assert_array_equal(exported, expected)

    def test_single_node_subset(self, trained_dir, synth_dir, tmp_path):
        out = tmp_path / "adj"
        code = main(["export-adjacency",
                     "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"),
                     "--nodes", "1", "--window", "0", "--out", str(out)])
        assert code == 0
        header, matrix = read_adjacency(out / "A_period_1.csv")
        assert header == ["n1"] and matrix.shape == (1, 1)

    def test_out_of_range_node(self, trained_dir, synth_dir, tmp_path, capsys):
        code = main(["export-adjacency",
                     "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"),
                     "--nodes", "0,9", "--window", "0", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--nodes index 9" in capsys.readouterr().err

    def test_out_of_range_window(self, trained_dir, synth_dir, tmp_path, capsys):
        code = main(["export-adjacency",
                     "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"),
                     "--nodes", "0", "--window", "100000",
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--window 100000" in capsys.readouterr().err

    def test_bad_node_list_is_usage_error(self, trained_dir, synth_dir,
                                          tmp_path, capsys):
        code = main(["export-adjacency",
                     "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--data", str(synth_dir / "data.csv"),
                     "--nodes", "0,two", "--window", "0",
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "--nodes" in capsys.readouterr().err


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert main(["explode"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err.lower()

    def test_missing_required_flag(self, capsys):
        assert main(["train"]) == 1
        assert "--config" in capsys.readouterr().err

    def test_no_arguments(self, capsys):
        assert main([]) == 1
