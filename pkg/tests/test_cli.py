import json
import os

import numpy as np
import pytest

from spikebp import LayerSpec, NeuronParams, build_topology, init_weights
from spikebp import INPUT, FEEDFORWARD, RECURRENT
from spikebp.cli import (CheckpointError, ConfigError, load_checkpoint,
                         load_config, main, save_checkpoint,
                         EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERIC)
from spikebp.simulate import kernel_peak


def write_config(path, **overrides):
    doc = {
        "seed": 3,
        "layers": [
            {"kind": "input", "size": 8},
            {"kind": "recurrent", "size": 10, "density": 0.3},
            {"kind": "feedforward", "size": 2},
        ],
        "neuron": {"thresholds": [10.0, 0.5]},
        "train": {"epochs": 2, "target_count": 10, "nontarget_count": 2},
        "data": {"source": "synthetic", "num_classes": 2, "num_inputs": 8,
                 "duration": 200, "samples_per_class": 4, "seed": 5},
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


class TestConfig:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", learning_rate=0.1)
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(cfg)

    def test_unknown_nested_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           train={"epochs": 1, "momentum": 0.9})
        with pytest.raises(ConfigError, match="momentum"):
            load_config(cfg)

    def test_scalar_threshold_broadcasts(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", neuron={"thresholds": 7.0})
        rc = load_config(cfg)
        assert rc.params.thresholds == (7.0, 7.0)

    def test_bad_solver_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           train={"epochs": 1, "solver": "cg"})
        with pytest.raises(ConfigError, match="solver"):
            load_config(cfg)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "nope.json"))


class TestCheckpoint:
    def _topo(self):
        specs = [LayerSpec(INPUT, 3), LayerSpec(RECURRENT, 5, 0.4),
                 LayerSpec(FEEDFORWARD, 2)]
        return init_weights(build_topology(specs), seed=12)

    def test_roundtrip_exact(self, tmp_path):
        topo = self._topo()
        p = tmp_path / "ck.txt"
        save_checkpoint(p, topo, seed=12)
        loaded, seed = load_checkpoint(p)
        assert seed == 12
        for k in (1, 2):
            assert np.array_equal(loaded.ff_weights[k], topo.ff_weights[k])
        assert np.array_equal(loaded.rec_weights[1], topo.rec_weights[1])
        assert np.array_equal(loaded.rec_masks[1], topo.rec_masks[1])

    def test_save_load_save_byte_identical(self, tmp_path):
        topo = self._topo()
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        save_checkpoint(a, topo, seed=12)
        loaded, seed = load_checkpoint(a)
        save_checkpoint(b, loaded, seed=seed)
        assert a.read_bytes() == b.read_bytes()

    def test_version_mismatch_named(self, tmp_path):
        p = tmp_path / "ck.txt"
        save_checkpoint(p, self._topo(), seed=0)
        text = p.read_text().replace("v1", "v99", 1)
        p.write_text(text)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_corrupted_file_named_error(self, tmp_path):
        p = tmp_path / "ck.txt"
        p.write_text("spikebp-checkpoint v1\nseed 0\nlayers 2\n")
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.txt"
        p.write_text("hello world\n")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(p)


class TestValidateCommand:
    def test_ok(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        assert main(["validate", "--config", str(cfg)]) == EXIT_OK
        assert "config ok" in capsys.readouterr().out

    def test_unknown_key_exit_code(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", typo_key=1)
        assert main(["validate", "--config", str(cfg)]) == EXIT_VALIDATION

    def test_input_size_mismatch(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           data={"source": "synthetic", "num_classes": 2,
                                 "num_inputs": 99, "duration": 200})
        assert main(["validate", "--config", str(cfg)]) == EXIT_VALIDATION

    def test_missing_dataset_path_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           layers=[{"kind": "input", "size": 4},
                                   {"kind": "feedforward", "size": 2}],
                           neuron={"thresholds": [10.0]},
                           data={"source": "event_csv",
                                 "train_events": "nope_events.csv",
                                 "train_labels": "nope_labels.csv",
                                 "num_neurons": 4, "duration": 100})
        assert main(["validate", "--config", str(cfg)]) == EXIT_DATA
        assert "nope_events.csv" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_metrics_and_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,test_acc"
        assert len(lines) == 3  # header + one row per epoch
        assert (out / "checkpoint.txt").exists()
        assert (out / "timing.csv").exists()

    def test_rerun_metrics_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", str(cfg), "--out", str(out1)]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "checkpoint.txt").read_bytes() == (out2 / "checkpoint.txt").read_bytes()

    def test_dry_run_writes_nothing(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "dry"
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--dry-run"]) == EXIT_OK
        assert not out.exists()

    def test_missing_data_file_exit(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json",
                           layers=[{"kind": "input", "size": 4},
                                   {"kind": "feedforward", "size": 2}],
                           neuron={"thresholds": [10.0]},
                           data={"source": "event_csv",
                                 "train_events": "missing.csv",
                                 "train_labels": "missing_l.csv",
                                 "num_neurons": 4, "duration": 100})
        assert main(["train", "--config", str(cfg)]) == EXIT_DATA
        assert "missing.csv" in capsys.readouterr().err


class TestEvalCommand:
    def _setup(self, tmp_path, correct=True):
        params = NeuronParams.for_layers(2)
        topo = build_topology([LayerSpec(INPUT, 1), LayerSpec(FEEDFORWARD, 2)])
        strong = 2.0 * params.threshold(1) / kernel_peak(params)
        topo.ff_weights[1][1 if correct else 0, 0] = strong
        ck = tmp_path / "ck.txt"
        save_checkpoint(ck, topo, seed=0)
        (tmp_path / "e.csv").write_text("0,0,5\n")
        (tmp_path / "l.csv").write_text("0,1\n")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "seed": 0,
            "layers": [{"kind": "input", "size": 1},
                       {"kind": "feedforward", "size": 2}],
            "neuron": {"thresholds": [10.0]},
            "data": {"source": "event_csv", "train_events": "e.csv",
                     "train_labels": "l.csv", "num_neurons": 1,
                     "duration": 50},
        }))
        return ck, cfg

    def test_single_correct_sample(self, tmp_path, capsys):
        ck, cfg = self._setup(tmp_path)
        assert main(["eval", "--checkpoint", str(ck), "--config", str(cfg),
                     "--split", "train"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "accuracy=1.0" in out
        assert "confusion[1]=0,1" in out

    def test_empty_split_errors(self, tmp_path):
        ck, cfg = self._setup(tmp_path)
        assert main(["eval", "--checkpoint", str(ck), "--config", str(cfg),
                     "--split", "test"]) == EXIT_DATA

    def test_corrupted_checkpoint(self, tmp_path):
        ck, cfg = self._setup(tmp_path)
        ck.write_text("garbage")
        assert main(["eval", "--checkpoint", str(ck), "--config", str(cfg),
                     "--split", "train"]) == EXIT_VALIDATION


class TestGradcheckCommand:
    def test_passes_and_echoes_seed(self, capsys):
        assert main(["gradcheck", "--instances", "3", "--seed", "17",
                     "--layers", "3-R4-2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "seed=17" in out
        assert "all gradient checks passed" in out

    def test_injected_error_detected(self, capsys):
        assert main(["gradcheck", "--instances", "2", "--seed", "1",
                     "--layers", "3-R4-2",
                     "--inject-error", "0.05"]) == EXIT_NUMERIC
        assert "FAIL" in capsys.readouterr().out

    def test_dry_run(self):
        assert main(["gradcheck", "--dry-run"]) == EXIT_OK


class TestEncodeCommand:
    def _images(self, tmp_path):
        from spikebp.data import write_idx
        imgs = np.zeros((2, 16), dtype=np.uint8)
        imgs[1, :] = 255
        write_idx(imgs, [3, 7], tmp_path / "i.idx", tmp_path / "l.idx")
        return tmp_path / "i.idx", tmp_path / "l.idx"

    def test_encodes_fixture(self, tmp_path):
        img, lab = self._images(tmp_path)
        ev, lb = tmp_path / "ev.csv", tmp_path / "lb.csv"
        assert main(["encode", "--images", str(img), "--labels", str(lab),
                     "--out-events", str(ev), "--out-labels", str(lb),
                     "--duration", "100", "--seed", "4"]) == EXIT_OK
        assert lb.read_text() == "0,3\n1,7\n"
        events = ev.read_text().splitlines()
        # image 0 is all-zero intensity: its sample id never appears
        assert all(not line.startswith("0,") for line in events)
        assert len(events) > 0

    def test_deterministic(self, tmp_path):
        img, lab = self._images(tmp_path)
        outs = []
        for tag in ("a", "b"):
            ev, lb = tmp_path / f"ev{tag}.csv", tmp_path / f"lb{tag}.csv"
            assert main(["encode", "--images", str(img), "--labels", str(lab),
                         "--out-events", str(ev), "--out-labels", str(lb),
                         "--duration", "80", "--seed", "9"]) == EXIT_OK
            outs.append(ev.read_bytes())
        assert outs[0] == outs[1]

    def test_parse_failure_propagates(self, tmp_path):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x00" * 4)
        assert main(["encode", "--images", str(bad), "--labels", str(bad),
                     "--out-events", str(tmp_path / "e"),
                     "--out-labels", str(tmp_path / "l")]) == EXIT_DATA

    def test_dry_run_writes_nothing(self, tmp_path):
        img, lab = self._images(tmp_path)
        ev = tmp_path / "ev.csv"
        assert main(["encode", "--images", str(img), "--labels", str(lab),
                     "--out-events", str(ev), "--out-labels",
                     str(tmp_path / "lb.csv"), "--dry-run"]) == EXIT_OK
        assert not ev.exists()


class TestDryRuns:
    def test_eval_dry_run(self, tmp_path):
        ck_cfg = TestEvalCommand()._setup(tmp_path)
        assert main(["eval", "--checkpoint", str(ck_cfg[0]), "--config",
                     str(ck_cfg[1]), "--dry-run"]) == EXIT_OK

    def test_validate_dry_run(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["validate", "--config", str(cfg), "--dry-run"]) == EXIT_OK
