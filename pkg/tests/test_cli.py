import json

import numpy as np
import pandas as pd
import pytest
import yaml

from main import main
from src.config.run_config import load_run_config
from src.core.services.checkpoint import load_checkpoint
from src.core.services.evaluation import load_split_scenes, run_eval
from src.core.services.model import EquiDiffModel
from src.core.services.trainer import Trainer

RUN = {"hidden_dim": 8, "channels": 4, "layers": 1, "gat_heads": 2, "history_channels": 2, "diffusion_steps": 10,
       "batch_size": 4, "train_steps": 2, "history_frames": 6, "future_frames": 10}


def _yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run = _yaml(root / "run.yaml", RUN)
    synth = _yaml(root / "synth.yaml", {"scenes_per_class": 4})
    assert main(["gen-data", "--config", synth, "--run-config", run, "--out", str(root / "data"), "--seed", "3"]) == 0
    assert main(["train", "--config", run, "--data", str(root / "data"), "--out", str(root / "m.ckpt")]) == 0
    return root


def test_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "gen-data" in capsys.readouterr().out


class TestGenData:
    def test_files(self, workdir):
        data = workdir / "data"
        labels = pd.read_csv(data / "maneuvers.csv")
        assert len(labels) == 16
        assert labels["maneuver"].value_counts().to_dict() == {
            "constant_velocity": 4, "turn_left": 4, "turn_right": 4, "lane_change": 4}
        train, test = pd.read_csv(data / "train.csv"), pd.read_csv(data / "test.csv")
        assert list(train.columns) == ["vehicle_id", "frame", "x_m", "y_m"]
        assert not set(train["vehicle_id"]) & set(test["vehicle_id"])

    def test_byte_identical_rerun(self, workdir, tmp_path):
        args = ["gen-data", "--config", str(workdir / "synth.yaml"), "--run-config", str(workdir / "run.yaml"),
                "--seed", "3", "--out"]
        assert main(args + [str(tmp_path / "again")]) == 0
        for name in ("train.csv", "test.csv", "maneuvers.csv"):
            assert (tmp_path / "again" / name).read_bytes() == (workdir / "data" / name).read_bytes()

    def test_bad_config(self, tmp_path):
        synth = _yaml(tmp_path / "bad.yaml", {"scenes_per_class": -1})
        assert main(["gen-data", "--config", synth, "--out", str(tmp_path / "out")]) == 1

    def test_unknown_key(self, tmp_path):
        synth = _yaml(tmp_path / "bad.yaml", {"scenes": 4})
        assert main(["gen-data", "--config", synth, "--out", str(tmp_path / "out")]) == 1


class TestTrain:
    def test_outputs(self, workdir):
        model = load_checkpoint(workdir / "m.ckpt")
        assert model.config == load_run_config(workdir / "run.yaml")
        log = pd.read_csv(workdir / "m.ckpt.loss.csv")
        assert log["step"].tolist() == [0, 1]

    def test_missing_data(self, workdir, tmp_path):
        args = ["train", "--config", str(workdir / "run.yaml"), "--data", str(tmp_path / "none.csv"),
                "--out", str(tmp_path / "x.ckpt")]
        assert main(args) == 1
        assert not (tmp_path / "x.ckpt").exists()


class TestSampleAndTrace:
    def test_sample(self, workdir, tmp_path):
        args = ["sample", "--ckpt", str(workdir / "m.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--n", "3", "--seed", "1", "--out"]
        assert main(args + [str(tmp_path / "a.csv")]) == 0
        assert main(args + [str(tmp_path / "b.csv")]) == 0
        df = pd.read_csv(tmp_path / "a.csv")
        assert len(df) == 3 * RUN["future_frames"]
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_unknown_ego(self, workdir, tmp_path):
        args = ["sample", "--ckpt", str(workdir / "m.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--ego", "999999", "--out", str(tmp_path / "a.csv")]
        assert main(args) == 1

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
        args = ["sample", "--ckpt", str(tmp_path / "bad.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--out", str(tmp_path / "a.csv")]
        assert main(args) == 1

    def test_trace(self, workdir, tmp_path):
        args = ["trace", "--ckpt", str(workdir / "m.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--n", "4", "--steps", "10,5,0", "--out", str(tmp_path / "t.csv"), "--svg", str(tmp_path / "svg")]
        assert main(args) == 0
        df = pd.read_csv(tmp_path / "t.csv")
        assert len(df) == 4 * 3 * RUN["future_frames"]
        assert df["k"].unique().tolist() == [10, 5, 0]
        assert sorted(p.name for p in (tmp_path / "svg").iterdir()) == ["k0.svg", "k10.svg", "k5.svg"]

    def test_trace_step_out_of_range(self, workdir, tmp_path):
        args = ["trace", "--ckpt", str(workdir / "m.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--steps", "200,0", "--out", str(tmp_path / "t.csv")]
        assert main(args) == 1

    def test_trace_bad_steps(self, workdir, tmp_path):
        args = ["trace", "--ckpt", str(workdir / "m.ckpt"), "--scene", str(workdir / "data" / "test.csv"),
                "--steps", "ten", "--out", str(tmp_path / "t.csv")]
        assert main(args) == 1


class TestEval:
    def test_model_report(self, workdir, tmp_path, capsys):
        args = ["eval", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "data"), "--n", "2",
                "--out", str(tmp_path / "r.json")]
        assert main(args) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert set(report["rmse"]) == {"1s", "2s"}
        assert report["variant"] == "full"
        assert report["samples_per_scene"] == 2
        assert "rmse_1s=" in capsys.readouterr().out

        model = load_checkpoint(workdir / "m.ckpt")
        scenes = load_split_scenes(workdir / "data", model.config)
        assert report["rmse"] == run_eval("full", model, scenes, n=2).rmse

    def test_cv_without_checkpoint(self, workdir, tmp_path):
        args = ["eval", "--variant", "cv", "--config", str(workdir / "run.yaml"), "--data", str(workdir / "data"),
                "--maneuver", "turn_left,turn_right", "--out", str(tmp_path / "cv.json")]
        assert main(args) == 0
        report = json.loads((tmp_path / "cv.json").read_text())
        assert report["variant"] == "cv"
        assert report["maneuver"] == "turn_left,turn_right"
        assert report["sample_count"] == 2
        assert all(np.isfinite(v) for v in report["rmse"].values())

    def test_variant_mismatch(self, workdir, tmp_path):
        args = ["eval", "--ckpt", str(workdir / "m.ckpt"), "--variant", "no_context", "--data",
                str(workdir / "data"), "--out", str(tmp_path / "r.json")]
        assert main(args) == 1

    def test_unknown_variant_is_usage_error(self, workdir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--variant", "kalman", "--data", str(workdir / "data"), "--out", str(tmp_path / "r.json")])
        assert exc.value.code == 2


class TestCheck:
    def test_full_model_passes(self, workdir, capsys):
        args = ["check", "--config", str(workdir / "run.yaml"), "--rotations", "3", "--inputs", "2"]
        assert main(args) == 0
        assert "Property checks" in capsys.readouterr().out

    def test_scalar_backbone_fails(self, workdir, capsys):
        args = ["check", "--config", str(workdir / "run.yaml"), "--variant", "no_equivariance",
                "--rotations", "3", "--inputs", "2"]
        assert main(args) == 1
        assert "FAIL" in capsys.readouterr().out


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default synthetic corpus with a full model and a no_context model trained on it."""
    root = tmp_path_factory.mktemp("default")
    no_context = _yaml(root / "no_context.yaml", {"variant": "no_context"})
    assert main(["gen-data", "--out", str(root / "data"), "--seed", "0"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "full.ckpt")]) == 0
    assert main(["train", "--config", no_context, "--data", str(root / "data"), "--out", str(root / "nc.ckpt")]) == 0
    return root


def _rmse_5s(root, out_name, *args):
    out = root / out_name
    assert main(["eval", "--data", str(root / "data"), "--out", str(out), "--n", "1", "--seed", "0", *args]) == 0
    return json.loads(out.read_text())["rmse"]["5s"]


@pytest.mark.slow
def test_default_training_run(default_run):
    """The EMA probe loss falls below a fifth of its start."""
    model = load_checkpoint(default_run / "full.ckpt")
    scenes = load_split_scenes(default_run / "data", model.config, split_name="train")
    initial = Trainer(EquiDiffModel.initialize(model.config), scenes).probe_loss(use_ema=False)
    assert Trainer(model, scenes).probe_loss(use_ema=True) < 0.2 * initial


@pytest.mark.slow
def test_full_model_beats_constant_velocity_on_turns(default_run):
    turns = ["--maneuver", "turn_left,turn_right"]
    full = _rmse_5s(default_run, "turns_full.json", "--ckpt", str(default_run / "full.ckpt"), *turns)
    cv = _rmse_5s(default_run, "turns_cv.json", "--variant", "cv", *turns)
    assert full < cv


@pytest.mark.slow
def test_context_helps_where_neighbors_decide_the_maneuver(default_run):
    lanes = ["--maneuver", "lane_change,constant_velocity"]
    full = _rmse_5s(default_run, "lanes_full.json", "--ckpt", str(default_run / "full.ckpt"), *lanes)
    no_context = _rmse_5s(default_run, "lanes_nc.json", "--ckpt", str(default_run / "nc.ckpt"),
                          "--variant", "no_context", *lanes)
    assert no_context > full
