import numpy as np
import pandas as pd
import pytest

from src.core.models.report import HorizonReport
from src.core.services.evaluation import cv_baseline, rmse_horizons, run_eval
from src.core.services.model import EquiDiffModel
from src.core.services.property_suite import random_rotations, random_scene, tiny_config
from src.core.services.sampler import (render_trace_svg, sample_scene, samples_frame, trace_frame, write_samples,
                                       write_trace)
from src.utils.errors import CheckpointError, DimensionError, EquiDiffError, InputError

TRACE_STEPS = [200, 150, 100, 50, 0]


@pytest.fixture
def eval_config():
    return tiny_config().model_copy(update={"future_frames": 10})


@pytest.fixture
def eval_scenes(rng, eval_config):
    return [random_scene(rng, n % 3, eval_config.history_frames, with_future=eval_config.future_frames,
                         scene_id=f"e{n}") for n in range(5)]


@pytest.fixture(scope="module")
def trace_model():
    config = tiny_config().model_copy(update={"diffusion_steps": 200, "future_frames": 25})
    return EquiDiffModel.initialize(config, seed=3)


class TestRMSE:
    def test_perfect_predictions(self, rng):
        truths = rng.standard_normal((4, 25, 2))
        report = rmse_horizons(truths, truths)
        assert report.rmse == {"1s": 0.0, "2s": 0.0, "3s": 0.0, "4s": 0.0, "5s": 0.0}

    def test_three_four_five(self, rng):
        truths = rng.standard_normal((3, 25, 2))
        report = rmse_horizons(truths + np.array([3.0, 4.0]), truths)
        assert all(v == pytest.approx(5.0, abs=1e-12) for v in report.rmse.values())

    def test_hand_fixture(self):
        truths = np.zeros((3, 5, 2))
        preds = np.zeros((3, 5, 2))
        preds[:, 0] = [[0.0, 0.0], [1.0, 1.0], [0.0, 3.0]]
        preds[:, 4] = [[1.0, 0.0], [0.0, 2.0], [2.0, 2.0]]
        report = rmse_horizons(preds, truths, horizons=[1, 5], frame_rate_hz=5.0)
        assert report.rmse["0.2s"] == pytest.approx(np.sqrt(11.0 / 3.0), abs=1e-15)
        assert report.rmse["1s"] == pytest.approx(np.sqrt(13.0 / 3.0), abs=1e-15)
        assert report.sample_count == 3

    def test_rotation_invariant(self, rng):
        preds, truths = rng.standard_normal((6, 25, 2)), rng.standard_normal((6, 25, 2))
        base = rmse_horizons(preds, truths).rmse
        for r in random_rotations(rng, 10):
            turned = rmse_horizons(preds @ r, truths @ r).rmse
            assert all(abs(turned[k] - base[k]) < 1e-10 for k in base)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rmse_horizons(np.zeros((2, 25, 2)), np.zeros((3, 25, 2)))

    def test_horizon_range(self):
        with pytest.raises(InputError):
            rmse_horizons(np.zeros((2, 4, 2)), np.zeros((2, 4, 2)), horizons=[5])


class TestCV:
    def test_straight_line(self):
        t = np.arange(15, dtype=float)
        history = np.stack([2.0 * t, -t], axis=1)
        future = np.stack([2.0 * (t[-1] + np.arange(1, 26)), -(t[-1] + np.arange(1, 26))], axis=1)
        assert np.allclose(cv_baseline(history, 25), future, atol=1e-12)

    def test_stationary(self):
        history = np.tile([4.0, -1.0], (15, 1))
        assert np.array_equal(cv_baseline(history, 5), np.tile([4.0, -1.0], (5, 1)))

    def test_arc_geometry(self):
        r, omega, dt = 80.0, 0.15, 0.2
        angle = omega * dt

        def arc(steps):
            return r * np.stack([np.sin(steps * angle), 1.0 - np.cos(steps * angle)], axis=-1)

        history = arc(np.arange(-14, 1, dtype=float))
        pred = cv_baseline(history, 25)
        h = np.arange(1, 26, dtype=float)
        chord = r * np.array([np.sin(4 * angle), -(1.0 - np.cos(4 * angle))]) / 4.0
        expected_error = np.linalg.norm(h[:, None] * chord - arc(h), axis=1)
        assert np.allclose(np.linalg.norm(pred - arc(h), axis=1), expected_error, atol=1e-9)
        assert expected_error[-1] > 1.0

    def test_needs_two_points(self):
        with pytest.raises(InputError):
            cv_baseline(np.zeros((1, 2)), 5)


class TestRunEval:
    def test_cv_needs_no_model(self, eval_scenes, eval_config):
        report = run_eval("cv", None, eval_scenes, run=eval_config)
        truths = np.stack([s.future for s in eval_scenes])
        preds = np.stack([cv_baseline(s.history, eval_config.future_frames) for s in eval_scenes])
        assert report.rmse == rmse_horizons(preds, truths, [5, 10]).rmse
        assert report.variant == "cv"
        assert report.config_hash is None

    def test_same_seed_same_report(self, eval_scenes, eval_config):
        model = EquiDiffModel.initialize(eval_config, seed=0)
        first = run_eval("full", model, eval_scenes, n=2, seed=4)
        second = run_eval("full", model, eval_scenes, n=2, seed=4)
        assert first == second
        assert first.config_hash == eval_config.config_hash()
        assert set(first.rmse) == {"1s", "2s"}

    def test_best_of_flag(self, eval_scenes, eval_config):
        model = EquiDiffModel.initialize(eval_config, seed=0)
        report = run_eval("full", model, eval_scenes, n=3, seed=4, best_of=True)
        assert report.best_of is True
        assert report.samples_per_scene == 3

    def test_variant_mismatch(self, eval_scenes, eval_config):
        model = EquiDiffModel.initialize(eval_config, seed=0)
        with pytest.raises(CheckpointError):
            run_eval("no_context", model, eval_scenes)
        with pytest.raises(CheckpointError):
            run_eval("full", None, eval_scenes)

    def test_scenes_need_futures(self, eval_scenes, eval_config):
        scene = eval_scenes[0].model_copy(update={"future": None})
        with pytest.raises(InputError):
            run_eval("cv", None, [scene], run=eval_config)

    def test_unknown_variant(self, eval_scenes):
        with pytest.raises(InputError):
            run_eval("kalman", None, eval_scenes)


class TestReport:
    def test_text_block(self):
        report = HorizonReport(rmse={"1s": 0.5, "2s": 1.25}, sample_count=10, variant="cv")
        lines = report.to_text().splitlines()
        assert lines[:2] == ["rmse_1s=0.500000", "rmse_2s=1.250000"]
        assert "variant=cv" in lines
        assert not any(line.startswith("maneuver=") for line in lines)

    def test_negative_rmse_rejected(self):
        with pytest.raises(ValueError):
            HorizonReport(rmse={"1s": -1.0}, sample_count=1)


class TestTrace:
    def test_rows_and_final_state(self, rng, trace_model):
        scene = random_scene(rng, 2, trace_model.config.history_frames)
        traced = sample_scene(trace_model, scene, 50, seed=8, record=TRACE_STEPS)
        plain = sample_scene(trace_model, scene, 50, seed=8)
        frame = trace_frame(traced.trace, TRACE_STEPS)
        assert len(frame) == 6250
        final = frame[frame["k"] == 0]
        samples = samples_frame(plain)
        assert np.array_equal(final["x"].to_numpy(), samples["dx"].to_numpy())
        assert np.array_equal(final["y"].to_numpy(), samples["dy"].to_numpy())

    def test_initial_state_is_standard_normal(self, rng, trace_model):
        scene = random_scene(rng, 1, trace_model.config.history_frames)
        state = sample_scene(trace_model, scene, 200, seed=2, record=[200]).trace[200].reshape(-1, 2)
        assert np.all(np.abs(state.mean(axis=0)) < 4.0 / np.sqrt(50 * 25 * 2))
        cov = np.cov(state, rowvar=False)
        assert np.all(np.abs(np.diag(cov) - 1.0) < 0.1)

    def test_files(self, tmp_path, rng, trace_model):
        scene = random_scene(rng, 1, trace_model.config.history_frames)
        traced = sample_scene(trace_model, scene, 3, seed=1, record=[200, 0])
        write_trace(traced.trace, [200, 0], tmp_path / "trace.csv")
        write_samples(traced, tmp_path / "samples.csv")
        trace = pd.read_csv(tmp_path / "trace.csv")
        samples = pd.read_csv(tmp_path / "samples.csv")
        assert list(trace.columns) == ["sample_id", "k", "t", "x", "y"]
        assert list(samples.columns) == ["sample_id", "t", "dx", "dy", "x", "y"]
        assert np.array_equal(trace[trace["k"] == 0]["x"].to_numpy(), samples["dx"].to_numpy())
        with pytest.raises(EquiDiffError):
            write_trace(traced.trace, [100], tmp_path / "missing.csv")

    def test_positions_follow_origin(self, rng, trace_model):
        scene = random_scene(rng, 0, trace_model.config.history_frames).model_copy(update={"origin": np.array([10.0, -5.0])})
        out = sample_scene(trace_model, scene, 2, seed=0)
        assert np.allclose(out.positions, np.array([10.0, -5.0]) + np.cumsum(out.offsets, axis=1))

    def test_svg_is_deterministic(self, tmp_path, rng, trace_model):
        scene = random_scene(rng, 1, trace_model.config.history_frames)
        traced = sample_scene(trace_model, scene, 5, seed=1, record=[200, 0])
        first = render_trace_svg(traced.trace, [200, 0], tmp_path / "a")
        second = render_trace_svg(traced.trace, [200, 0], tmp_path / "b")
        assert [p.name for p in first] == ["k200.svg", "k0.svg"]
        assert all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))
