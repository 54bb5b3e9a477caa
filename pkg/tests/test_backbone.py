import numpy as np
import pytest

from src.config.run_config import RunConfig
from src.core import tensorcore as tc
from src.core.backbone import BackboneParams, context_fuse, denoise, timestep_embedding
from src.core.scalar_backbone import ScalarBackboneParams, positional_encoding, scalar_denoise
from src.core.services.model import EquiDiffModel
from src.core.services.property_suite import (GRAD_TOL, MODEL_TOL, denoiser_equivariance, random_scene, randomize,
                                              sampling_equivariance, tiny_config)
from src.core.vn import rotation_matrix
from src.processing.batching import collate
from src.utils.errors import DimensionError, InputError


def _model(variant: str, rng: np.random.Generator, **overrides) -> EquiDiffModel:
    config = tiny_config(variant).model_copy(update=overrides) if overrides else tiny_config(variant)
    return EquiDiffModel(config, randomize(EquiDiffModel.init_params(config, 0), rng))


class TestTimestepEmbedding:
    def test_zero_step(self):
        emb = timestep_embedding(0, 8)
        assert np.array_equal(emb[0::2], np.zeros(4))
        assert np.array_equal(emb[1::2], np.ones(4))

    def test_distinct_steps(self):
        emb = timestep_embedding(np.arange(1, 201), 4)
        assert len(np.unique(np.round(emb, 12), axis=0)) == 200

    def test_repeatable(self):
        assert np.array_equal(timestep_embedding(17, 16), timestep_embedding(17, 16))

    def test_range_check(self):
        with pytest.raises(InputError):
            timestep_embedding(0, 8, num_steps=200)
        with pytest.raises(InputError):
            timestep_embedding(3, 5)


class TestContextFuse:
    def test_unit_gate(self, rng):
        x = rng.standard_normal((4, 2))
        weight = np.zeros((4, 3))
        weight[:, 0] = 1.0
        assert np.array_equal(context_fuse(np.array([1.0, 0.0, 0.0]), x, weight).numpy(), x)

    def test_zero_gate(self, rng):
        out = context_fuse(rng.standard_normal(3), rng.standard_normal((4, 5, 2)), np.zeros((4, 3)))
        assert np.array_equal(out.numpy(), np.zeros((4, 5, 2)))

    def test_commutes_with_rotation(self, rng):
        c, x, w = rng.standard_normal(3), rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
        r = rotation_matrix(0.4)
        assert np.allclose(context_fuse(c, x @ r, w).numpy(), context_fuse(c, x, w).numpy() @ r, atol=1e-12)

    def test_batched(self, rng):
        c, x, w = rng.standard_normal((2, 3)), rng.standard_normal((2, 4, 2)), rng.standard_normal((4, 3))
        out = context_fuse(c, x, w).numpy()
        assert np.allclose(out[1], context_fuse(c[1], x[1], w).numpy())

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            context_fuse(rng.standard_normal(3), rng.standard_normal((4, 2)), np.zeros((4, 5)))
        with pytest.raises(DimensionError):
            context_fuse(rng.standard_normal(3), rng.standard_normal((5, 2)), np.zeros((4, 3)))


class TestDenoise:
    def test_equivariance(self, rng):
        result = denoiser_equivariance(_model("full", rng), rng, rotations=100, inputs=3)
        assert result.passed, result.margin

    def test_equivariance_without_history_channels(self, rng):
        result = denoiser_equivariance(_model("full", rng, history_channels=0), rng, rotations=20, inputs=2)
        assert result.passed, result.margin

    def test_scalar_backbone_is_not_equivariant(self, rng):
        result = denoiser_equivariance(_model("no_equivariance", rng), rng, rotations=20, inputs=2)
        assert result.margin > 1e-2

    def test_zero_output_gates(self, rng):
        config = tiny_config()
        tree = EquiDiffModel.init_params(config, 0)
        tree["backbone.cond.fusion_post"] = np.zeros_like(tree["backbone.cond.fusion_post"])
        params = BackboneParams.from_tree(tc.bind(tree), config.layers)
        y = rng.standard_normal((config.future_frames, 2))
        eps = denoise(y, 3, rng.standard_normal(config.hidden_dim), params,
                      rng.standard_normal((config.history_channels, 2)))
        assert np.array_equal(eps.numpy(), np.zeros_like(y))

    def test_batched_matches_single(self, rng):
        model = _model("full", rng)
        tree = model.bind()
        config = model.config
        y = rng.standard_normal((3, config.future_frames, 2))
        c = rng.standard_normal((3, config.hidden_dim))
        hv = rng.standard_normal((3, config.history_channels, 2))
        ks = np.array([1, 5, 10])
        batched = model.denoise(y, ks, c, hv, tree).numpy()
        for i in range(3):
            single = model.denoise(y[i], int(ks[i]), c[i], hv[i], tree).numpy()
            assert np.allclose(batched[i], single, atol=1e-12)

    @pytest.mark.parametrize("frames", [1, 3, 7, 25])
    def test_output_shape_follows_horizon(self, rng, frames):
        config = tiny_config().model_copy(update={"future_frames": frames})
        params = BackboneParams.from_tree(tc.bind(EquiDiffModel.init_params(config, 0)), config.layers)
        hv = rng.standard_normal((config.history_channels, 2))
        y = rng.standard_normal((frames, 2))
        assert denoise(y, 2, rng.standard_normal(config.hidden_dim), params, hv).shape == (frames, 2)
        batch = rng.standard_normal((3, frames, 2))
        eps = denoise(batch, np.array([1, 5, 10]), rng.standard_normal((3, config.hidden_dim)), params,
                      np.broadcast_to(hv, (3,) + hv.shape))
        assert eps.shape == (3, frames, 2)

    def test_missing_history_vectors(self, rng):
        model = _model("full", rng)
        y = rng.standard_normal((model.config.future_frames, 2))
        with pytest.raises(DimensionError):
            model.denoise(y, 1, rng.standard_normal(model.config.hidden_dim), None, model.bind())

    def test_wrong_horizon(self, rng):
        model = _model("full", rng)
        y = rng.standard_normal((model.config.future_frames + 1, 2))
        with pytest.raises(DimensionError):
            model.denoise(y, 1, rng.standard_normal(model.config.hidden_dim),
                          rng.standard_normal((model.config.history_channels, 2)), model.bind())

    def test_training_loss_gradient(self, rng):
        config = RunConfig(hidden_dim=16, channels=8, layers=1, gat_heads=2, history_channels=2,
                           diffusion_steps=10, history_frames=5, future_frames=4)
        scenes = [random_scene(rng, n, config.history_frames, with_future=config.future_frames, scene_id=str(n))
                  for n in (0, 2)]
        batch = collate(scenes, config.history_channels)
        model = EquiDiffModel(config, randomize(EquiDiffModel.init_params(config, 1), rng))

        def loss(tree):
            return model.loss(batch, np.random.Generator(np.random.Philox(11)), tree)

        assert tc.grad_check(loss, model.params, max_coords=60, rng=rng) < GRAD_TOL


class TestSampling:
    def test_rotated_scene_and_noise(self, rng):
        result = sampling_equivariance(_model("full", rng), rng, rotations=10)
        assert result.passed, result.margin
        assert result.threshold == MODEL_TOL

    def test_no_context_variant_is_equivariant(self, rng):
        result = sampling_equivariance(_model("no_context", rng), rng, rotations=10)
        assert result.passed, result.margin


class TestScalarBackbone:
    def test_positional_encoding(self):
        pe = positional_encoding(5, 6)
        assert pe.shape == (5, 6)
        assert np.array_equal(pe[0, 0::2], np.zeros(3))

    def test_shapes(self, rng):
        config = tiny_config("no_equivariance")
        params = ScalarBackboneParams.from_tree(tc.bind(EquiDiffModel.init_params(config, 0)), config.layers)
        assert params.history_channels == config.history_channels
        y = rng.standard_normal((2, config.future_frames, 2))
        eps = scalar_denoise(y, np.array([1, 2]), rng.standard_normal((2, config.hidden_dim)), params,
                             rng.standard_normal((2, config.history_channels, 2)))
        assert eps.shape == y.shape
