import numpy as np
import pytest

from src.core import tensorcore as tc
from src.core.services.property_suite import (LAYER_TOL, equivariance_deviation, layer_equivariance,
                                              random_rotations, randomize)
from src.core.vn import (VNBlockParams, frobenius_scores, rotate, rotation_matrix, vn_attention, vn_attention_weights,
                         vn_layernorm, vn_linear, vn_relu, vn_relu_project, vn_transformer_block)
from src.utils.errors import DimensionError


class TestRotate:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 2))
        assert np.array_equal(rotate(x, 0.0), x)

    def test_quarter_turn(self):
        assert np.allclose(rotate(np.array([1.0, 0.0]), np.pi / 2), [0.0, 1.0], atol=1e-12)

    def test_group_law(self, rng):
        x = rng.standard_normal((4, 2))
        assert np.allclose(rotate(rotate(x, 0.3), 1.1), rotate(x, 1.4), atol=1e-12)

    def test_tensor_in_tensor_out(self):
        out = rotate(tc.Tensor(np.ones((2, 2))), 0.5)
        assert isinstance(out, tc.Tensor)

    def test_rejects_non_vectors(self):
        with pytest.raises(DimensionError):
            rotate(np.ones((2, 3)), 0.1)


class TestVNLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((5, 3, 2))
        assert np.array_equal(vn_linear(np.eye(3), x).numpy(), x)

    def test_scalar_scaling(self):
        assert np.array_equal(vn_linear([[2.0]], [[[1.0, 3.0]]]).numpy(), [[[2.0, 6.0]]])

    def test_equivariance(self, rng):
        w, x = rng.standard_normal((4, 3)), rng.standard_normal((5, 3, 2))
        r = rotation_matrix(0.7)
        assert np.allclose(vn_linear(w, x @ r).numpy(), vn_linear(w, x).numpy() @ r, atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            vn_linear(np.ones((2, 4)), rng.standard_normal((5, 3, 2)))


class TestVNRelu:
    def test_positive_alignment_passes_through(self):
        out = vn_relu_project(tc.Tensor([[1.0, 0.0]]), tc.Tensor([[1.0, 1.0]]))
        assert np.array_equal(out.numpy(), [[1.0, 0.0]])

    def test_opposite_direction_is_removed(self):
        out = vn_relu_project(tc.Tensor([[1.0, 0.0]]), tc.Tensor([[-1.0, 0.0]]))
        assert np.allclose(out.numpy(), [[0.0, 0.0]])

    def test_zero_direction_passes_through(self):
        out = vn_relu_project(tc.Tensor([[1.0, 2.0]]), tc.Tensor([[0.0, 0.0]]))
        assert np.array_equal(out.numpy(), [[1.0, 2.0]])

    def test_shared_direction(self, rng):
        x = rng.standard_normal((4, 3, 2))
        out = vn_relu(x, rng.standard_normal((3, 3)), rng.standard_normal((1, 3)))
        assert out.shape == (4, 3, 2)

    def test_projection_is_idempotent(self, rng):
        q, k = tc.Tensor(rng.standard_normal((6, 4, 2))), tc.Tensor(rng.standard_normal((6, 4, 2)))
        once = vn_relu_project(q, k)
        twice = vn_relu_project(once, k)
        assert np.max(np.abs(twice.numpy() - once.numpy())) < 1e-12


class TestVNAttention:
    def test_single_key_returns_value(self, rng):
        q, k, z = (rng.standard_normal((1, 3, 2)) for _ in range(3))
        assert np.allclose(vn_attention(q, k, z).numpy(), z)

    def test_zero_query_averages(self, rng):
        k, z = rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2))
        out = vn_attention(np.zeros((2, 3, 2)), k, z).numpy()
        assert np.allclose(out, np.broadcast_to(z.mean(axis=0), (2, 3, 2)))

    def test_scores_invariant(self, rng):
        q, k = rng.standard_normal((3, 4, 2)), rng.standard_normal((5, 4, 2))
        r = rotation_matrix(2.1)
        base = frobenius_scores(q, k, heads=2).numpy()
        assert np.allclose(frobenius_scores(q @ r, k @ r, heads=2).numpy(), base, atol=1e-10)

    @pytest.mark.parametrize("heads", [1, 2])
    def test_weight_rows_sum_to_one(self, rng, heads):
        q, k = tc.Tensor(rng.standard_normal((2, 3, 4, 2))), tc.Tensor(rng.standard_normal((2, 5, 4, 2)))
        weights = vn_attention_weights(q, k, heads).numpy()
        assert weights.shape == (2, heads, 3, 5)
        assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-12

    def test_heads_must_divide_channels(self, rng):
        x = rng.standard_normal((3, 3, 2))
        with pytest.raises(DimensionError):
            vn_attention(x, x, x, heads=2)


class TestVNLayerNorm:
    def test_equal_norms_vanish(self):
        x = np.array([[[3.0, 4.0], [0.0, 5.0], [-5.0, 0.0]]])
        out = vn_layernorm(x, np.ones(3), np.zeros(3)).numpy()
        assert np.allclose(out, 0.0)

    def test_norms_follow_layer_norm(self, rng):
        x = rng.standard_normal((4, 6, 2))
        out = vn_layernorm(x, np.ones(6), np.zeros(6)).numpy()
        norms = np.linalg.norm(x, axis=-1)
        expected = tc.layer_norm(norms, np.ones(6), np.zeros(6)).numpy()
        signed = np.sign((out * x).sum(axis=-1)) * np.linalg.norm(out, axis=-1)
        assert np.allclose(signed, expected, atol=1e-12)

    def test_zero_channel_stays_zero(self, rng):
        x = rng.standard_normal((2, 3, 2))
        x[:, 1] = 0.0
        out = vn_layernorm(x, np.ones(3), np.ones(3)).numpy()
        assert np.array_equal(out[:, 1], np.zeros((2, 2)))


class TestBlock:
    def test_zero_residual_branches(self, rng):
        channels = 4
        tree = tc.bind(VNBlockParams.init(rng, channels, "b"))
        block = VNBlockParams.from_tree(tree, "b")
        x = rng.standard_normal((5, channels, 2))
        once = vn_layernorm(x, block.ln1_gamma, block.ln1_beta)
        expected = vn_layernorm(once, block.ln2_gamma, block.ln2_beta).numpy()
        assert np.allclose(vn_transformer_block(x, block).numpy(), expected, atol=1e-12)

    def test_block_equivariance(self, rng):
        channels = 6
        block = VNBlockParams.from_tree(tc.bind(randomize(VNBlockParams.init(rng, channels, "b"), rng)), "b")

        def fn(x):
            return vn_transformer_block(x, block, heads=2).numpy()

        deviation = equivariance_deviation(fn, [rng.standard_normal((7, channels, 2))], random_rotations(rng, 100))
        assert deviation < LAYER_TOL

    def test_batched_matches_per_example(self, rng):
        block = VNBlockParams.from_tree(tc.bind(randomize(VNBlockParams.init(rng, 4, "b"), rng)), "b")
        x = rng.standard_normal((3, 5, 4, 2))
        batched = vn_transformer_block(x, block).numpy()
        for i in range(3):
            assert np.allclose(batched[i], vn_transformer_block(x[i], block).numpy(), atol=1e-12)


def test_layer_suite(rng):
    results = layer_equivariance(rng, rotations=20, inputs=5)
    assert {r.name for r in results} == {"vn_linear", "vn_relu", "vn_attention", "vn_layernorm", "vn_transformer_block"}
    failed = [(r.name, r.margin) for r in results if not r.passed]
    assert not failed
