"""Scalar transformer noise predictor used as the non-equivariant ablation.

Tokens are the flattened coordinates of each future step (its noisy offset
plus the ego's recent velocity vectors), lifted by a dense layer with bias and
tagged with a sinusoidal positional encoding. The context gates are shared
with the equivariant backbone so the two differ only in how they treat vectors.
"""
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.core import tensorcore as tc
from src.core.backbone import ConditioningParams, StepIndex, _batched, condition, context_fuse, input_channels
from src.core.tensorcore import ParamGroup, Tensor, TensorLike
from src.utils.errors import DimensionError, InputError


@dataclass(frozen=True)
class ScalarBlockParams(ParamGroup):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @staticmethod
    def init(rng: np.random.Generator, width: int, prefix: str) -> Dict[str, np.ndarray]:
        square = (width, width)
        tree = {
            "w_q": tc.uniform_init(rng, square, width),
            "w_k": tc.uniform_init(rng, square, width),
            "w_v": tc.uniform_init(rng, square, width),
            "w_o": np.zeros(square),
            "ln1_gamma": np.ones(width),
            "ln1_beta": np.zeros(width),
            "mlp_w1": tc.uniform_init(rng, square, width),
            "mlp_b1": tc.uniform_init(rng, (width,), width),
            "mlp_w2": np.zeros(square),
            "mlp_b2": np.zeros(width),
            "ln2_gamma": np.ones(width),
            "ln2_beta": np.zeros(width),
        }
        return {f"{prefix}.{k}": v for k, v in tree.items()}


def positional_encoding(frames: int, width: int) -> np.ndarray:
    """Sinusoidal encoding [T, width] of token positions 0..T-1."""
    if width % 2:
        raise InputError(f"positional_encoding: width must be even, got {width}")
    pos = np.arange(frames, dtype=np.float64)[:, None]
    freqs = 10000.0 ** (-np.arange(width // 2) / (width // 2))
    out = np.empty((frames, width))
    out[:, 0::2] = np.sin(pos * freqs)
    out[:, 1::2] = np.cos(pos * freqs)
    return out


def multi_head_attention(x: Tensor, params: ScalarBlockParams, heads: int) -> Tensor:
    batch, frames, width = x.shape
    if width % heads:
        raise DimensionError(f"multi_head_attention: width {width} not divisible by {heads} heads")

    def split(t: Tensor) -> Tensor:
        return tc.transpose(tc.reshape(t, (batch, frames, heads, width // heads)), (0, 2, 1, 3))

    q, k, v = (split(tc.linear(x, w)) for w in (params.w_q, params.w_k, params.w_v))
    scores = tc.mul(tc.matmul(q, tc.swapaxes(k, -1, -2)), 1.0 / np.sqrt(width // heads))
    mixed = tc.matmul(tc.softmax(scores, axis=-1), v)
    merged = tc.reshape(tc.transpose(mixed, (0, 2, 1, 3)), (batch, frames, width))
    return tc.linear(merged, params.w_o)


def scalar_transformer_block(x: Tensor, params: ScalarBlockParams, heads: int = 1) -> Tensor:
    h = tc.layer_norm(tc.add(x, multi_head_attention(x, params, heads)), params.ln1_gamma, params.ln1_beta)
    hidden = tc.leaky_relu(tc.linear(h, params.mlp_w1, params.mlp_b1))
    return tc.layer_norm(tc.add(h, tc.linear(hidden, params.mlp_w2, params.mlp_b2)), params.ln2_gamma, params.ln2_beta)


@dataclass(frozen=True)
class ScalarBackboneParams:
    conditioning: ConditioningParams
    lift_w: Tensor                       # [W x 2(1 + H)]
    lift_b: Tensor
    blocks: Tuple[ScalarBlockParams, ...]
    out_w: Tensor                        # [2 x W]
    out_b: Tensor

    @property
    def history_channels(self) -> int:
        return self.lift_w.shape[1] // 2 - 1

    @classmethod
    def from_tree(cls, tree: Mapping[str, Tensor], layers: int, prefix: str = "backbone") -> "ScalarBackboneParams":
        names = ("lift_w", "lift_b", "out_w", "out_b")
        missing = [f"{prefix}.{n}" for n in names if f"{prefix}.{n}" not in tree]
        if missing:
            raise InputError(f"ScalarBackboneParams: missing parameters {missing}")
        return cls(
            conditioning=ConditioningParams.from_tree(tree, f"{prefix}.cond"),
            lift_w=tree[f"{prefix}.lift_w"],
            lift_b=tree[f"{prefix}.lift_b"],
            blocks=tuple(ScalarBlockParams.from_tree(tree, f"{prefix}.blocks.{i}") for i in range(layers)),
            out_w=tree[f"{prefix}.out_w"],
            out_b=tree[f"{prefix}.out_b"],
        )

    @staticmethod
    def init(rng: np.random.Generator, hidden_dim: int, channels: int, layers: int, future_frames: int,
             history_channels: int, prefix: str = "backbone") -> Dict[str, np.ndarray]:
        in_dim = 2 * (1 + history_channels)
        tree = ConditioningParams.init(rng, hidden_dim, future_frames, f"{prefix}.cond")
        tree[f"{prefix}.lift_w"] = tc.uniform_init(rng, (channels, in_dim), in_dim)
        tree[f"{prefix}.lift_b"] = tc.uniform_init(rng, (channels,), in_dim)
        for i in range(layers):
            tree.update(ScalarBlockParams.init(rng, channels, f"{prefix}.blocks.{i}"))
        tree[f"{prefix}.out_w"] = tc.uniform_init(rng, (2, channels), channels)
        tree[f"{prefix}.out_b"] = tc.uniform_init(rng, (2,), channels)
        return tree


def scalar_denoise(y_k: TensorLike, k: StepIndex, c: TensorLike, params: ScalarBackboneParams,
                   history_vectors: Optional[np.ndarray] = None, heads: int = 1,
                   num_steps: Optional[int] = None) -> Tensor:
    """Drop-in replacement for ``denoise`` without rotation equivariance."""
    y, c, history_vectors, single = _batched(y_k, c, history_vectors)
    cond = params.conditioning
    batch, frames = y.shape[0], y.shape[1]
    if frames != cond.fusion_pre.shape[0]:
        raise DimensionError(f"scalar_denoise: {frames} timesteps but gates for {cond.fusion_pre.shape[0]}")
    c_tilde = condition(c, k, cond, num_steps)
    x = context_fuse(c_tilde, y, cond.fusion_pre)
    tokens = input_channels(x, history_vectors, 1 + params.history_channels)
    flat = tc.reshape(tokens, (batch, frames, -1))
    h = tc.add(tc.linear(flat, params.lift_w, params.lift_b), positional_encoding(frames, params.lift_w.shape[0]))
    for block in params.blocks:
        h = scalar_transformer_block(h, block, heads)
    eps = context_fuse(c_tilde, tc.linear(h, params.out_w, params.out_b), cond.fusion_post)
    return tc.reshape(eps, eps.shape[1:]) if single else eps
