"""Conditional equivariant noise predictor eps(y_k, k, c).

Scalars built from the invariant context and the diffusion step gate each
future timestep before and after a stack of VN-Transformer blocks. Gates are
the only carrier of temporal position: vector features get no positional
encoding because any additive vector would break equivariance.
"""
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from src.core import tensorcore as tc
from src.core.tensorcore import ParamGroup, Tensor, TensorLike
from src.core.vn import VNBlockParams, vn_linear, vn_transformer_block
from src.utils.errors import DimensionError, InputError

MAX_PERIOD = 10000.0

StepIndex = Union[int, np.ndarray]


def timestep_embedding(k: StepIndex, dim: int, num_steps: Optional[int] = None) -> np.ndarray:
    """Interleaved sin/cos of k at dim/2 geometric frequencies: [..., dim].

    ``num_steps`` enables the 1 <= k <= K range check; k = 0 is accepted as a probe
    value when it is omitted.
    """
    if dim < 2 or dim % 2:
        raise InputError(f"timestep_embedding: dim must be even and >= 2, got {dim}")
    ks = np.asarray(k, dtype=np.float64)
    if num_steps is not None and (np.any(ks < 1) or np.any(ks > num_steps)):
        raise InputError(f"timestep_embedding: k outside 1..{num_steps}")
    freqs = MAX_PERIOD ** (-np.arange(dim // 2) / (dim // 2))
    angles = ks[..., None] * freqs
    out = np.empty(ks.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class ConditioningParams(ParamGroup):
    """Step-embedding map, context+step map, and the pre/post fusion matrices [T x D']."""
    temb_w: Tensor
    temb_b: Tensor
    cond_w: Tensor
    cond_b: Tensor
    fusion_pre: Tensor
    fusion_post: Tensor

    @staticmethod
    def init(rng: np.random.Generator, hidden_dim: int, future_frames: int, prefix: str) -> Dict[str, np.ndarray]:
        cond_dim = 2 * hidden_dim
        tree = {
            "temb_w": tc.uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim),
            "temb_b": tc.uniform_init(rng, (hidden_dim,), hidden_dim),
            "cond_w": tc.uniform_init(rng, (cond_dim, 2 * hidden_dim), 2 * hidden_dim),
            "cond_b": tc.uniform_init(rng, (cond_dim,), 2 * hidden_dim),
            "fusion_pre": tc.uniform_init(rng, (future_frames, cond_dim), cond_dim),
            "fusion_post": tc.uniform_init(rng, (future_frames, cond_dim), cond_dim),
        }
        return {f"{prefix}.{k}": v for k, v in tree.items()}


def step_embedding(k: StepIndex, params: ConditioningParams, num_steps: Optional[int] = None) -> Tensor:
    raw = timestep_embedding(k, params.temb_w.shape[1], num_steps)
    return tc.tanh(tc.linear(np.atleast_2d(raw), params.temb_w, params.temb_b))


def condition(c: TensorLike, k: StepIndex, params: ConditioningParams, num_steps: Optional[int] = None) -> Tensor:
    """c~ = tanh(W [c ; emb(k)] + b), shape [B, 2D]."""
    c = tc.as_tensor(c)
    if c.ndim == 1:
        c = tc.reshape(c, (1, c.shape[0]))
    emb = step_embedding(k, params, num_steps)
    if emb.shape[0] != c.shape[0]:
        if emb.shape[0] == 1:
            emb = tc.add(emb, np.zeros((c.shape[0], 1)))
        elif c.shape[0] == 1:
            c = tc.add(c, np.zeros((emb.shape[0], 1)))
        else:
            raise DimensionError(f"condition: {c.shape[0]} contexts for {emb.shape[0]} steps")
    return tc.tanh(tc.linear(tc.concat([c, emb], axis=-1), params.cond_w, params.cond_b))


def fusion_gates(c_tilde: TensorLike, weight: TensorLike) -> Tensor:
    """Per-timestep gates W c~: [B, T] for [B, D'] conditioning."""
    c_tilde, weight = tc.as_tensor(c_tilde), tc.as_tensor(weight)
    if weight.ndim != 2 or c_tilde.shape[-1] != weight.shape[1]:
        raise DimensionError(f"context_fuse: conditioning {c_tilde.shape} does not match weight {weight.shape}")
    return tc.linear(c_tilde, weight)


def gate(x: Tensor, gates: Tensor) -> Tensor:
    """Scale features whose leading axes match ``gates`` by one scalar per entry."""
    if x.shape[:gates.ndim] != gates.shape:
        raise DimensionError(f"context_fuse: gates {gates.shape} do not lead features {x.shape}")
    return tc.mul(x, tc.reshape(gates, gates.shape + (1,) * (x.ndim - gates.ndim)))


def context_fuse(c_tilde: TensorLike, x: TensorLike, weight: TensorLike) -> Tensor:
    """Scale every timestep of x by its gate (W c~)_t.

    Unbatched: c~ [D'] with x [T, 2] or [T, C, 2]. Batched: c~ [B, D'] with x [B, T, ...].
    """
    c_tilde, x = tc.as_tensor(c_tilde), tc.as_tensor(x)
    if c_tilde.ndim == 1:
        gates = fusion_gates(tc.reshape(c_tilde, (1, -1)), weight)
        return gate(x, tc.reshape(gates, gates.shape[1:]))
    return gate(x, fusion_gates(c_tilde, weight))


@dataclass(frozen=True)
class BackboneParams:
    conditioning: ConditioningParams
    lift: Tensor                         # [C x (1 + H)]
    blocks: Tuple[VNBlockParams, ...]
    project: Tensor                      # [1 x C]

    @classmethod
    def from_tree(cls, tree: Mapping[str, Tensor], layers: int, prefix: str = "backbone") -> "BackboneParams":
        for name in (f"{prefix}.lift", f"{prefix}.project"):
            if name not in tree:
                raise InputError(f"BackboneParams: missing parameter {name}")
        return cls(
            conditioning=ConditioningParams.from_tree(tree, f"{prefix}.cond"),
            lift=tree[f"{prefix}.lift"],
            blocks=tuple(VNBlockParams.from_tree(tree, f"{prefix}.blocks.{i}") for i in range(layers)),
            project=tree[f"{prefix}.project"],
        )

    @staticmethod
    def init(rng: np.random.Generator, hidden_dim: int, channels: int, layers: int, future_frames: int,
             history_channels: int, prefix: str = "backbone") -> Dict[str, np.ndarray]:
        in_channels = 1 + history_channels
        tree = ConditioningParams.init(rng, hidden_dim, future_frames, f"{prefix}.cond")
        tree[f"{prefix}.lift"] = tc.uniform_init(rng, (channels, in_channels), in_channels)
        for i in range(layers):
            tree.update(VNBlockParams.init(rng, channels, f"{prefix}.blocks.{i}"))
        tree[f"{prefix}.project"] = tc.uniform_init(rng, (1, channels), channels)
        return tree


def _batched(y_k: TensorLike, c: TensorLike, history_vectors: Optional[np.ndarray]):
    y_k, c = tc.as_tensor(y_k), tc.as_tensor(c)
    single = y_k.ndim == 2
    if single:
        y_k = tc.reshape(y_k, (1,) + y_k.shape)
        if history_vectors is not None:
            history_vectors = np.asarray(history_vectors)[None]
    if c.ndim == 1:
        c = tc.reshape(c, (1, c.shape[0]))
    if y_k.ndim != 3 or y_k.shape[-1] != 2:
        raise DimensionError(f"denoise: y_k must be [B, T, 2] or [T, 2], got {y_k.shape}")
    return y_k, c, history_vectors, single


def input_channels(y: Tensor, history_vectors: Optional[np.ndarray], expected: int) -> Tensor:
    """[B, T, 1 + H, 2]: the noisy offset of each token plus the ego's recent velocity vectors."""
    batch, frames = y.shape[0], y.shape[1]
    tokens = tc.reshape(y, (batch, frames, 1, 2))
    extra = expected - 1
    if extra == 0:
        return tokens
    hv = np.asarray(history_vectors, dtype=np.float64) if history_vectors is not None else None
    if hv is None or hv.shape[-2:] != (extra, 2):
        got = None if hv is None else hv.shape
        raise DimensionError(f"denoise: expected {extra} history vectors per scene, got {got}")
    hv = np.broadcast_to(hv, (batch, extra, 2))
    repeated = np.broadcast_to(hv[:, None, :, :], (batch, frames, extra, 2))
    return tc.concat([tokens, Tensor(repeated)], axis=2)


def denoise(y_k: TensorLike, k: StepIndex, c: TensorLike, params: BackboneParams,
            history_vectors: Optional[np.ndarray] = None, heads: int = 1,
            num_steps: Optional[int] = None) -> Tensor:
    """Predict the noise in y_k ([B, T, 2] or [T, 2]); output has the input's shape."""
    y, c, history_vectors, single = _batched(y_k, c, history_vectors)
    cond = params.conditioning
    if y.shape[1] != cond.fusion_pre.shape[0]:
        raise DimensionError(f"denoise: {y.shape[1]} timesteps but gates for {cond.fusion_pre.shape[0]}")
    c_tilde = condition(c, k, cond, num_steps)
    x = context_fuse(c_tilde, y, cond.fusion_pre)
    features = vn_linear(params.lift, input_channels(x, history_vectors, params.lift.shape[1]))
    for block in params.blocks:
        features = vn_transformer_block(features, block, heads)
    out = tc.reshape(vn_linear(params.project, features), y.shape)
    eps = context_fuse(c_tilde, out, cond.fusion_post)
    return tc.reshape(eps, eps.shape[1:]) if single else eps
