"""SO(2)-equivariant vector-neuron layers and the VN-Transformer block.

A vector feature is a tensor whose last axis holds 2D vectors, laid out as
``[..., tokens, channels, 2]``. Every map here mixes channels with scalar
weights or rescales vectors by rotation-invariant quantities, so rotating all
input vectors rotates the output identically.
"""
from dataclasses import dataclass
from typing import Dict, Union

import numpy as np

from src.core import tensorcore as tc
from src.core.tensorcore import ParamGroup, Tensor, TensorLike
from src.utils.errors import DimensionError

VecFeature = Tensor

ZERO_NORM = 1e-12


def rotation_matrix(theta: float) -> np.ndarray:
    """R such that ``x @ R`` rotates the row vector ``x`` counter-clockwise by ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotate(x: Union[TensorLike, np.ndarray], rotation: Union[float, np.ndarray]):
    """Right-multiply every 2-vector of ``x`` by R. Arrays stay arrays, tensors stay tensors."""
    r = rotation_matrix(rotation) if np.ndim(rotation) == 0 else np.asarray(rotation, dtype=np.float64)
    if isinstance(x, Tensor):
        _check_vec(x, "rotate")
        return tc.matmul(x, r)
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise DimensionError(f"rotate: last extent must be 2, got shape {arr.shape}")
    return arr @ r


def _check_vec(x: Tensor, op: str) -> None:
    if x.ndim < 2 or x.shape[-1] != 2:
        raise DimensionError(f"{op}: expected [..., channels, 2], got shape {x.shape}")


def vn_linear(weight: TensorLike, x: TensorLike) -> VecFeature:
    """Mix channels: out[..., c, :] = sum_j W[c, j] x[..., j, :]. No bias."""
    weight, x = tc.as_tensor(weight), tc.as_tensor(x)
    _check_vec(x, "vn_linear")
    if weight.ndim != 2 or weight.shape[1] != x.shape[-2]:
        raise DimensionError(f"vn_linear: weight {weight.shape} does not match features {x.shape}")
    return tc.matmul(weight, x)


def vn_relu_project(q: VecFeature, k: VecFeature) -> VecFeature:
    """Keep q where <q, k> >= 0, otherwise remove its component along k."""
    dot = tc.sum_(tc.mul(q, k), axis=-1, keepdims=True)
    kk = tc.sum_(tc.mul(k, k), axis=-1, keepdims=True)
    active = (dot.data < 0) & (kk.data >= ZERO_NORM ** 2)
    safe_kk = tc.add(kk, np.where(active, 0.0, 1.0))
    coef = tc.mul(tc.div(dot, safe_kk), active.astype(np.float64))
    return tc.sub(q, tc.mul(coef, k))


def vn_relu(x: TensorLike, weight: TensorLike, direction: TensorLike) -> VecFeature:
    """VN-ReLU with learned features q = W x and learned directions k = U x.

    ``direction`` may have a single row, in which case one direction is shared
    by every output channel.
    """
    x = tc.as_tensor(x)
    q = vn_linear(weight, x)
    k = vn_linear(direction, x)
    if k.shape[-2] not in (1, q.shape[-2]):
        raise DimensionError(f"vn_relu: {k.shape[-2]} directions for {q.shape[-2]} channels")
    return vn_relu_project(q, k)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., T, C, 2] -> [..., H, T, 2C/H]
    lead, tokens, channels = x.shape[:-3], x.shape[-3], x.shape[-2]
    if channels % heads:
        raise DimensionError(f"vn_attention: {channels} channels not divisible by {heads} heads")
    split = tc.reshape(x, lead + (tokens, heads, 2 * channels // heads))
    n = len(lead)
    return tc.transpose(split, list(range(n)) + [n + 1, n, n + 2])


def frobenius_scores(q: VecFeature, k: VecFeature, heads: int = 1) -> Tensor:
    """Scaled Frobenius inner products <Q^(m), K^(n)>_F / sqrt(2C/H), shape [..., H, M, N]."""
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    return tc.mul(tc.matmul(qh, tc.swapaxes(kh, -1, -2)), scale)


def vn_attention_weights(q: VecFeature, k: VecFeature, heads: int = 1) -> Tensor:
    return tc.softmax(frobenius_scores(q, k, heads), axis=-1)


def vn_attention(q: TensorLike, k: TensorLike, z: TensorLike, heads: int = 1) -> VecFeature:
    q, k, z = tc.as_tensor(q), tc.as_tensor(k), tc.as_tensor(z)
    for name, t in (("Q", q), ("K", k), ("Z", z)):
        if t.ndim < 3 or t.shape[-1] != 2:
            raise DimensionError(f"vn_attention: {name} must be [..., tokens, channels, 2], got {t.shape}")
    if not (q.shape[-2] == k.shape[-2] == z.shape[-2]) or k.shape[-3] != z.shape[-3]:
        raise DimensionError(f"vn_attention: incompatible Q {q.shape}, K {k.shape}, Z {z.shape}")
    weights = vn_attention_weights(q, k, heads)
    mixed = tc.matmul(weights, _split_heads(z, heads))  # [..., H, M, 2C/H]
    n = mixed.ndim - 3
    merged = tc.transpose(mixed, list(range(n)) + [n + 1, n, n + 2])
    return tc.reshape(merged, q.shape)


def vn_layernorm(z: TensorLike, gamma: TensorLike, beta: TensorLike) -> VecFeature:
    """Unit directions rescaled by LayerNorm of the per-token channel norms."""
    z = tc.as_tensor(z)
    _check_vec(z, "vn_layernorm")
    norms = tc.l2norm(z, axis=-1)  # [..., T, C]
    zero = norms.data < ZERO_NORM
    directions = tc.div(z, tc.reshape(tc.add(norms, zero.astype(np.float64)), norms.shape + (1,)))
    if zero.any():
        directions = tc.mul(directions, (~zero).astype(np.float64)[..., None])
    scale = tc.layer_norm(norms, gamma, beta, axis=-1)
    return tc.mul(directions, tc.reshape(scale, norms.shape + (1,)))


@dataclass(frozen=True)
class VNBlockParams(ParamGroup):
    """Self-attention projections, two VN-LayerNorms and a VN-MLP, all [C x C] or [C]."""
    w_q: Tensor
    w_k: Tensor
    w_z: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp_in: Tensor
    relu_w: Tensor
    relu_u: Tensor
    mlp_out: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @staticmethod
    def init(rng: np.random.Generator, channels: int, prefix: str) -> Dict[str, np.ndarray]:
        square = (channels, channels)
        tree = {
            "w_q": tc.uniform_init(rng, square, channels),
            "w_k": tc.uniform_init(rng, square, channels),
            "w_z": np.zeros(square),
            "ln1_gamma": np.ones(channels),
            "ln1_beta": np.zeros(channels),
            "mlp_in": tc.uniform_init(rng, square, channels),
            "relu_w": tc.uniform_init(rng, square, channels),
            "relu_u": tc.uniform_init(rng, square, channels),
            "mlp_out": np.zeros(square),
            "ln2_gamma": np.ones(channels),
            "ln2_beta": np.zeros(channels),
        }
        return {f"{prefix}.{k}": v for k, v in tree.items()}


def vn_transformer_block(x: TensorLike, params: VNBlockParams, heads: int = 1) -> VecFeature:
    """X -> LN(X + Attn(X)) -> LN(. + MLP(.)), all in vector-neuron form."""
    x = tc.as_tensor(x)
    attended = vn_attention(vn_linear(params.w_q, x), vn_linear(params.w_k, x), vn_linear(params.w_z, x), heads)
    h = vn_layernorm(tc.add(x, attended), params.ln1_gamma, params.ln1_beta)
    hidden = vn_relu(vn_linear(params.mlp_in, h), params.relu_w, params.relu_u)
    return vn_layernorm(tc.add(h, vn_linear(params.mlp_out, hidden)), params.ln2_gamma, params.ln2_beta)
