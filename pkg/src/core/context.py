"""Rotation-invariant social context: speed/turn-angle features -> GRU -> GAT."""
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np

from src.core import tensorcore as tc
from src.core.models.scene import NeighborGraph, Scene
from src.core.tensorcore import ParamGroup, Tensor, TensorLike
from src.utils.errors import DimensionError, InputError


def invariant_features(positions: np.ndarray) -> np.ndarray:
    """Per-step (speed, turn angle) for trajectories shaped [..., T, 2] -> [..., T-1, 2].

    The turn angle is the unsigned angle between consecutive displacement
    vectors, in [0, pi]. It is 0 for the first step and wherever either
    displacement is zero. atan2(|cross|, dot) gives the same value as the
    clamped arccos of the normalized dot product without its loss of precision
    near 0 and pi.

    Features depend on displacements only, so a translation changes them by
    rounding alone: within 1e-12 for scenes a few hundred meters from the
    origin. They are not bit-identical under translation.
    """
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim < 2 or pts.shape[-1] != 2:
        raise DimensionError(f"invariant_features: expected [..., T, 2], got {pts.shape}")
    if pts.shape[-2] < 2:
        raise InputError("invariant_features: a trajectory needs at least 2 points")
    vel = np.diff(pts, axis=-2)
    speed = np.linalg.norm(vel, axis=-1)
    prev, cur = vel[..., :-1, :], vel[..., 1:, :]
    dot = (prev * cur).sum(axis=-1)
    cross = prev[..., 0] * cur[..., 1] - prev[..., 1] * cur[..., 0]
    moving = (speed[..., :-1] > 0) & (speed[..., 1:] > 0)
    turn = np.where(moving, np.arctan2(np.abs(cross), dot), 0.0)
    theta = np.concatenate([np.zeros(speed.shape[:-1] + (1,)), turn], axis=-1)
    return np.stack([speed, theta], axis=-1)


@dataclass(frozen=True)
class GRUParams(ParamGroup):
    w_r: Tensor  # [D x 2]
    w_z: Tensor
    w_h: Tensor
    u_r: Tensor  # [D x D]
    u_z: Tensor
    u_h: Tensor
    b_r: Tensor  # [D]
    b_z: Tensor
    b_h: Tensor

    @staticmethod
    def init(rng: np.random.Generator, hidden_dim: int, prefix: str) -> Dict[str, np.ndarray]:
        tree = {}
        for gate in ("r", "z", "h"):
            tree[f"w_{gate}"] = tc.uniform_init(rng, (hidden_dim, 2), 2)
            tree[f"u_{gate}"] = tc.uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)
            tree[f"b_{gate}"] = tc.uniform_init(rng, (hidden_dim,), hidden_dim)
        return {f"{prefix}.{k}": v for k, v in tree.items()}


def gru_step(v: TensorLike, h_prev: TensorLike, params: GRUParams) -> Tensor:
    """One GRU update on [..., 2] inputs and [..., D] states.

    h_t = z * h_{t-1} + (1 - z) * h~ with the candidate's bias added after tanh.
    """
    v, h_prev = tc.as_tensor(v), tc.as_tensor(h_prev)
    single = v.ndim == 1
    if single:
        v, h_prev = tc.reshape(v, (1,) + v.shape), tc.reshape(h_prev, (1,) + h_prev.shape)
    if v.shape[-1] != params.w_r.shape[1] or h_prev.shape[-1] != params.u_r.shape[0]:
        raise DimensionError(f"gru_step: input {v.shape} / state {h_prev.shape} do not match weights")
    r = tc.sigmoid(tc.linear(v, params.w_r) + tc.linear(h_prev, params.u_r) + params.b_r)
    z = tc.sigmoid(tc.linear(v, params.w_z) + tc.linear(h_prev, params.u_z) + params.b_z)
    candidate = tc.tanh(tc.linear(v, params.w_h) + tc.linear(r * h_prev, params.u_h)) + params.b_h
    h = z * h_prev + (1.0 - z) * candidate
    return tc.reshape(h, h.shape[1:]) if single else h


def gru_encode(seq: np.ndarray, params: GRUParams) -> Tensor:
    """Fold gru_step over [..., S, 2] feature sequences from a zero state; returns [..., D]."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise InputError("gru_encode: empty sequence")
    h = Tensor(np.zeros(seq.shape[:-2] + (params.u_r.shape[0],)))
    for t in range(seq.shape[-2]):
        h = gru_step(Tensor(seq[..., t, :]), h, params)
    return h


@dataclass(frozen=True)
class GATParams(ParamGroup):
    weight: Tensor  # [P x C x D]
    attn: Tensor    # [P x 2C]

    @staticmethod
    def init(rng: np.random.Generator, heads: int, in_dim: int, out_dim: int, prefix: str) -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.weight": tc.uniform_init(rng, (heads, out_dim, in_dim), in_dim),
            f"{prefix}.attn": tc.uniform_init(rng, (heads, 2 * out_dim), 2 * out_dim),
        }


def gat_attention(h: TensorLike, adjacency: np.ndarray, params: GATParams):
    """Per-head attention weights [P, N, N] over in-edges and projected features [P, N, C]."""
    h = tc.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != params.weight.shape[2]:
        raise DimensionError(f"gat: node features {h.shape} do not match weight {params.weight.shape}")
    n, c = h.shape[0], params.weight.shape[1]
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (n, n):
        raise DimensionError(f"gat: adjacency {adjacency.shape} for {n} nodes")
    projected = tc.matmul(tc.reshape(h, (1, n, h.shape[1])), tc.swapaxes(params.weight, -1, -2))
    heads = params.attn.shape[0]
    a_dst = tc.reshape(tc.take(params.attn, range(c), axis=1), (heads, c, 1))
    a_src = tc.reshape(tc.take(params.attn, range(c, 2 * c), axis=1), (heads, c, 1))
    score_i = tc.matmul(projected, a_dst)                              # [P, N, 1]
    score_j = tc.swapaxes(tc.matmul(projected, a_src), -1, -2)         # [P, 1, N]
    logits = tc.leaky_relu(score_i + score_j)
    return tc.softmax(logits, axis=-1, mask=adjacency[None]), projected


def gat_fuse(h: TensorLike, adjacency: np.ndarray, params: GATParams) -> Tensor:
    """sigmoid(mean_p sum_j alpha^p_ij W^p h_j) for every node, [N, C]."""
    weights, projected = gat_attention(h, adjacency, params)
    return tc.sigmoid(tc.mean(tc.matmul(weights, projected), axis=0))


def gat_layer(node_feats: Mapping[int, TensorLike], graph: NeighborGraph, params: GATParams) -> Dict[int, Tensor]:
    missing = [nid for nid in graph.node_ids if nid not in node_feats]
    if missing:
        raise InputError(f"gat_layer: no features for nodes {missing}")
    stacked = tc.stack([node_feats[nid] for nid in graph.node_ids], axis=0)
    fused = gat_fuse(stacked, graph.adjacency(), params)
    width = fused.shape[1]
    return {nid: tc.reshape(tc.take(fused, [row], axis=0), (width,)) for row, nid in enumerate(graph.node_ids)}


@dataclass(frozen=True)
class ContextParams:
    gru: GRUParams
    gat: GATParams

    @classmethod
    def from_tree(cls, tree: Mapping[str, Tensor], prefix: str = "context") -> "ContextParams":
        return cls(gru=GRUParams.from_tree(tree, f"{prefix}.gru"), gat=GATParams.from_tree(tree, f"{prefix}.gat"))

    @staticmethod
    def init(rng: np.random.Generator, hidden_dim: int, gat_heads: int, prefix: str = "context") -> Dict[str, np.ndarray]:
        tree = GRUParams.init(rng, hidden_dim, f"{prefix}.gru")
        tree.update(GATParams.init(rng, gat_heads, hidden_dim, hidden_dim, f"{prefix}.gat"))
        return tree


def encode_vehicles(histories: np.ndarray, adjacency: np.ndarray, ego_index: Sequence[int],
                    params: ContextParams, use_gat: bool = True) -> Tensor:
    """Context vectors [B, D] for the egos of a batch of scenes.

    ``histories`` stacks every vehicle of every scene ([V, T_his, 2]);
    ``adjacency`` is block-diagonal over scenes so attention never crosses scenes.
    """
    states = gru_encode(invariant_features(histories), params.gru)
    if use_gat:
        states = gat_fuse(states, adjacency, params.gat)
    return tc.take(states, list(ego_index), axis=0)


def encode_scene(scene: Scene, params: ContextParams, use_gat: bool = True) -> Tensor:
    """Context vector c_i [D] of one scene's ego."""
    context = encode_vehicles(scene.all_histories(), scene.graph.adjacency(), [0], params, use_gat)
    return tc.reshape(context, (context.shape[1],))
