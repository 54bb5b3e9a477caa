"""Collation of scenes into the stacked arrays the model consumes."""
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from src.core.models.scene import Scene
from src.utils.errors import ConfigError, InputError


@dataclass(frozen=True)
class SceneBatch:
    """Every vehicle of every scene stacked, with a block-diagonal neighbor mask."""
    scene_ids: List[str]
    histories: np.ndarray          # [V, T_his, 2]
    adjacency: np.ndarray          # [V, V], (i, j) set for edge j -> i
    ego_index: List[int]           # row of each scene's ego in ``histories``
    history_vectors: np.ndarray    # [B, H, 2] last H ego velocity vectors
    origins: np.ndarray            # [B, 2]
    offsets: Optional[np.ndarray] = None   # [B, T_pre, 2] clean future offsets

    @property
    def size(self) -> int:
        return len(self.scene_ids)

    def rotate(self, rotation: np.ndarray) -> "SceneBatch":
        return replace(
            self,
            histories=self.histories @ rotation,
            history_vectors=self.history_vectors @ rotation,
            origins=self.origins @ rotation,
            offsets=None if self.offsets is None else self.offsets @ rotation,
        )

    def repeat(self, n: int) -> "SceneBatch":
        """Each scene ``n`` times in a row, for drawing several samples at once."""
        if n == 1:
            return self
        order = np.repeat(np.arange(self.size), n)
        return collate_rows(self, order)


def ego_velocity_vectors(history: np.ndarray, count: int) -> np.ndarray:
    """The last ``count`` per-frame displacements of a [T, 2] history, oldest first."""
    if count > len(history) - 1:
        raise ConfigError(f"history_channels {count} exceeds the {len(history) - 1} observed velocities")
    if count == 0:
        return np.zeros((0, 2))
    return np.diff(history, axis=0)[-count:]


def collate(scenes: Sequence[Scene], history_channels: int, with_future: bool = True) -> SceneBatch:
    if not scenes:
        raise InputError("collate: no scenes")
    t_his = len(scenes[0].history)
    histories, ego_index, blocks = [], [], []
    for scene in scenes:
        if len(scene.history) != t_his:
            raise InputError(f"collate: scene {scene.scene_id} has {len(scene.history)} history frames, expected {t_his}")
        ego_index.append(sum(len(h) for h in histories))
        histories.append(scene.all_histories())
        blocks.append(scene.graph.adjacency())

    total = sum(len(h) for h in histories)
    adjacency = np.zeros((total, total), dtype=bool)
    for start, block in zip(ego_index, blocks):
        adjacency[start:start + len(block), start:start + len(block)] = block

    offsets = None
    if with_future:
        missing = [s.scene_id for s in scenes if s.future is None]
        if missing:
            raise InputError(f"collate: scenes without a future: {missing[:5]}")
        offsets = np.stack([s.future_offsets() for s in scenes])
    return SceneBatch(
        scene_ids=[s.scene_id for s in scenes],
        histories=np.concatenate(histories, axis=0),
        adjacency=adjacency,
        ego_index=ego_index,
        history_vectors=np.stack([ego_velocity_vectors(s.history, history_channels) for s in scenes]),
        origins=np.stack([s.origin for s in scenes]),
        offsets=offsets,
    )


def collate_rows(batch: SceneBatch, order: np.ndarray) -> SceneBatch:
    """A batch holding the scenes of ``batch`` at positions ``order`` (repeats allowed)."""
    bounds = list(batch.ego_index) + [len(batch.histories)]
    rows, ego_index, sizes = [], [], []
    for b in order:
        ego_index.append(sum(sizes))
        rows.append(np.arange(bounds[b], bounds[b + 1]))
        sizes.append(bounds[b + 1] - bounds[b])
    total = sum(sizes)
    adjacency = np.zeros((total, total), dtype=bool)
    for start, idx in zip(ego_index, rows):
        adjacency[start:start + len(idx), start:start + len(idx)] = batch.adjacency[np.ix_(idx, idx)]
    return SceneBatch(
        scene_ids=[batch.scene_ids[b] for b in order],
        histories=np.concatenate([batch.histories[idx] for idx in rows], axis=0),
        adjacency=adjacency,
        ego_index=ego_index,
        history_vectors=batch.history_vectors[order],
        origins=batch.origins[order],
        offsets=None if batch.offsets is None else batch.offsets[order],
    )
