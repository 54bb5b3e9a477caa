"""Sliding-window scene construction around ego vehicles."""
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.models.scene import NeighborGraph, Scene, Trajectory
from src.utils.errors import DimensionError, InputError
from src.utils.logging import logger


def to_offsets(positions: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Per-step displacements of ``positions`` [T, 2], the first taken from ``anchor``."""
    positions = np.asarray(positions, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if positions.shape[-1] != 2 or anchor.shape[-1] != 2:
        raise DimensionError(f"to_offsets: expected 2D points, got {positions.shape} and {anchor.shape}")
    return np.diff(np.concatenate([anchor[..., None, :], positions], axis=-2), axis=-2)


def from_offsets(offsets: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of ``to_offsets``: cumulative sum of the offsets starting at ``anchor``."""
    offsets = np.asarray(offsets, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if offsets.shape[-1] != 2 or anchor.shape[-1] != 2:
        raise DimensionError(f"from_offsets: expected 2D points, got {offsets.shape} and {anchor.shape}")
    return anchor[..., None, :] + np.cumsum(offsets, axis=-2)


class _FrameIndex:
    """Lookup of the trajectories that fully cover a frame range."""

    def __init__(self, trajs: Sequence[Trajectory]):
        self.trajs = [t for t in trajs if len(t)]
        self.first = np.array([int(t.frames[0]) for t in self.trajs], dtype=np.int64)
        self.last = np.array([int(t.frames[-1]) for t in self.trajs], dtype=np.int64)

    def covering(self, first: int, last: int, frame_step: int) -> List[Tuple[Trajectory, int]]:
        hits = []
        for i in np.flatnonzero((self.first <= first) & (self.last >= last)):
            traj = self.trajs[i]
            idx = traj.index_of(first)
            if traj.frame_step == frame_step and idx is not None:
                hits.append((traj, idx))
        return hits

    def overlapping(self, frame: int) -> int:
        return int(np.count_nonzero((self.first <= frame) & (self.last >= frame)))


def _make_scene(ego: Trajectory, start: int, history_frames: int, future_frames: int, radius_m: float,
                index: _FrameIndex, maneuver: Optional[str]) -> Scene:
    step = ego.frame_step
    first = int(ego.frames[start])
    last = first + (history_frames - 1) * step
    ego_window = ego.positions[start:start + history_frames + future_frames]
    origin = ego_window[history_frames - 1].copy()

    candidates = []
    for traj, idx in index.covering(first, last, step):
        if traj.vehicle_id == ego.vehicle_id:
            continue
        hist = traj.positions[idx:idx + history_frames]
        if np.linalg.norm(hist[-1] - origin) <= radius_m:
            candidates.append((traj.vehicle_id, traj.segment, hist))
    candidates.sort(key=lambda c: (c[0], c[1]))
    seen = set()
    neighbors = []
    for vid, _, hist in candidates:
        if vid not in seen:
            seen.add(vid)
            neighbors.append((vid, hist))

    covered = index.overlapping(last) - 1 - len(neighbors)
    if covered > 0:
        logger.debug(f"Ego {ego.vehicle_id} at frame {last}: {covered} vehicle(s) without a full history skipped")

    neighbor_ids = [vid for vid, _ in neighbors]
    neighbor_histories = (np.stack([h for _, h in neighbors]) - origin) if neighbors else np.zeros((0, history_frames, 2))
    history = ego_window[:history_frames] - origin
    history[-1] = 0.0
    future = ego_window[history_frames:] - origin if future_frames else None
    last_positions = np.concatenate([history[-1:], neighbor_histories[:, -1]], axis=0)
    graph = NeighborGraph.from_positions([ego.vehicle_id] + neighbor_ids, last_positions, radius_m)
    return Scene(
        scene_id=f"{ego.vehicle_id}:{ego.segment}:{first}",
        ego_id=ego.vehicle_id,
        start_frame=first,
        history=history,
        future=future,
        neighbor_ids=neighbor_ids,
        neighbor_histories=neighbor_histories,
        graph=graph,
        origin=origin,
        maneuver=maneuver,
    )


def build_scenes(trajs: Sequence[Trajectory], radius_m: float = 50.0, history_frames: int = 15,
                 future_frames: int = 25, stride: int = 5, ego_ids: Optional[Iterable[int]] = None,
                 maneuvers: Optional[Dict[int, str]] = None) -> List[Scene]:
    """Scenes for every full window of every ego trajectory, ordered by (vehicle, segment, start).

    Neighbors are the other vehicles within ``radius_m`` of the ego at the last
    history frame whose own history covers the whole window. Trajectories too
    short for one window produce no scenes.
    """
    if history_frames < 2 or future_frames < 1 or stride < 1:
        raise InputError(f"build_scenes: invalid window {history_frames}/{future_frames}/{stride}")
    wanted = None if ego_ids is None else set(int(v) for v in ego_ids)
    index = _FrameIndex(trajs)
    total = history_frames + future_frames
    scenes: List[Scene] = []
    short = 0
    for ego in sorted(trajs, key=lambda t: t.key):
        if wanted is not None and ego.vehicle_id not in wanted:
            continue
        if len(ego) < total:
            short += 1
            continue
        label = maneuvers.get(ego.vehicle_id) if maneuvers else None
        for start in range(0, len(ego) - total + 1, stride):
            scenes.append(_make_scene(ego, start, history_frames, future_frames, radius_m, index, label))
    if short:
        logger.warning(f"Skipped {short} trajectories shorter than {total} frames")
    logger.info(f"Built {len(scenes)} scenes from {len(trajs)} trajectories")
    return scenes


def build_inference_scene(trajs: Sequence[Trajectory], ego_id: int, history_frames: int = 15,
                          radius_m: float = 50.0) -> Scene:
    """Scene without a future from the last ``history_frames`` frames of ``ego_id``."""
    candidates = [t for t in trajs if t.vehicle_id == ego_id and len(t) >= history_frames]
    if not candidates:
        raise InputError(f"no trajectory of vehicle {ego_id} with {history_frames} frames")
    ego = max(candidates, key=lambda t: int(t.frames[-1]))
    return _make_scene(ego, len(ego) - history_frames, history_frames, 0, radius_m, _FrameIndex(trajs), None)


def default_ego(trajs: Sequence[Trajectory], history_frames: int) -> int:
    """Smallest vehicle id with a long enough track."""
    ids = sorted(t.vehicle_id for t in trajs if len(t) >= history_frames)
    if not ids:
        raise InputError(f"no vehicle has {history_frames} frames")
    return ids[0]
