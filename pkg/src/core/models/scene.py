from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ANCHOR_TOL = 1e-9


def _as_points(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape [T, 2], got {arr.shape}")
    return arr


class Trajectory(BaseModel):
    """Time-ordered 2D positions (meters) of one vehicle at a fixed frame spacing."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vehicle_id: int
    segment: int = 0
    frames: np.ndarray
    positions: np.ndarray
    frame_step: int = Field(default=1, ge=1)

    @field_validator("frames", mode="before")
    @classmethod
    def _frames(cls, v):
        return np.asarray(v, dtype=np.int64).reshape(-1)

    @field_validator("positions", mode="before")
    @classmethod
    def _positions(cls, v):
        return _as_points(v, "positions")

    @model_validator(mode="after")
    def _contiguous(self):
        if len(self.frames) != len(self.positions):
            raise ValueError(f"{len(self.frames)} frames but {len(self.positions)} positions")
        if len(self.frames) > 1 and not np.all(np.diff(self.frames) == self.frame_step):
            raise ValueError(f"frames of vehicle {self.vehicle_id} are not contiguous at step {self.frame_step}")
        return self

    @property
    def key(self) -> Tuple[int, int]:
        return self.vehicle_id, self.segment

    def __len__(self) -> int:
        return len(self.frames)

    def index_of(self, frame: int) -> Optional[int]:
        if not len(self.frames):
            return None
        offset = frame - int(self.frames[0])
        if offset < 0 or offset % self.frame_step:
            return None
        idx = offset // self.frame_step
        return idx if idx < len(self.frames) else None

    def rotate(self, rotation: np.ndarray) -> "Trajectory":
        return self.model_copy(update={"positions": self.positions @ rotation})


class NeighborGraph(BaseModel):
    """Directed edges j -> i between vehicles within ``radius_m`` at the last observed frame.

    ``node_ids`` lists the ego first; every node carries a self-loop.
    """
    model_config = ConfigDict(frozen=True)

    ego_id: int
    node_ids: List[int]
    edges: List[Tuple[int, int]]

    @classmethod
    def from_positions(cls, node_ids: List[int], positions: np.ndarray, radius_m: float) -> "NeighborGraph":
        pts = np.asarray(positions, dtype=np.float64).reshape(len(node_ids), 2)
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        edges = [
            (node_ids[j], node_ids[i])
            for i in range(len(node_ids))
            for j in range(len(node_ids))
            if i == j or dist[i, j] <= radius_m
        ]
        return cls(ego_id=node_ids[0], node_ids=list(node_ids), edges=edges)

    def adjacency(self) -> np.ndarray:
        """Boolean [N x N] with entry (i, j) set when the edge j -> i exists."""
        pos = {nid: k for k, nid in enumerate(self.node_ids)}
        adj = np.zeros((len(self.node_ids), len(self.node_ids)), dtype=bool)
        for src, dst in self.edges:
            adj[pos[dst], pos[src]] = True
        return adj


class Scene(BaseModel):
    """One ego vehicle's history (and future, when known) plus neighbor histories.

    Coordinates are translated so that the ego's last observed position is the
    origin; ``origin`` holds that position in the source frame.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scene_id: str
    ego_id: int
    start_frame: int = 0
    history: np.ndarray
    future: Optional[np.ndarray] = None
    neighbor_ids: List[int] = Field(default_factory=list)
    neighbor_histories: np.ndarray = Field(default_factory=lambda: np.zeros((0, 0, 2)))
    graph: NeighborGraph
    origin: np.ndarray = Field(default_factory=lambda: np.zeros(2))
    maneuver: Optional[str] = None

    @field_validator("history", mode="before")
    @classmethod
    def _history(cls, v):
        return _as_points(v, "history")

    @field_validator("future", mode="before")
    @classmethod
    def _future(cls, v):
        return None if v is None else _as_points(v, "future")

    @field_validator("origin", mode="before")
    @classmethod
    def _origin(cls, v):
        return np.asarray(v, dtype=np.float64).reshape(2)

    @field_validator("neighbor_histories", mode="before")
    @classmethod
    def _neighbors(cls, v):
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def _consistent(self):
        t_his = len(self.history)
        if t_his < 2:
            raise ValueError("history needs at least 2 frames")
        if np.linalg.norm(self.history[-1]) > ANCHOR_TOL:
            raise ValueError("history must end at the origin (ego anchor)")
        n = len(self.neighbor_ids)
        if n == 0 and self.neighbor_histories.size == 0:
            object.__setattr__(self, "neighbor_histories", np.zeros((0, t_his, 2)))
        elif self.neighbor_histories.shape != (n, t_his, 2):
            raise ValueError(f"neighbor_histories must be {(n, t_his, 2)}, got {self.neighbor_histories.shape}")
        if self.graph.node_ids != [self.ego_id] + list(self.neighbor_ids):
            raise ValueError("graph nodes must be the ego followed by the neighbors")
        return self

    @property
    def num_neighbors(self) -> int:
        return len(self.neighbor_ids)

    def all_histories(self) -> np.ndarray:
        """[1 + N, T_his, 2] with the ego first."""
        return np.concatenate([self.history[None], self.neighbor_histories], axis=0)

    def future_offsets(self) -> np.ndarray:
        if self.future is None:
            raise ValueError(f"scene {self.scene_id} has no future")
        return np.diff(np.concatenate([self.history[-1:], self.future]), axis=0)

    def rotate(self, rotation: np.ndarray) -> "Scene":
        """The same scene with every position right-multiplied by ``rotation``."""
        return self.model_copy(update={
            "history": self.history @ rotation,
            "future": None if self.future is None else self.future @ rotation,
            "neighbor_histories": self.neighbor_histories @ rotation,
            "origin": self.origin @ rotation,
        })
