"""Synthetic highway corpus: kinematic egos with surrounding traffic.

Each episode is simulated at ``raw_rate_hz`` on its own block of frame numbers
(episode e uses frames e*FRAME_BLOCK + 1 ...) so episodes never meet. The ego of
episode e is vehicle e*FRAME_BLOCK + 1; the other vehicles follow it.

Maneuver classes of the ego:

- constant_velocity: straight line at constant speed, never behind a slow leader
- turn_left / turn_right: constant turn rate +/- ``turn_rate`` (rad/s)
- lane_change: a quintic lateral shift of one lane width that starts after the
  observed history, triggered by a slower leader ahead in the same lane
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from src.config.run_config import RunConfig, SynthConfig
from src.core.models.scene import Scene, Trajectory
from src.core.rng import make_rng
from src.processing.scene_builder import build_scenes
from src.processing.trajectory_loader import downsample_corpus
from src.utils.errors import InputError
from src.utils.logging import logger

MANEUVERS = ("constant_velocity", "turn_left", "turn_right", "lane_change")
FRAME_BLOCK = 100
LANE_CHANGE_START = (3.0, 4.0)
LEADER_SPEED_RATIO = (0.5, 0.7)
NEIGHBOR_SPEED_RATIO = (0.9, 1.1)
NEIGHBOR_LONGITUDINAL = 30.0

T = TypeVar("T")


@dataclass(frozen=True)
class Episode:
    index: int
    maneuver: str
    ego_id: int
    trajectories: Tuple[Trajectory, ...]


def arc_positions(start: np.ndarray, heading: float, speed: float, turn_rate: float, times: np.ndarray) -> np.ndarray:
    """Constant speed and turn rate; a straight line when ``turn_rate`` is 0."""
    u = np.array([np.cos(heading), np.sin(heading)])
    if turn_rate == 0.0:
        return start + speed * times[:, None] * u
    r = speed / turn_rate
    psi = heading + turn_rate * times
    return start + r * np.stack([np.sin(psi) - np.sin(heading), np.cos(heading) - np.cos(psi)], axis=-1)


def quintic_blend(tau: np.ndarray) -> np.ndarray:
    """Smooth 0 -> 1 step with zero velocity and acceleration at both ends."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


def lane_change_positions(start: np.ndarray, heading: float, speed: float, times: np.ndarray,
                          lateral: float, t_start: float, duration: float) -> np.ndarray:
    u = np.array([np.cos(heading), np.sin(heading)])
    n = np.array([-u[1], u[0]])
    shift = lateral * quintic_blend((times - t_start) / duration)
    return start + speed * times[:, None] * u + shift[:, None] * n


def _episode(index: int, maneuver: str, config: SynthConfig, frames: int, rng: np.random.Generator) -> Episode:
    dt = 1.0 / config.raw_rate_hz
    times = np.arange(frames) * dt
    frame_ids = index * FRAME_BLOCK + 1 + np.arange(frames)
    ego_id = index * FRAME_BLOCK + 1

    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(config.speed_min, config.speed_max)
    start = rng.uniform(-200.0, 200.0, size=2)
    u = np.array([np.cos(heading), np.sin(heading)])
    n = np.array([-u[1], u[0]])

    paths: List[np.ndarray] = []
    if maneuver == "constant_velocity":
        paths.append(arc_positions(start, heading, speed, 0.0, times))
    elif maneuver in ("turn_left", "turn_right"):
        omega = config.turn_rate if maneuver == "turn_left" else -config.turn_rate
        paths.append(arc_positions(start, heading, speed, omega, times))
    else:
        side = rng.choice([-1.0, 1.0])
        t_start = rng.uniform(*LANE_CHANGE_START)
        paths.append(lane_change_positions(start, heading, speed, times, side * config.lane_width,
                                           t_start, config.lane_change_duration))
        gap = rng.uniform(config.leader_gap_min, config.leader_gap_max)
        leader_speed = speed * rng.uniform(*LEADER_SPEED_RATIO)
        paths.append(arc_positions(start + gap * u, heading, leader_speed, 0.0, times))

    # adjacent-lane traffic, straight and near the ego's speed
    for _ in range(min(int(rng.poisson(config.neighbors_mean)), FRAME_BLOCK - 3)):
        lateral = rng.choice([-1.0, 1.0]) * config.lane_width
        along = rng.uniform(-NEIGHBOR_LONGITUDINAL, NEIGHBOR_LONGITUDINAL)
        other_speed = speed * rng.uniform(*NEIGHBOR_SPEED_RATIO)
        paths.append(arc_positions(start + along * u + lateral * n, heading, other_speed, 0.0, times))

    trajectories = []
    for j, path in enumerate(paths):
        noisy = path + config.noise_sigma * rng.standard_normal(path.shape) if config.noise_sigma else path
        trajectories.append(Trajectory(vehicle_id=ego_id + j, frames=frame_ids, positions=noisy))
    return Episode(index=index, maneuver=maneuver, ego_id=ego_id, trajectories=tuple(trajectories))


def generate_episodes(config: SynthConfig, seed: int, frames: int) -> List[Episode]:
    """``scenes_per_class`` episodes of every maneuver class, each ``frames`` raw frames long."""
    if frames < 2:
        raise InputError(f"generate_episodes: need at least 2 frames, got {frames}")
    if config.neighbors_mean + 2 >= FRAME_BLOCK:
        raise InputError(f"neighbors_mean {config.neighbors_mean} leaves no room for vehicle ids")
    rng = make_rng(seed)
    episodes = []
    for maneuver in MANEUVERS:
        for _ in range(config.scenes_per_class):
            episodes.append(_episode(len(episodes), maneuver, config, frames, rng))
    if not episodes:
        raise InputError("synthetic corpus is empty: scenes_per_class is 0")
    logger.info(f"Generated {len(episodes)} synthetic episodes ({config.scenes_per_class} per class)")
    return episodes


def episode_frames(run: RunConfig) -> int:
    """Raw frames needed for one full history + future window after downsampling."""
    return (run.history_frames + run.future_frames - 1) * run.downsample_factor + 1


def corpus_trajectories(episodes: Sequence[Episode]) -> List[Trajectory]:
    return [t for e in episodes for t in e.trajectories]


def corpus_maneuvers(episodes: Sequence[Episode]) -> Dict[int, str]:
    return {e.ego_id: e.maneuver for e in episodes}


def scenes_from_trajectories(trajs: Sequence[Trajectory], run: RunConfig,
                             maneuvers: Optional[Dict[int, str]] = None) -> List[Scene]:
    """Raw-rate trajectories -> downsampled scenes, egos restricted to ``maneuvers`` when given."""
    down = downsample_corpus(trajs, run.downsample_factor)
    return build_scenes(
        down,
        radius_m=run.radius_m,
        history_frames=run.history_frames,
        future_frames=run.future_frames,
        stride=run.window_stride,
        ego_ids=None if maneuvers is None else list(maneuvers),
        maneuvers=maneuvers,
    )


def synth_generate(config: SynthConfig, seed: int, run: Optional[RunConfig] = None) -> List[Scene]:
    run = run or RunConfig()
    episodes = generate_episodes(config, seed, episode_frames(run))
    return scenes_from_trajectories(corpus_trajectories(episodes), run, corpus_maneuvers(episodes))


def split(items: Sequence[T], train_frac: float = 0.75, seed: int = 0,
          key=None) -> Tuple[List[T], List[T]]:
    """Deterministic shuffled split, stratified by ``key(item)`` when given.

    Each stratum contributes round(frac * size) items to the training side.
    Input order is kept within each side.
    """
    if not 0.0 < train_frac < 1.0:
        raise InputError(f"split: train_frac must lie in (0, 1), got {train_frac}")
    strata: Dict[object, List[int]] = {}
    for i, item in enumerate(items):
        strata.setdefault(key(item) if key else None, []).append(i)
    rng = make_rng(seed)
    train_idx = set()
    for label in sorted(strata, key=str):
        members = strata[label]
        order = rng.permutation(len(members))
        take = int(round(train_frac * len(members)))
        train_idx.update(members[j] for j in order[:take])
    train = [item for i, item in enumerate(items) if i in train_idx]
    test = [item for i, item in enumerate(items) if i not in train_idx]
    return train, test
