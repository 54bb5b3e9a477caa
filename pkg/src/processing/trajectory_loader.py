"""Trajectory CSV input/output.

Files carry one row per (vehicle, frame) with header ``vehicle_id,frame,x_m,y_m``;
extra columns are ignored. Line numbers in errors count the header as line 1.
"""
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from src.core.models.scene import Trajectory
from src.utils.errors import InputError, ParseError
from src.utils.logging import logger

COLUMNS = ["vehicle_id", "frame", "x_m", "y_m"]
MANEUVER_COLUMNS = ["vehicle_id", "maneuver"]
METERS_PER_FOOT = 0.3048
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


def _read_table(path: PathLike, required: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{path}: no such file")
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path}: empty file (header required)", line=1)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"{path}: {e}")
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ParseError(f"{path}: missing column(s) {missing}", line=1)
    return df


def _numeric(df: pd.DataFrame, column: str, path: PathLike, integer: bool) -> np.ndarray:
    values = pd.to_numeric(df[column].str.strip(), errors="coerce")
    bad = values.isna().to_numpy()
    if not integer:
        bad |= ~np.isfinite(values.fillna(0).to_numpy(dtype=np.float64))
    else:
        bad |= (values.fillna(0) % 1 != 0).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"{path}: non-numeric {column} value {df[column].iloc[row]!r}", line=row + 2)
    return values.to_numpy(dtype=np.int64 if integer else np.float64)


def read_points(path: PathLike, feet: bool = False) -> pd.DataFrame:
    """Validated rows as a numeric frame, sorted by (vehicle_id, frame)."""
    raw = _read_table(path, COLUMNS)
    df = pd.DataFrame({
        "vehicle_id": _numeric(raw, "vehicle_id", path, integer=True),
        "frame": _numeric(raw, "frame", path, integer=True),
        "x_m": _numeric(raw, "x_m", path, integer=False),
        "y_m": _numeric(raw, "y_m", path, integer=False),
    })
    dup = df.duplicated(subset=["vehicle_id", "frame"]).to_numpy()
    if dup.any():
        row = int(np.flatnonzero(dup)[0])
        raise ParseError(
            f"{path}: duplicate row for vehicle {df['vehicle_id'].iloc[row]} frame {df['frame'].iloc[row]}",
            line=row + 2,
        )
    if feet:
        df[["x_m", "y_m"]] = df[["x_m", "y_m"]] * METERS_PER_FOOT
    return df.sort_values(["vehicle_id", "frame"], kind="mergesort").reset_index(drop=True)


def load_trajectories(path: PathLike, feet: bool = False) -> List[Trajectory]:
    """One Trajectory per contiguous run of frames of each vehicle, ordered by (vehicle, segment)."""
    df = read_points(path, feet)
    trajectories: List[Trajectory] = []
    for vehicle_id, group in df.groupby("vehicle_id", sort=True):
        frames = group["frame"].to_numpy()
        positions = group[["x_m", "y_m"]].to_numpy()
        breaks = np.flatnonzero(np.diff(frames) != 1) + 1
        for segment, (f, p) in enumerate(zip(np.split(frames, breaks), np.split(positions, breaks))):
            trajectories.append(Trajectory(vehicle_id=int(vehicle_id), segment=segment, frames=f, positions=p))
        if len(breaks):
            logger.debug(f"Vehicle {vehicle_id} split into {len(breaks) + 1} segments")
    logger.info(f"Loaded {len(trajectories)} trajectories from {path}")
    return trajectories


def downsample(traj: Trajectory, factor: int, phase: Optional[int] = None) -> Trajectory:
    """Keep every ``factor``-th frame, starting at the first one.

    With ``phase`` the kept frames are those congruent to ``phase`` modulo
    ``factor * frame_step``, which keeps vehicles of one corpus on a common grid.
    """
    if factor < 1:
        raise InputError(f"downsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return traj
    if phase is None or not len(traj):
        start = 0
    else:
        period = factor * traj.frame_step
        start = (-(int(traj.frames[0]) - phase) % period) // traj.frame_step
        if (int(traj.frames[0]) - phase + start * traj.frame_step) % period:
            # the trajectory's grid never meets the phase
            start = len(traj)
    return Trajectory(
        vehicle_id=traj.vehicle_id,
        segment=traj.segment,
        frames=traj.frames[start::factor],
        positions=traj.positions[start::factor],
        frame_step=traj.frame_step * factor,
    )


def downsample_corpus(trajs: Iterable[Trajectory], factor: int) -> List[Trajectory]:
    """Downsample every trajectory on one shared frame grid; empty results are dropped."""
    trajs = list(trajs)
    if not trajs:
        return []
    phase = min(int(t.frames[0]) for t in trajs if len(t))
    out = [downsample(t, factor, phase) for t in trajs]
    return [t for t in out if len(t)]


def write_trajectories(trajs: Iterable[Trajectory], path: PathLike) -> None:
    rows = [
        pd.DataFrame({
            "vehicle_id": t.vehicle_id,
            "frame": t.frames,
            "x_m": t.positions[:, 0],
            "y_m": t.positions[:, 1],
        })
        for t in trajs
    ]
    df = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=COLUMNS)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_maneuvers(path: PathLike) -> Dict[int, str]:
    raw = _read_table(path, MANEUVER_COLUMNS)
    ids = _numeric(raw, "vehicle_id", path, integer=True)
    return {int(v): m.strip() for v, m in zip(ids, raw["maneuver"])}


def write_maneuvers(labels: Dict[int, str], path: PathLike) -> None:
    df = pd.DataFrame(sorted(labels.items()), columns=MANEUVER_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n")
