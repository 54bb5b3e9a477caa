"""Sampling runs for one scene: sample CSVs, sampling traces and their SVG plots."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from matplotlib import rc_context
from matplotlib.figure import Figure

from src.core.models.scene import Scene
from src.core.rng import make_rng
from src.core.services.model import EquiDiffModel
from src.processing.batching import collate
from src.processing.scene_builder import from_offsets
from src.utils.errors import EquiDiffError
from src.utils.logging import logger

FLOAT_FORMAT = "%.17g"
PathLike = Union[str, Path]


@dataclass
class SceneSamples:
    scene: Scene
    offsets: np.ndarray                 # [N, T_pre, 2]
    trace: Dict[int, np.ndarray]        # k -> [N, T_pre, 2]

    @property
    def positions(self) -> np.ndarray:
        """Absolute positions in the source frame of the scene."""
        return from_offsets(self.offsets, self.scene.origin)


def sample_scene(model: EquiDiffModel, scene: Scene, n: int, seed: int,
                 record: Sequence[int] = ()) -> SceneSamples:
    """``n`` samples for ``scene`` drawn from one seeded stream."""
    if n < 1:
        raise EquiDiffError(f"sample count must be >= 1, got {n}")
    batch = collate([scene], model.config.history_channels, with_future=False).repeat(n)
    result = model.sample(batch, rng=make_rng(seed), record=record)
    logger.info(f"Drew {n} samples for scene {scene.scene_id} (seed {seed})")
    return SceneSamples(scene=scene, offsets=result.offsets, trace=result.trace)


def _write_csv(df: pd.DataFrame, path: PathLike) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise EquiDiffError(f"cannot write {path}: {e}")


def samples_frame(samples: SceneSamples) -> pd.DataFrame:
    n, frames, _ = samples.offsets.shape
    pos = samples.positions
    return pd.DataFrame({
        "sample_id": np.repeat(np.arange(n), frames),
        "t": np.tile(np.arange(1, frames + 1), n),
        "dx": samples.offsets[..., 0].reshape(-1),
        "dy": samples.offsets[..., 1].reshape(-1),
        "x": pos[..., 0].reshape(-1),
        "y": pos[..., 1].reshape(-1),
    })


def write_samples(samples: SceneSamples, path: PathLike) -> None:
    _write_csv(samples_frame(samples), path)
    logger.info(f"Wrote {len(samples.offsets)} samples to {path}")


def trace_frame(trace: Dict[int, np.ndarray], steps: Sequence[int]) -> pd.DataFrame:
    """Rows (sample_id, k, t, x, y) of the offset-space states, in the order of ``steps``."""
    parts: List[pd.DataFrame] = []
    for k in steps:
        state = trace[k]
        n, frames, _ = state.shape
        parts.append(pd.DataFrame({
            "sample_id": np.repeat(np.arange(n), frames),
            "k": k,
            "t": np.tile(np.arange(1, frames + 1), n),
            "x": state[..., 0].reshape(-1),
            "y": state[..., 1].reshape(-1),
        }))
    return pd.concat(parts, ignore_index=True)


def write_trace(trace: Dict[int, np.ndarray], steps: Sequence[int], path: PathLike) -> None:
    missing = [k for k in steps if k not in trace]
    if missing:
        raise EquiDiffError(f"trace does not hold steps {missing}")
    _write_csv(trace_frame(trace, steps), path)
    logger.info(f"Wrote trace of {len(steps)} steps to {path}")


def render_trace_svg(trace: Dict[int, np.ndarray], steps: Sequence[int], out_dir: PathLike) -> List[Path]:
    """One scatter plot per recorded step of the states y_k, written as k<step>.svg."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with rc_context({"svg.hashsalt": "equidiff", "svg.fonttype": "none"}):
        for k in steps:
            state = trace[k]
            fig = Figure(figsize=(4, 4))
            ax = fig.subplots()
            ax.scatter(state[..., 0].reshape(-1), state[..., 1].reshape(-1), s=4, alpha=0.5)
            ax.set_title(f"k = {k}")
            ax.set_xlabel("x")
            ax.set_ylabel("y")
            ax.set_aspect("equal", adjustable="datalim")
            path = out_dir / f"k{k}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            written.append(path)
    logger.info(f"Rendered {len(written)} trace plots in {out_dir}")
    return written
